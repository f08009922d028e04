"""Waypoint-level grading environment.

One waypoint action (p, s) expands into the fixed six-step low-level leg
(rotate toward p, grade forward to p, reverse to the leg start, rotate
toward s, drive to s blade-up, rotate back to the nominal push heading) and
runs it through the soil dynamics.  Observations are the down-sampled EGO
field of view; rewards combine volume progress, peak-height progress, leg
duration and terminal bonuses/penalties.

Transitions are deterministic: identical (scenario, seed, action sequence)
triples reproduce observations and rewards bit-for-bit, which is what makes
episode records replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import Config
from .dynamics import (DozerState, LowLevelAction, apply_action, wrap_angle)
from .heightmap import (DiffMap, FovSpec, HeightMap, diff_map, downsample,
                        ego_fov, excess_volume, max_excess_height)
from .scenario import (GeneratedScenario, ScenarioSpec, apply_dumps, generate)


class EpisodeFinished(RuntimeError):
    pass


class UnreachablePixel(ValueError):
    pass


class DegenerateDistribution(ValueError):
    pass


@dataclass(frozen=True)
class WaypointAction:
    p: tuple[int, int]   # push destination pixel (row, col) in the obs grid
    s: tuple[int, int]   # next start pixel

    def __post_init__(self):
        for r, c in (self.p, self.s):
            if r < 0 or c < 0:
                raise ValueError(f"negative pixel ({r}, {c})")


@dataclass(frozen=True)
class RewardWeights:
    lambda_volume: float = 1.0
    lambda_time: float = 0.01
    lambda_height: float = 10.0
    lambda_done: float = 100.0
    lambda_fail: float = 100.0
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("lambda_volume", "lambda_time", "lambda_height",
                     "lambda_done", "lambda_fail"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")

    @classmethod
    def from_config(cls, cfg: Config) -> "RewardWeights":
        return cls(cfg.lambda_volume, cfg.lambda_time, cfg.lambda_height,
                   cfg.lambda_done, cfg.lambda_fail, cfg.gamma)


def compute_reward(w: RewardWeights, f_v: float, f_t: float, f_h: float,
                   done_bonus: float, fail_penalty: float) -> float:
    """Single shared expression so records can re-derive rewards exactly."""
    return (w.lambda_volume * f_v - w.lambda_time * f_t
            + w.lambda_height * f_h + done_bonus - fail_penalty)


@dataclass(frozen=True)
class StepResult:
    observation: DiffMap
    reward: float
    # (f_v, f_t, f_h, done_bonus, fail_penalty); the bonus/penalty entries
    # already carry their lambda weight.
    reward_components: tuple[float, float, float, float, float]
    done: bool
    failed: bool
    info: dict


def diff_reward(d_prev: DiffMap, d_curr: DiffMap) -> float:
    if (d_prev.rows, d_prev.cols) != (d_curr.rows, d_curr.cols) \
            or d_prev.cell_size != d_curr.cell_size:
        raise ValueError("diff maps have mismatched geometry")
    return excess_volume(d_prev) - excess_volume(d_curr)


def check_done(d: DiffMap, eps_done: float) -> bool:
    return max_excess_height(d) <= eps_done


# ---------------------------------------------------------------------------
# Gaussian action prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMask:
    values: np.ndarray   # (ds_rows, ds_cols) in (0, 1], max 1 at the anchor
    sigma_factor: float


def gaussian_mask(spec: FovSpec, sigma_factor: float,
                  base_scale: float = 0.5) -> GaussianMask:
    """Prior concentrating action probability near the dozer; sigma_factor
    divides the base sigma (base_scale * grid extent), so larger factors mask
    out pixels further away."""
    if sigma_factor <= 0:
        raise ValueError("sigma_factor must be positive")
    ar, ac = spec.ds_anchor
    sr = spec.ds_rows / sigma_factor * base_scale
    sc = spec.ds_cols / sigma_factor * base_scale
    r = (np.arange(spec.ds_rows) - ar) / sr
    c = (np.arange(spec.ds_cols) - ac) / sc
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return GaussianMask(np.exp(-0.5 * (rr ** 2 + cc ** 2)), sigma_factor)


@dataclass(frozen=True)
class PolicyDistribution:
    p_grid: np.ndarray
    s_grid: np.ndarray


def apply_mask(dist: PolicyDistribution, mask: GaussianMask) -> PolicyDistribution:
    if dist.p_grid.shape != mask.values.shape:
        raise ValueError("distribution and mask shapes differ")
    out = []
    for grid in (dist.p_grid, dist.s_grid):
        w = grid * mask.values
        total = w.sum()
        if not total > 1e-300:
            raise DegenerateDistribution("all probability mass masked away")
        out.append(w / total)
    return PolicyDistribution(out[0], out[1])


# ---------------------------------------------------------------------------
# Pixel <-> world geometry
# ---------------------------------------------------------------------------

def pixel_to_world(pixel: tuple[int, int], pose: tuple[float, float, float],
                   spec: FovSpec, cell_size: float) -> tuple[float, float]:
    """Center of a down-sampled observation pixel in world coordinates."""
    px, py, heading = pose
    ar, ac = spec.ds_anchor
    step = spec.block * cell_size
    fwd = (pixel[0] - ar) * step
    lat = (pixel[1] - ac) * step
    cos_h, sin_h = math.cos(heading), math.sin(heading)
    return (px + fwd * cos_h - lat * sin_h, py + fwd * sin_h + lat * cos_h)


def world_to_pixel(xy: tuple[float, float], pose: tuple[float, float, float],
                   spec: FovSpec, cell_size: float) -> tuple[int, int]:
    px, py, heading = pose
    ar, ac = spec.ds_anchor
    step = spec.block * cell_size
    dx, dy = xy[0] - px, xy[1] - py
    cos_h, sin_h = math.cos(heading), math.sin(heading)
    fwd = dx * cos_h + dy * sin_h
    lat = -dx * sin_h + dy * cos_h
    r = ar + int(round(fwd / step))
    c = ac + int(round(lat / step))
    return (min(max(r, 0), spec.ds_rows - 1), min(max(c, 0), spec.ds_cols - 1))


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

class GradingEnv:
    def __init__(self, gen: GeneratedScenario, cfg: Config):
        self.cfg = cfg
        self.weights = RewardWeights.from_config(cfg)
        self.fov = FovSpec(cfg.fov_rows, cfg.fov_cols,
                           (cfg.anchor_row, cfg.anchor_col), cfg.downsample)
        self.scenario = gen.spec
        self.seed = gen.seed
        self.h = gen.h_init
        self.h_des = gen.h_des
        self.state = gen.state
        self.dump_schedule = gen.dump_schedule
        self.nominal_heading = gen.spec.heading
        self.step_count = 0
        self.total_duration = 0.0
        self.total_spilled = 0.0
        self.total_dumped_volume = 0.0
        self.total_dumped_excess = 0.0
        self.failed = False
        self.done = check_done(self.delta(), cfg.eps_done)

    @classmethod
    def reset(cls, spec: ScenarioSpec, seed: int,
              cfg: Config | None = None) -> tuple["GradingEnv", DiffMap]:
        cfg = cfg or Config()
        env = cls(generate(spec, seed, cfg), cfg)
        return env, env.observation()

    # -- views ------------------------------------------------------------

    def delta(self) -> DiffMap:
        return diff_map(self.h, self.h_des)

    def observation(self) -> DiffMap:
        full = ego_fov(self.h, self.h_des, self.state.pose, self.fov)
        return downsample(full, self.cfg.downsample)

    def action_mask(self) -> GaussianMask:
        return gaussian_mask(self.fov, self.cfg.mask_sigma_factor,
                             self.cfg.mask_base_scale)

    def operable_rect(self) -> tuple[float, float, float, float]:
        m = self.cfg.operable_margin
        return (m, self.h.rows * self.h.cell_size - m,
                m, self.h.cols * self.h.cell_size - m)

    def in_operable(self, xy: tuple[float, float]) -> bool:
        x_lo, x_hi, y_lo, y_hi = self.operable_rect()
        return x_lo <= xy[0] <= x_hi and y_lo <= xy[1] <= y_hi

    def fork(self) -> "GradingEnv":
        """Independent copy for counterfactual rollouts."""
        clone = object.__new__(GradingEnv)
        clone.__dict__.update(self.__dict__)
        clone.h = HeightMap(self.h.rows, self.h.cols, self.h.cell_size,
                            self.h.heights.copy())
        return clone

    # -- leg planning -------------------------------------------------------

    def _validate_pixel(self, pixel: tuple[int, int]) -> None:
        r, c = pixel
        if not (0 <= r < self.fov.ds_rows and 0 <= c < self.fov.ds_cols):
            raise ValueError(f"pixel {pixel} outside {self.fov.ds_rows}x{self.fov.ds_cols} grid")

    def plan_leg(self, action: WaypointAction) -> list[LowLevelAction]:
        """Expand a waypoint action into the six-step low-level sequence.

        Raises UnreachablePixel when either pixel maps outside the operable
        area; the caller treats that as the episode-failure trigger.
        """
        self._validate_pixel(action.p)
        self._validate_pixel(action.s)
        pose = self.state.pose
        wp = pixel_to_world(action.p, pose, self.fov, self.h.cell_size)
        ws = pixel_to_world(action.s, pose, self.fov, self.h.cell_size)
        for name, point in (("p", wp), ("s", ws)):
            if not self.in_operable(point):
                raise UnreachablePixel(f"{name} -> {point} outside operable area")
        bx, by, psi0 = pose
        dxp, dyp = wp[0] - bx, wp[1] - by
        dist_p = math.hypot(dxp, dyp)
        theta_p = math.atan2(dyp, dxp) if dist_p > 1e-12 else psi0
        dxs, dys = ws[0] - bx, ws[1] - by
        dist_s = math.hypot(dxs, dys)
        theta_s = math.atan2(dys, dxs) if dist_s > 1e-12 else theta_p
        return [
            LowLevelAction("rotate", wrap_angle(theta_p - psi0)),
            LowLevelAction("forward", dist_p, grading=True),
            LowLevelAction("reverse", dist_p),
            LowLevelAction("rotate", wrap_angle(theta_s - theta_p)),
            LowLevelAction("forward", dist_s, grading=False),
            LowLevelAction("rotate", wrap_angle(self.nominal_heading - theta_s)),
        ]

    # -- stepping -----------------------------------------------------------

    def step(self, action: WaypointAction) -> StepResult:
        if self.done or self.failed:
            raise EpisodeFinished("episode already terminated")
        self.step_count += 1

        dumped_excess = 0.0
        dumped_volume = 0.0
        if any(d.step_index == self.step_count for d in self.dump_schedule):
            e_pre = excess_volume(self.delta())
            self.h, dumped_volume, _ = apply_dumps(
                self.h, self.dump_schedule, self.step_count,
                (self.state.x, self.state.y), self.scenario.spacing,
                self.nominal_heading)
            dumped_excess = excess_volume(self.delta()) - e_pre
            self.total_dumped_volume += dumped_volume
            self.total_dumped_excess += dumped_excess

        d_before = self.delta()
        e_before = excess_volume(d_before)
        hmax_before = max_excess_height(d_before)

        duration = 0.0
        moved = 0.0
        spilled = 0.0
        try:
            actions = self.plan_leg(action)
        except UnreachablePixel:
            self.failed = True
            components = (0.0, 0.0, 0.0, 0.0, self.weights.lambda_fail)
            reward = compute_reward(self.weights, *components[:3],
                                    components[3], components[4])
            return StepResult(self.observation(), reward, components,
                              False, True,
                              {"duration": 0.0, "moved_volume": 0.0,
                               "spilled": 0.0, "dumped_excess": dumped_excess,
                               "dumped_volume": dumped_volume,
                               "pose": self.state.pose})

        for act in actions:
            out = apply_action(self.state, self.h, self.h_des, act,
                               rho=self.cfg.rho,
                               deposit_rate=self.cfg.deposit_rate())
            self.state = out.new_state
            self.h = out.new_map
            duration += out.duration
            moved += out.moved_volume
            spilled += out.spilled_out
        self.total_duration += duration
        self.total_spilled += spilled

        d_after = self.delta()
        f_v = e_before - excess_volume(d_after)
        f_h = hmax_before - max_excess_height(d_after)
        f_t = duration
        self.done = check_done(d_after, self.cfg.eps_done)
        self.failed = (not self.done) and self.step_count >= self.cfg.timeout_steps
        done_bonus = self.weights.lambda_done if self.done else 0.0
        fail_penalty = self.weights.lambda_fail if self.failed else 0.0
        components = (f_v, f_t, f_h, done_bonus, fail_penalty)
        reward = compute_reward(self.weights, f_v, f_t, f_h,
                                done_bonus, fail_penalty)
        return StepResult(self.observation(), reward, components,
                          self.done, self.failed,
                          {"duration": duration, "moved_volume": moved,
                           "spilled": spilled, "dumped_excess": dumped_excess,
                           "dumped_volume": dumped_volume,
                           "pose": self.state.pose})

    def abandon(self) -> None:
        """Mark the episode failed when a policy gives up before the
        environment reaches a terminal state."""
        if not self.done:
            self.failed = True
