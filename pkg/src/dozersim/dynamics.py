"""Low-level dozer motion and the blade-soil interaction.

Transitions are pure: (state, map, action) -> StepOutcome with a new state
and a new map.  Volume is conserved exactly (to float64 accumulation): each
forward-grading outcome satisfies

    ground volume change + blade load change + spilled_out == 0

where spilled_out is soil that left the map over an edge.  Rotate and
reverse never touch the map and never shed blade load (the blade is lifted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import Config
from .heightmap import HeightMap


class OutOfBounds(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


@dataclass(frozen=True)
class DozerState:
    x: float
    y: float
    heading: float
    blade_load: float = 0.0
    blade_width: float = 1.0
    blade_capacity: float = 0.1
    v_max: float = 1.0
    v_min: float = 0.1
    omega: float = 1.0
    alpha: float = 0.7    # velocity loss per unit load fraction

    def __post_init__(self):
        if self.blade_width <= 0:
            raise ValueError("blade_width must be positive")
        if not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")
        if not 0.0 <= self.blade_load <= self.blade_capacity + 1e-12:
            raise ValueError(f"blade_load {self.blade_load} outside [0, capacity]")

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)

    @classmethod
    def from_config(cls, cfg: Config, x: float, y: float, heading: float) -> "DozerState":
        return cls(x=x, y=y, heading=heading, blade_load=0.0,
                   blade_width=cfg.blade_width, blade_capacity=cfg.blade_capacity,
                   v_max=cfg.v_max, v_min=cfg.v_min(), omega=cfg.omega,
                   alpha=cfg.alpha)


@dataclass(frozen=True)
class LowLevelAction:
    kind: str            # "rotate" | "forward" | "reverse"
    amount: float        # radians for rotate, meters otherwise
    grading: bool = True  # forward only: blade down and interacting

    def __post_init__(self):
        if self.kind not in ("rotate", "forward", "reverse"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind != "rotate" and self.amount < 0:
            raise ValueError("travel distance must be >= 0")


@dataclass(frozen=True)
class StepOutcome:
    new_state: DozerState
    new_map: HeightMap
    moved_volume: float   # gross soil picked up + deposited, m^3
    spilled_out: float    # soil that left the map, m^3
    duration: float       # seconds


def velocity(state: DozerState) -> float:
    """Travel speed under load: v_max scaled down by the load fraction."""
    v = state.v_max * (1.0 - state.alpha * state.blade_load / state.blade_capacity)
    return max(state.v_min, v)


def _check_inside(m: HeightMap, x: float, y: float) -> None:
    if not (0.0 <= x <= m.rows * m.cell_size and 0.0 <= y <= m.cols * m.cell_size):
        raise OutOfBounds(f"pose ({x:.3f}, {y:.3f}) leaves the map")


def apply_rotate(state: DozerState, m: HeightMap, dpsi: float) -> StepOutcome:
    new_state = replace(state, heading=wrap_angle(state.heading + dpsi))
    return StepOutcome(new_state, m, 0.0, 0.0, abs(dpsi) / state.omega)


def apply_reverse(state: DozerState, m: HeightMap, dx: float) -> StepOutcome:
    nx = state.x - dx * math.cos(state.heading)
    ny = state.y - dx * math.sin(state.heading)
    _check_inside(m, nx, ny)
    new_state = replace(state, x=nx, y=ny)
    return StepOutcome(new_state, m, 0.0, 0.0, dx / state.v_max)


def apply_forward_transit(state: DozerState, m: HeightMap, dx: float) -> StepOutcome:
    """Forward travel with the blade lifted (repositioning leg)."""
    nx = state.x + dx * math.cos(state.heading)
    ny = state.y + dx * math.sin(state.heading)
    _check_inside(m, nx, ny)
    new_state = replace(state, x=nx, y=ny)
    return StepOutcome(new_state, m, 0.0, 0.0, dx / state.v_max)


def _deposit(heights: np.ndarray, tgt: np.ndarray, rr: np.ndarray, cc: np.ndarray,
             vol: float, area: float) -> None:
    """Drop `vol` onto the given cells: fill below-target deficits first
    (proportionally), spread any remainder uniformly."""
    deficit = np.maximum(tgt[rr, cc] - heights[rr, cc], 0.0)
    cap = float(deficit.sum()) * area
    if cap > 0.0:
        f = min(1.0, vol / cap)
        heights[rr, cc] += deficit * f
        vol -= min(vol, cap)
    if vol > 0.0:
        heights[rr, cc] += vol / (len(rr) * area)


def apply_forward_grading(state: DozerState, m: HeightMap, h_des: HeightMap,
                          dx: float, rho: float = 0.5,
                          deposit_rate: float | None = None) -> StepOutcome:
    """Push forward `dx` meters with the blade down.

    Integration runs in sub-steps of at most one cell length.  Per sub-step,
    cells in the swept strip (blade_width wide) with height above target are
    cut to target; the cut volume fills the blade up to capacity, the rest
    spills to the two flank cells (fraction rho) and to the strip behind the
    blade (1 - rho).  A strip already at-or-below target instead receives
    blade discharge at `deposit_rate` m^3 per cell of travel, filling the
    deepest deficits first.
    """
    if deposit_rate is None:
        deposit_rate = state.blade_capacity / 10.0
    cell = m.cell_size
    area = m.cell_area
    cos_h, sin_h = math.cos(state.heading), math.sin(state.heading)
    nx = state.x + dx * cos_h
    ny = state.y + dx * sin_h
    _check_inside(m, nx, ny)
    if dx == 0.0:
        return StepOutcome(state, m, 0.0, 0.0, 0.0)

    n_sub = max(1, int(math.ceil(dx / cell - 1e-12)))
    sub_len = dx / n_sub
    half_w = state.blade_width / 2.0

    # Candidate cells: bounding box of the swept rectangle plus the trailing
    # strip, then exact along/lateral classification in the heading frame.
    reach = half_w + cell
    x_lo = min(state.x, nx) - reach - sub_len
    x_hi = max(state.x, nx) + reach
    y_lo = min(state.y, ny) - reach - sub_len
    y_hi = max(state.y, ny) + reach
    r0 = max(0, int(math.floor(x_lo / cell - 0.5)))
    r1 = min(m.rows, int(math.ceil(x_hi / cell + 0.5)))
    c0 = max(0, int(math.floor(y_lo / cell - 0.5)))
    c1 = min(m.cols, int(math.ceil(y_hi / cell + 0.5)))
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    px = (rr + 0.5) * cell - state.x
    py = (cc + 0.5) * cell - state.y
    along = px * cos_h + py * sin_h
    lat = -px * sin_h + py * cos_h
    in_swath = (np.abs(lat) <= half_w) & (along > -sub_len) & (along <= dx + 1e-12)
    rr, cc, along = rr[in_swath], cc[in_swath], along[in_swath]
    # Bin k covers along in (k*sub_len, (k+1)*sub_len]; bin -1 is the
    # trailing strip behind the start pose.
    bin_idx = np.ceil(along / sub_len - 1e-12).astype(np.int64) - 1
    bins: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for k in range(-1, n_sub):
        sel = bin_idx == k
        bins[k] = (rr[sel], cc[sel])

    heights = m.heights.copy()
    tgt = h_des.heights
    load = state.blade_load
    capacity = state.blade_capacity
    spilled = 0.0
    picked_total = 0.0
    deposited_total = 0.0
    duration = 0.0
    prev_cells = bins[-1]

    for k in range(n_sub):
        duration += sub_len / velocity(replace(state, blade_load=load))
        br, bc = bins[k]
        excess = heights[br, bc] - tgt[br, bc] if len(br) else np.empty(0)
        pos = excess > 0.0
        total = float(excess[pos].sum()) * area if len(br) else 0.0
        if total > 0.0:
            take = min(total, capacity - load)
            overflow = total - take
            heights[br[pos], bc[pos]] = tgt[br[pos], bc[pos]]
            load += take
            picked_total += total
            if overflow > 0.0:
                # Flanks: one cell just outside each blade tip at the strip end.
                end_along = (k + 1) * sub_len
                flank_off = half_w + cell / 2.0
                half = rho * overflow / 2.0
                for sign in (1.0, -1.0):
                    fx = state.x + end_along * cos_h - sign * flank_off * sin_h
                    fy = state.y + end_along * sin_h + sign * flank_off * cos_h
                    fr = int(math.floor(fx / cell))
                    fc = int(math.floor(fy / cell))
                    if 0 <= fr < m.rows and 0 <= fc < m.cols:
                        heights[fr, fc] += half / area
                    else:
                        spilled += half
                trailing = (1.0 - rho) * overflow
                if len(prev_cells[0]):
                    heights[prev_cells] += trailing / (len(prev_cells[0]) * area)
                else:
                    spilled += trailing
        elif load > 0.0 and len(br):
            drop = min(load, deposit_rate * (sub_len / cell))
            _deposit(heights, tgt, br, bc, drop, area)
            load -= drop
            deposited_total += drop
        elif load > 0.0 and not len(br):
            # Strip entirely off-map: discharge leaves the world.
            drop = min(load, deposit_rate * (sub_len / cell))
            spilled += drop
            load -= drop
            deposited_total += drop
        prev_cells = (br, bc)

    new_state = replace(state, x=nx, y=ny, blade_load=min(load, capacity))
    new_map = HeightMap(m.rows, m.cols, m.cell_size, heights)
    return StepOutcome(new_state, new_map, picked_total + deposited_total,
                       spilled, duration)


def apply_action(state: DozerState, m: HeightMap, h_des: HeightMap,
                 action: LowLevelAction, rho: float = 0.5,
                 deposit_rate: float | None = None) -> StepOutcome:
    if action.kind == "rotate":
        return apply_rotate(state, m, action.amount)
    if action.kind == "reverse":
        return apply_reverse(state, m, action.amount)
    if action.grading:
        return apply_forward_grading(state, m, h_des, action.amount,
                                     rho=rho, deposit_rate=deposit_rate)
    return apply_forward_transit(state, m, action.amount)
