"""Rule-based expert policy: detect piles in the observation, push the
heaviest lane of the nearest pile.

Waypoint selection works on an absolute lane lattice perpendicular to the
scenario's nominal push heading (lane width = blade width).  Each call picks
the nearest detection, ranks the lanes crossing it by remaining excess mass
and pushes the heaviest one: p lands one blade-length beyond the pile's far
edge on that lane, s stages one blade-length before the near edge of the
lane the next push is expected to take.  Grading a lane empties it, so
successive calls step laterally across the pile face without needing pile
identity tracking; a small memory of the last lane guards against stalls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import Config
from .dynamics import DozerState
from .env import GradingEnv, WaypointAction, pixel_to_world, world_to_pixel
from .heightmap import DiffMap, FovSpec


class NoValidAction(RuntimeError):
    pass


@dataclass(frozen=True)
class PileDetection:
    center: tuple[float, float]          # excess-weighted centroid, obs pixels
    bbox: tuple[int, int, int, int]      # (r0, c0, r1, c1) inclusive
    volume: float                        # m^3 above threshold-level target
    peak: float                          # m
    pixels: tuple[np.ndarray, np.ndarray]

    @property
    def extent(self) -> tuple[int, int]:
        r0, c0, r1, c1 = self.bbox
        return (r1 - r0 + 1, c1 - c0 + 1)


def detect_piles(obs: DiffMap, threshold: float,
                 anchor: tuple[int, int]) -> list[PileDetection]:
    """Connected components (4-connectivity) of cells above threshold,
    nearest to the anchor first, ties broken by larger volume."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    mask = obs.values > threshold
    labels, count = ndimage.label(mask)
    out = []
    area = obs.cell_area
    for idx in range(1, count + 1):
        rr, cc = np.nonzero(labels == idx)
        vals = obs.values[rr, cc]
        total = float(vals.sum())
        cr = float((rr * vals).sum() / total)
        cy = float((cc * vals).sum() / total)
        out.append(PileDetection(
            center=(cr, cy),
            bbox=(int(rr.min()), int(cc.min()), int(rr.max()), int(cc.max())),
            volume=total * area,
            peak=float(vals.max()),
            pixels=(rr, cc)))
    ar, ac = anchor
    out.sort(key=lambda d: (math.hypot(d.center[0] - ar, d.center[1] - ac),
                            -d.volume))
    return out


@dataclass(frozen=True)
class OracleState:
    """Lane-coverage memory carried between calls."""
    covered: tuple[int, ...] = ()
    last_lane: int | None = None
    last_mass: float = 0.0


class SnpOracle:
    """Expert waypoint policy bound to one environment's geometry."""

    def __init__(self, cfg: Config, fov: FovSpec, world_rows: int,
                 world_cols: int, nominal_heading: float):
        self.cfg = cfg
        self.fov = fov
        self.world_rows = world_rows
        self.world_cols = world_cols
        self.nominal = nominal_heading
        self.threshold = cfg.detect_threshold
        self.lane_width = cfg.blade_width
        self.cell = cfg.cell_size

    @classmethod
    def for_env(cls, env: GradingEnv) -> "SnpOracle":
        return cls(env.cfg, env.fov, env.h.rows, env.h.cols, env.nominal_heading)

    # -- frame helpers ------------------------------------------------------

    def _along_lat(self, xy: tuple[float, float]) -> tuple[float, float]:
        cos_h, sin_h = math.cos(self.nominal), math.sin(self.nominal)
        return (xy[0] * cos_h + xy[1] * sin_h,
                -xy[0] * sin_h + xy[1] * cos_h)

    def _from_along_lat(self, along: float, lat: float) -> tuple[float, float]:
        cos_h, sin_h = math.cos(self.nominal), math.sin(self.nominal)
        return (along * cos_h - lat * sin_h, along * sin_h + lat * cos_h)

    def _operable(self, xy: tuple[float, float]) -> bool:
        m = self.cfg.operable_margin
        return (m <= xy[0] <= self.world_rows * self.cell - m
                and m <= xy[1] <= self.world_cols * self.cell - m)

    def _clamp_operable(self, xy: tuple[float, float],
                        toward: tuple[float, float]) -> tuple[float, float]:
        """Walk a point toward the dozer until it is operable."""
        if self._operable(xy):
            return xy
        dx, dy = toward[0] - xy[0], toward[1] - xy[1]
        dist = math.hypot(dx, dy)
        if dist < 1e-9:
            raise NoValidAction("no operable pixel on the approach ray")
        steps = max(2, int(dist / (self.cell * self.fov.block)) + 1)
        for i in range(1, steps + 1):
            cand = (xy[0] + dx * i / steps, xy[1] + dy * i / steps)
            if self._operable(cand):
                return cand
        raise NoValidAction("no operable pixel on the approach ray")

    # -- waypoint selection ---------------------------------------------------

    def select_waypoints(self, obs: DiffMap, detections: list[PileDetection],
                         state: DozerState,
                         mem: OracleState) -> tuple[WaypointAction, OracleState]:
        if not detections:
            raise ValueError("select_waypoints needs at least one detection")
        pose = state.pose
        target = detections[0]
        rr, cc = target.pixels
        # World coordinates of the component's cells.
        pts = [pixel_to_world((int(r), int(c)), pose, self.fov, self.cell)
               for r, c in zip(rr, cc)]
        along = np.array([self._along_lat(p)[0] for p in pts])
        lat = np.array([self._along_lat(p)[1] for p in pts])
        vols = obs.values[rr, cc] * obs.cell_area
        half_cell = obs.cell_size / 2.0

        lane_ids = np.floor(lat / self.lane_width).astype(np.int64)
        masses = {}
        for lid in np.unique(lane_ids):
            masses[int(lid)] = float(vols[lane_ids == lid].sum())
        ranked = sorted(masses, key=lambda lid: (-masses[lid], lid))
        lane = ranked[0]
        # Anti-stall: a lane that did not shrink since we last pushed it is
        # blocked (e.g. unreachable tail); take the runner-up.
        if (lane == mem.last_lane and len(ranked) > 1
                and masses[lane] >= 0.9 * mem.last_mass):
            lane = ranked[1]
        next_lane = next((lid for lid in ranked if lid != lane), lane)

        sel = lane_ids == lane
        lane_lat = (lane + 0.5) * self.lane_width
        a_far = float(along[sel].max()) + half_cell
        a_near = float(along[sel].min()) - half_cell

        # Bite-sizing: push only as far as fills the blade.
        order = np.argsort(along[sel], kind="stable")
        cum = np.cumsum(vols[sel][order])
        cap = self.cfg.fill_fraction * state.blade_capacity
        over = np.nonzero(cum > cap)[0]
        if len(over):
            a_cut = float(along[sel][order][over[0]]) + half_cell
            a_far = min(a_far, a_cut)

        p_world = self._from_along_lat(a_far + self.lane_width, lane_lat)
        sel_next = lane_ids == next_lane
        a_near_next = (float(along[sel_next].min()) - half_cell
                       if sel_next.any() else a_near)
        s_world = self._from_along_lat(a_near_next - self.lane_width,
                                       (next_lane + 0.5) * self.lane_width)

        dozer = (state.x, state.y)
        p_world = self._clamp_operable(p_world, dozer)
        s_world = self._clamp_operable(s_world, dozer)
        p_px = world_to_pixel(p_world, pose, self.fov, self.cell)
        s_px = world_to_pixel(s_world, pose, self.fov, self.cell)
        new_mem = OracleState(covered=mem.covered + (lane,),
                              last_lane=lane, last_mass=masses[lane])
        return WaypointAction(p_px, s_px), new_mem

    def act(self, obs: DiffMap, state: DozerState,
            mem: OracleState | None = None
            ) -> tuple[WaypointAction | None, OracleState]:
        """One policy decision; None means the task looks complete."""
        mem = mem or OracleState()
        detections = detect_piles(obs, self.threshold, self.fov.ds_anchor)
        if not detections:
            return None, mem
        return self.select_waypoints(obs, detections, state, mem)
