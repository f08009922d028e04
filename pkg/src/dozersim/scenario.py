"""Seeded scenario generation for the three evaluation families plus random
training scenes.

Generation is a pure function of (spec, seed) using the portable SplitMix64
stream; draw order is fixed (row count, piles per row, then per pile: peak,
sigma_x, sigma_y, lateral jitter; scheduled dump piles follow in schedule
order) so identical seeds reproduce identical worlds everywhere.

Family geometry:
  init        dozer on a plateau at target height; everything ahead is a
              basin below target with pile rows dumped in it.  The dozer
              builds the grade by spreading the piles into the basin.
  continuous  whole area already at target; pile rows sit on top ahead and
              more rows keep arriving on a schedule.
  edge        area at target except one final pile row near the far edge.
  random      piles scattered uniformly over the interior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .config import Config, parse_kv_text
from .dynamics import DozerState
from .heightmap import GaussianPile, HeightMap, add_pile, new_flat
from .rng import SplitMix64

FAMILIES = ("init", "continuous", "edge", "random")


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    family: str = "init"
    rows: int = 600
    cols: int = 600
    cell_size: float = 0.05
    pile_rows_lo: int = 2
    pile_rows_hi: int = 4
    piles_per_row_lo: int = 3
    piles_per_row_hi: int = 5
    peak_lo: float = 0.15
    peak_hi: float = 0.35
    sigma_lo: float = 0.3
    sigma_hi: float = 0.6
    spacing: float = 1.5
    jitter_frac: float = 0.1
    start_x: float = 3.025
    start_y: float = 15.025
    heading: float = 0.0
    basin_depth: float = 0.25
    pile_offset: float = 2.0     # first pile row this far ahead of the dozer
    edge_margin: float = 2.0     # edge family: row distance from the far edge
    dump_every: int = 8          # continuous family: steps between dumps
    dump_count: int = 2          # continuous family: number of dump events

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidScenario(f"unknown family {self.family!r}")
        if self.rows < 1 or self.cols < 1 or self.cell_size <= 0:
            raise InvalidScenario("bad area dimensions")
        if self.pile_rows_lo < 0 or self.pile_rows_lo > self.pile_rows_hi:
            raise InvalidScenario("bad pile row range")
        if self.piles_per_row_lo < 0 or self.piles_per_row_lo > self.piles_per_row_hi:
            raise InvalidScenario("bad piles-per-row range")
        if self.peak_lo > self.peak_hi or self.sigma_lo > self.sigma_hi:
            raise InvalidScenario("degenerate pile parameter range")
        if self.sigma_lo <= 0 or self.peak_lo <= 0:
            raise InvalidScenario("pile parameters must be positive")
        if self.spacing <= 0:
            raise InvalidScenario("spacing must be positive")


_INT_FIELDS = {"rows", "cols", "pile_rows_lo", "pile_rows_hi",
               "piles_per_row_lo", "piles_per_row_hi", "dump_every", "dump_count"}
_STR_FIELDS = {"family"}


def scenario_text(spec: ScenarioSpec) -> str:
    lines = [f"{f.name} = {getattr(spec, f.name)!r}" for f in fields(spec)]
    return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> ScenarioSpec:
    raw = parse_kv_text(text)
    known = {f.name for f in fields(ScenarioSpec)}
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise InvalidScenario(f"unknown scenario key {key!r}")
        if key in _STR_FIELDS:
            kwargs[key] = val.strip("'\"")
        elif key in _INT_FIELDS:
            kwargs[key] = int(val)
        else:
            kwargs[key] = float(val)
    return ScenarioSpec(**kwargs)


def default_spec(family: str, **overrides) -> ScenarioSpec:
    """Family spec with sensible geometry; keyword overrides win."""
    base = ScenarioSpec(family=family)
    if family == "edge":
        far = base.rows * base.cell_size - base.edge_margin
        base = replace(base, pile_rows_lo=1, pile_rows_hi=1,
                       start_x=_snap(far - 4.0, base.cell_size), basin_depth=0.0)
    if family in ("continuous", "random"):
        base = replace(base, basin_depth=0.0)
    return replace(base, **overrides) if overrides else base


def _snap(x: float, cell: float) -> float:
    """Snap a coordinate to the nearest cell center."""
    return (math.floor(x / cell) + 0.5) * cell


@dataclass(frozen=True)
class ScheduledDump:
    step_index: int
    piles: tuple[GaussianPile, ...]


@dataclass(frozen=True)
class GeneratedScenario:
    spec: ScenarioSpec
    seed: int
    h_init: HeightMap
    h_des: HeightMap
    state: DozerState
    dump_schedule: tuple[ScheduledDump, ...]


def _draw_row(rng: SplitMix64, spec: ScenarioSpec, row_x: float, n: int,
              base_peak_lift: float) -> list[GaussianPile]:
    piles = []
    y0 = spec.start_y - (n - 1) / 2.0 * spec.spacing
    for i in range(n):
        peak = rng.uniform(spec.peak_lo, spec.peak_hi)
        sx = rng.uniform(spec.sigma_lo, spec.sigma_hi)
        sy = rng.uniform(spec.sigma_lo, spec.sigma_hi)
        jy = rng.uniform(-spec.jitter_frac, spec.jitter_frac) * spec.spacing
        piles.append(GaussianPile(center=(row_x, y0 + i * spec.spacing + jy),
                                  sigma=(sx, sy), peak_height=peak + base_peak_lift))
    return piles


def generate(spec: ScenarioSpec, seed: int, cfg: Config | None = None) -> GeneratedScenario:
    """Build (H_init, H_des, dozer state, dump schedule) for a seed."""
    cfg = cfg or Config()
    rng = SplitMix64(seed)
    n_rows = rng.randint(spec.pile_rows_lo, spec.pile_rows_hi)
    n_per = rng.randint(spec.piles_per_row_lo, spec.piles_per_row_hi)

    h_des = new_flat(spec.rows, spec.cols, spec.cell_size, 0.0)
    start_x = _snap(spec.start_x, spec.cell_size)
    start_y = _snap(spec.start_y, spec.cell_size)

    if spec.family == "init" and spec.basin_depth > 0.0:
        h = new_flat(spec.rows, spec.cols, spec.cell_size, 0.0)
        heights = h.heights.copy()
        xs = (0.5 + np.arange(spec.rows)) * spec.cell_size
        heights[xs > start_x + 1e-9, :] = -spec.basin_depth
        h = HeightMap(spec.rows, spec.cols, spec.cell_size, heights)
        lift = spec.basin_depth
    else:
        h = new_flat(spec.rows, spec.cols, spec.cell_size, 0.0)
        lift = 0.0

    if spec.family == "random":
        margin = 1.5
        n = n_rows * n_per
        for _ in range(n):
            cx = rng.uniform(margin, spec.rows * spec.cell_size - margin)
            cy = rng.uniform(margin, spec.cols * spec.cell_size - margin)
            peak = rng.uniform(spec.peak_lo, spec.peak_hi)
            sx = rng.uniform(spec.sigma_lo, spec.sigma_hi)
            sy = rng.uniform(spec.sigma_lo, spec.sigma_hi)
            h = add_pile(h, GaussianPile((cx, cy), (sx, sy), peak))
    elif spec.family == "edge":
        row_x = spec.rows * spec.cell_size - spec.edge_margin
        for pile in _draw_row(rng, spec, row_x, n_per, lift):
            h = add_pile(h, pile)
    else:
        for k in range(n_rows):
            row_x = start_x + spec.pile_offset + k * spec.spacing
            for pile in _draw_row(rng, spec, row_x, n_per, lift):
                h = add_pile(h, pile)

    schedule: list[ScheduledDump] = []
    if spec.family == "continuous":
        for event in range(spec.dump_count):
            step = (event + 1) * spec.dump_every
            row_x = start_x + spec.pile_offset + (event % max(n_rows, 1)) * spec.spacing
            piles = tuple(_draw_row(rng, spec, row_x, n_per, 0.0))
            schedule.append(ScheduledDump(step, piles))

    state = DozerState.from_config(cfg, start_x, start_y, spec.heading)
    return GeneratedScenario(spec, seed, h, h_des, state, tuple(schedule))


def apply_dumps(m: HeightMap, schedule, step_index: int,
                dozer_xy: tuple[float, float], spacing: float,
                heading: float) -> tuple[HeightMap, float, int]:
    """Add all piles scheduled for `step_index`.

    A pile aimed at the dozer's own cell is shifted forward by one lattice
    spacing (repeatedly) until clear.  Returns (new map, volume actually
    added to the grid, number of piles added).
    """
    added = 0
    vol_before = m.total_volume()
    cell = m.cell_size
    dr = int(dozer_xy[0] / cell)
    dc = int(dozer_xy[1] / cell)
    cos_h, sin_h = math.cos(heading), math.sin(heading)
    for dump in schedule:
        if dump.step_index != step_index:
            continue
        for pile in dump.piles:
            cx, cy = pile.center
            for _ in range(1000):
                if (int(cx / cell), int(cy / cell)) != (dr, dc):
                    break
                cx += spacing * cos_h
                cy += spacing * sin_h
            m = add_pile(m, GaussianPile((cx, cy), pile.sigma,
                                         pile.peak_height, pile.rotation))
            added += 1
    return m, m.total_volume() - vol_before, added
