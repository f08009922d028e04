"""Batch evaluation: seeded episode runs, metric tables and ablation sweeps.

Policies implement `begin(env)` and `act(obs, env) -> WaypointAction | None`
(None declares the task complete).  All policies in a comparison run on the
same seeds, and episodes execute sequentially in seed order so tables are
reproducible byte-for-byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .config import Config
from .env import GradingEnv, WaypointAction
from .episode import EpisodeRecord, MetricsRow, metrics, record_episode
from .oracle import NoValidAction, OracleState, SnpOracle
from .rng import SplitMix64
from .scenario import ScenarioSpec, default_spec


class UnknownPolicy(ValueError):
    pass


class SnpPolicy:
    name = "snp"

    def begin(self, env: GradingEnv) -> None:
        self.oracle = SnpOracle.for_env(env)
        self.mem = OracleState()

    def act(self, obs, env) -> WaypointAction | None:
        try:
            action, self.mem = self.oracle.act(obs, env.state, self.mem)
        except NoValidAction:
            return None
        return action


class RandomPolicy:
    """Uniform pixels over the whole observation grid (may pick unreachable
    ones and fail the episode, which is part of the baseline's nature)."""

    name = "random"

    def begin(self, env: GradingEnv) -> None:
        self.rng = SplitMix64(env.seed ^ 0x9E3779B9)
        self.rows = env.fov.ds_rows
        self.cols = env.fov.ds_cols

    def act(self, obs, env) -> WaypointAction:
        p = (self.rng.randint(0, self.rows - 1), self.rng.randint(0, self.cols - 1))
        s = (self.rng.randint(0, self.rows - 1), self.rng.randint(0, self.cols - 1))
        return WaypointAction(p, s)


class ReplayRecordPolicy:
    """Feed back the actions of a stored record."""

    name = "replay"

    def __init__(self, record: EpisodeRecord):
        self.record = record

    def begin(self, env: GradingEnv) -> None:
        self.cursor = 0

    def act(self, obs, env) -> WaypointAction | None:
        if self.cursor >= len(self.record.steps):
            return None
        action = self.record.steps[self.cursor].action
        self.cursor += 1
        return action


class ExternalPolicy:
    """Bridge to an action server speaking the wire protocol: each decision
    sends an OBS frame and expects a RESULT frame carrying the pixels."""

    name = "external"

    def __init__(self, address: str):
        self.address = address

    def begin(self, env: GradingEnv) -> None:
        from .protocol import connect
        self.conn = connect(self.address)

    def act(self, obs, env) -> WaypointAction | None:
        import base64

        from .heightmap import hmap_bytes
        msg = {"type": "OBS",
               "obs_b64": base64.b64encode(
                   hmap_bytes(obs.rows, obs.cols, obs.cell_size, obs.values)).decode(),
               "x": repr(env.state.x), "y": repr(env.state.y),
               "heading": repr(env.state.heading)}
        reply = self.conn.request(msg)
        if reply["type"] == "ERROR":
            raise RuntimeError(f"action server error: {reply.get('message')}")
        if int(reply.get("done", "0")):
            return None
        return WaypointAction((int(reply["p_row"]), int(reply["p_col"])),
                              (int(reply["s_row"]), int(reply["s_col"])))


def make_policy(name: str, **kwargs):
    if name == "snp":
        return SnpPolicy()
    if name == "random":
        return RandomPolicy()
    if name == "external":
        return ExternalPolicy(kwargs["address"])
    if name == "replay":
        return ReplayRecordPolicy(kwargs["record"])
    raise UnknownPolicy(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# Metric tables
# ---------------------------------------------------------------------------

_NUMERIC = ("volume_left", "max_height_left", "mean_height_left",
            "total_duration", "total_reward")


@dataclass(frozen=True)
class MetricsTable:
    policy: str
    family: str
    rows: tuple[MetricsRow, ...]

    def mean(self, field: str) -> float:
        return float(np.mean([getattr(r, field) for r in self.rows]))

    def std(self, field: str) -> float:
        return float(np.std([getattr(r, field) for r in self.rows]))

    def to_csv(self) -> str:
        header = ["seed", "steps", "volume_left", "max_height_left",
                  "mean_height_left", "total_duration", "total_reward",
                  "done", "failed"]
        lines = [",".join(header)]
        for r in self.rows:
            lines.append(",".join([
                str(r.seed), str(r.steps), repr(r.volume_left),
                repr(r.max_height_left), repr(r.mean_height_left),
                repr(r.total_duration), repr(r.total_reward),
                str(int(r.done)), str(int(r.failed))]))
        if self.rows:
            lines.append(",".join(
                ["mean", ""] + [repr(self.mean(f)) for f in _NUMERIC] + ["", ""]))
            lines.append(",".join(
                ["std", ""] + [repr(self.std(f)) for f in _NUMERIC] + ["", ""]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cols = ["seed", "steps", "volume_left", "max_height_left",
                "mean_height_left", "total_duration", "total_reward",
                "done", "failed"]
        data = [[str(r.seed), str(r.steps), f"{r.volume_left:.4f}",
                 f"{r.max_height_left:.4f}", f"{r.mean_height_left:.5f}",
                 f"{r.total_duration:.1f}", f"{r.total_reward:.2f}",
                 str(int(r.done)), str(int(r.failed))] for r in self.rows]
        if self.rows:
            data.append(["mean", ""] + [f"{self.mean(f):.4f}" for f in _NUMERIC]
                        + ["", ""])
            data.append(["std", ""] + [f"{self.std(f):.4f}" for f in _NUMERIC]
                        + ["", ""])
        widths = [max(len(c), *(len(row[i]) for row in data)) if data else len(c)
                  for i, c in enumerate(cols)]
        out = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        for row in data:
            out.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        return f"policy={self.policy} family={self.family} n={len(self.rows)}\n" \
               + "\n".join(out) + "\n"


def evaluate(policy_name: str, family_or_spec, n_runs: int, seed0: int,
             cfg: Config, record_dir=None, **policy_kwargs) -> MetricsTable:
    """Run `n_runs` seeded episodes (seeds seed0..seed0+n-1) of one policy."""
    if isinstance(family_or_spec, ScenarioSpec):
        spec = family_or_spec
        family = spec.family
    else:
        family = family_or_spec
        spec = default_spec(family)
    rows = []
    for i in range(n_runs):
        seed = seed0 + i
        policy = make_policy(policy_name, **policy_kwargs)
        out_dir = None
        if record_dir is not None:
            out_dir = os.path.join(os.fspath(record_dir), f"episode_{seed}")
        record = record_episode(spec, seed, policy, cfg, out_dir=out_dir)
        rows.append(metrics(record))
    return MetricsTable(policy_name, family, tuple(rows))


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

SWEEPABLE = ("downsample", "mask_sigma_factor", "fill_fraction")


@dataclass(frozen=True)
class AblationColumn:
    value: float
    state_space: tuple[int, int]
    table: MetricsTable


@dataclass(frozen=True)
class AblationTable:
    parameter: str
    columns: tuple[AblationColumn, ...]

    def to_text(self) -> str:
        head = ["metric"] + [f"{c.value:g}" for c in self.columns]
        rows = [
            ["state space"] + [f"{c.state_space[0]}x{c.state_space[1]}"
                               for c in self.columns],
            ["volume left"] + [f"{c.table.mean('volume_left'):.4f}"
                               for c in self.columns],
            ["total reward"] + [f"{c.table.mean('total_reward'):.2f}"
                                for c in self.columns],
            ["mean height left"] + [f"{c.table.mean('mean_height_left'):.5f}"
                                    for c in self.columns],
        ]
        widths = [max(len(head[i]), *(len(r[i]) for r in rows))
                  for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(head, widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        return f"sweep parameter={self.parameter}\n" + "\n".join(lines) + "\n"


def sweep(parameter: str, values, policy_name: str, family_or_spec,
          n_runs: int, seed0: int, cfg: Config) -> AblationTable:
    """One evaluate() block per parameter value, all on the same seeds."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"parameter must be one of {SWEEPABLE}, got {parameter!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    columns = []
    for value in values:
        if parameter == "downsample":
            cfg_v = replace(cfg, downsample=int(value))
        else:
            cfg_v = replace(cfg, **{parameter: float(value)})
        block = 1 << cfg_v.downsample
        state_space = (-(-cfg_v.fov_rows // block), -(-cfg_v.fov_cols // block))
        table = evaluate(policy_name, family_or_spec, n_runs, seed0, cfg_v)
        columns.append(AblationColumn(float(value), state_space, table))
    return AblationTable(parameter, tuple(columns))


# ---------------------------------------------------------------------------
# Rendering (portable grayscale + trajectory polyline)
# ---------------------------------------------------------------------------

def pgm_bytes(values: np.ndarray) -> bytes:
    """P5 grayscale of a difference map: mid-gray at 0, symmetric range."""
    peak = float(np.abs(values).max())
    scale = 127.0 / peak if peak > 0 else 0.0
    img = np.clip(128.0 + values * scale, 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    return header + img.tobytes()


def render_record(record: EpisodeRecord, out_dir) -> None:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for t, obs in enumerate(record.observations):
        with open(os.path.join(out_dir, f"step_{t:04d}.pgm"), "wb") as fh:
            fh.write(pgm_bytes(obs.values))
    lines = ["# x y heading"]
    lines += [f"{s.pose[0]!r} {s.pose[1]!r} {s.pose[2]!r}" for s in record.steps]
    with open(os.path.join(out_dir, "trajectory.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
