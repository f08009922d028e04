"""Flat key-value configuration shared by the environment, dynamics and oracle.

One config file drives a whole run.  Format: one `key = value` per line,
`#` starts a comment, keys are dotted lowercase.  `dump_config()` emits the
resolved config in canonical (sorted) form; its SHA-256 prefix is the config
hash embedded in episode manifests so records can refuse to replay against a
different build configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class Config:
    # Observation window (EGO field of view), in world cells.
    fov_rows: int = 600
    fov_cols: int = 600
    anchor_row: int = 112
    anchor_col: int = 304
    cell_size: float = 0.05
    downsample: int = 3
    # Episode control.
    eps_done: float = 0.02
    timeout_steps: int = 200
    operable_margin: float = 1.0
    # Reward weights (lambda_volume is the reward weight on volume moved;
    # the trainer's value-loss weight is a separate knob over there).
    lambda_volume: float = 1.0
    lambda_time: float = 0.01
    lambda_height: float = 10.0
    lambda_done: float = 100.0
    lambda_fail: float = 100.0
    gamma: float = 0.99
    # Action-prior mask.
    mask_sigma_factor: float = 3.0
    mask_base_scale: float = 0.5
    # Blade / drivetrain.
    alpha: float = 0.7
    rho: float = 0.5
    blade_width: float = 1.0
    blade_capacity: float = 0.1
    v_max: float = 1.0
    v_min_frac: float = 0.1
    omega: float = 1.0
    deposit_cells: float = 10.0
    # Oracle policy.
    fill_fraction: float = 0.9
    detect_threshold: float = 0.02

    def v_min(self) -> float:
        return self.v_min_frac * self.v_max

    def deposit_rate(self) -> float:
        """Blade discharge in m^3 per cell of travel."""
        return self.blade_capacity / self.deposit_cells


_INT_KEYS = {"fov_rows", "fov_cols", "anchor_row", "anchor_col", "downsample",
             "timeout_steps"}


def dump_config(cfg: Config) -> str:
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat `key = value` lines; later keys override earlier ones."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    raw = parse_kv_text(text)
    known = {f.name for f in fields(Config)}
    updates = {}
    for key, val in raw.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = int(val) if key in _INT_KEYS else float(val)
    return replace(base, **updates)


def load_config_file(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read())
