"""Episode recording, bit-exact replay and metric extraction.

On-disk layout (one directory per episode):

    episode_<seed>/
      manifest.txt   key = value lines + `file <path> <crc32> <bytes>` entries
      steps.txt      one step per line, fixed field order
      obs/<t>.hmap   the observation the policy saw before step t (HMAP1)

Observations are stored as float32 HMAP1 payloads; replay re-runs the
recorded actions through a fresh environment and compares the re-serialized
bytes, rewards and flags, reporting the first divergence.  Floats in text
files use repr() so parsing returns the identical double.
"""

from __future__ import annotations

import base64
import os
import zlib
from dataclasses import dataclass

from .config import Config, config_hash
from .env import GradingEnv, StepResult, WaypointAction
from .heightmap import (DiffMap, excess_volume, hmap_bytes, max_excess_height,
                        mean_excess_height)
from .scenario import ScenarioSpec, parse_scenario, scenario_text

FORMAT_NAME = "dozersim-episode-v1"


class RecordError(RuntimeError):
    pass


class ConfigMismatch(RecordError):
    pass


class ChecksumError(RecordError):
    pass


class NonTerminalRecord(RecordError):
    pass


@dataclass(frozen=True)
class StepLine:
    t: int
    action: WaypointAction
    f_v: float
    f_t: float
    f_h: float
    done_bonus: float
    fail_penalty: float
    reward: float
    done: bool
    failed: bool
    duration: float
    moved_volume: float
    dumped_excess: float
    pose: tuple[float, float, float]

    def to_text(self) -> str:
        p, s = self.action.p, self.action.s
        x, y, heading = self.pose
        fields = [self.t, p[0], p[1], s[0], s[1],
                  repr(self.f_v), repr(self.f_t), repr(self.f_h),
                  repr(self.done_bonus), repr(self.fail_penalty),
                  repr(self.reward), int(self.done), int(self.failed),
                  repr(self.duration), repr(self.moved_volume),
                  repr(self.dumped_excess), repr(x), repr(y), repr(heading)]
        return " ".join(str(f) for f in fields)

    @classmethod
    def from_text(cls, line: str) -> "StepLine":
        f = line.split()
        if len(f) != 19:
            raise RecordError(f"step line has {len(f)} fields, expected 19")
        return cls(t=int(f[0]),
                   action=WaypointAction((int(f[1]), int(f[2])),
                                         (int(f[3]), int(f[4]))),
                   f_v=float(f[5]), f_t=float(f[6]), f_h=float(f[7]),
                   done_bonus=float(f[8]), fail_penalty=float(f[9]),
                   reward=float(f[10]), done=bool(int(f[11])),
                   failed=bool(int(f[12])), duration=float(f[13]),
                   moved_volume=float(f[14]), dumped_excess=float(f[15]),
                   pose=(float(f[16]), float(f[17]), float(f[18])))


@dataclass(frozen=True)
class EpisodeRecord:
    policy: str
    scenario: ScenarioSpec
    seed: int
    cfg_hash: str
    steps: tuple[StepLine, ...]
    observations: tuple[DiffMap, ...]   # len(steps) + 1
    done: bool
    failed: bool
    initial_excess: float
    volume_left: float
    max_height_left: float
    mean_height_left: float
    total_duration: float
    total_reward: float
    dumped_volume: float
    dumped_excess: float

    def is_terminal(self) -> bool:
        return self.done or self.failed


def record_episode(spec: ScenarioSpec, seed: int, policy, cfg: Config,
                   out_dir=None) -> EpisodeRecord:
    """Roll `policy` out on a fresh environment and capture the trajectory."""
    env, obs = GradingEnv.reset(spec, seed, cfg)
    policy.begin(env)
    observations = [obs]
    steps: list[StepLine] = []
    total_reward = 0.0
    while not env.done and not env.failed:
        action = policy.act(obs, env)
        if action is None:
            env.abandon()
            break
        res: StepResult = env.step(action)
        f_v, f_t, f_h, done_bonus, fail_penalty = res.reward_components
        steps.append(StepLine(
            t=len(steps), action=action, f_v=f_v, f_t=f_t, f_h=f_h,
            done_bonus=done_bonus, fail_penalty=fail_penalty,
            reward=res.reward, done=res.done, failed=res.failed,
            duration=res.info["duration"],
            moved_volume=res.info["moved_volume"],
            dumped_excess=res.info["dumped_excess"],
            pose=res.info["pose"]))
        total_reward += res.reward
        obs = res.observation
        observations.append(obs)

    d_final = env.delta()
    # Initial excess re-derived from a fresh generation so the record is
    # self-contained even for 0-step episodes.
    env0, _ = GradingEnv.reset(spec, seed, cfg)
    d0_excess = excess_volume(env0.delta())

    record = EpisodeRecord(
        policy=getattr(policy, "name", "unknown"),
        scenario=spec, seed=seed, cfg_hash=config_hash(cfg),
        steps=tuple(steps), observations=tuple(observations),
        done=env.done, failed=env.failed,
        initial_excess=d0_excess,
        volume_left=excess_volume(d_final),
        max_height_left=max_excess_height(d_final),
        mean_height_left=mean_excess_height(d_final),
        total_duration=env.total_duration,
        total_reward=total_reward,
        dumped_volume=env.total_dumped_volume,
        dumped_excess=env.total_dumped_excess)
    if out_dir is not None:
        write_episode(record, out_dir)
    return record


# ---------------------------------------------------------------------------
# Disk I/O
# ---------------------------------------------------------------------------

def _obs_bytes(obs: DiffMap) -> bytes:
    return hmap_bytes(obs.rows, obs.cols, obs.cell_size, obs.values)


def write_episode(record: EpisodeRecord, out_dir) -> None:
    out_dir = os.fspath(out_dir)
    obs_dir = os.path.join(out_dir, "obs")
    os.makedirs(obs_dir, exist_ok=True)
    entries = []
    for t, obs in enumerate(record.observations):
        data = _obs_bytes(obs)
        rel = f"obs/{t}.hmap"
        with open(os.path.join(out_dir, rel), "wb") as fh:
            fh.write(data)
        entries.append((rel, zlib.crc32(data), len(data)))
    steps_text = "".join(s.to_text() + "\n" for s in record.steps)
    steps_data = steps_text.encode()
    with open(os.path.join(out_dir, "steps.txt"), "wb") as fh:
        fh.write(steps_data)
    entries.append(("steps.txt", zlib.crc32(steps_data), len(steps_data)))

    lines = [
        f"format = {FORMAT_NAME}",
        f"policy = {record.policy}",
        f"seed = {record.seed}",
        f"config_hash = {record.cfg_hash}",
        f"scenario_b64 = {base64.b64encode(scenario_text(record.scenario).encode()).decode()}",
        f"steps = {len(record.steps)}",
        f"done = {int(record.done)}",
        f"failed = {int(record.failed)}",
        f"initial_excess = {record.initial_excess!r}",
        f"volume_left = {record.volume_left!r}",
        f"max_height_left = {record.max_height_left!r}",
        f"mean_height_left = {record.mean_height_left!r}",
        f"total_duration = {record.total_duration!r}",
        f"total_reward = {record.total_reward!r}",
        f"dumped_volume = {record.dumped_volume!r}",
        f"dumped_excess = {record.dumped_excess!r}",
    ]
    lines += [f"file {rel} {crc} {size}" for rel, crc, size in entries]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_manifest(path) -> tuple[dict[str, str], list[tuple[str, int, int]]]:
    kv: dict[str, str] = {}
    files: list[tuple[str, int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("file "):
                _, rel, crc, size = line.split()
                files.append((rel, int(crc), int(size)))
            else:
                key, val = line.split("=", 1)
                kv[key.strip()] = val.strip()
    return kv, files


def read_episode(episode_dir, verify: bool = True) -> EpisodeRecord:
    episode_dir = os.fspath(episode_dir)
    kv, files = _parse_manifest(os.path.join(episode_dir, "manifest.txt"))
    if kv.get("format") != FORMAT_NAME:
        raise RecordError(f"unknown record format {kv.get('format')!r}")
    if verify:
        for rel, crc, size in files:
            with open(os.path.join(episode_dir, rel), "rb") as fh:
                data = fh.read()
            if len(data) != size or zlib.crc32(data) != crc:
                raise ChecksumError(f"{rel} failed checksum verification")
    with open(os.path.join(episode_dir, "steps.txt"), encoding="utf-8") as fh:
        steps = tuple(StepLine.from_text(line) for line in fh if line.strip())
    if len(steps) != int(kv["steps"]):
        raise RecordError("step count does not match manifest")
    from .heightmap import read_hmap_diff
    observations = tuple(
        read_hmap_diff(os.path.join(episode_dir, f"obs/{t}.hmap"))
        for t in range(len(steps) + 1))
    scenario = parse_scenario(
        base64.b64decode(kv["scenario_b64"]).decode())
    return EpisodeRecord(
        policy=kv["policy"], scenario=scenario, seed=int(kv["seed"]),
        cfg_hash=kv["config_hash"], steps=steps, observations=observations,
        done=bool(int(kv["done"])), failed=bool(int(kv["failed"])),
        initial_excess=float(kv["initial_excess"]),
        volume_left=float(kv["volume_left"]),
        max_height_left=float(kv["max_height_left"]),
        mean_height_left=float(kv["mean_height_left"]),
        total_duration=float(kv["total_duration"]),
        total_reward=float(kv["total_reward"]),
        dumped_volume=float(kv["dumped_volume"]),
        dumped_excess=float(kv["dumped_excess"]))


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplayReport:
    ok: bool
    steps_checked: int
    divergence_step: int | None = None
    reason: str = ""


def replay(episode_dir, cfg: Config) -> ReplayReport:
    """Re-execute a record's actions and compare everything bit-for-bit."""
    record = read_episode(episode_dir, verify=True)
    if record.cfg_hash != config_hash(cfg):
        raise ConfigMismatch(
            f"record built with config {record.cfg_hash}, current is {config_hash(cfg)}")
    env, obs = GradingEnv.reset(record.scenario, record.seed, cfg)
    if _obs_bytes(obs) != _obs_bytes(record.observations[0]):
        return ReplayReport(False, 0, 0, "initial observation differs")
    for step in record.steps:
        try:
            res = env.step(step.action)
        except Exception as exc:  # divergence can surface as an error
            return ReplayReport(False, step.t, step.t, f"step raised {exc!r}")
        got = (res.reward, res.reward_components, res.done, res.failed)
        want = (step.reward, (step.f_v, step.f_t, step.f_h,
                              step.done_bonus, step.fail_penalty),
                step.done, step.failed)
        if got != want:
            return ReplayReport(False, step.t, step.t,
                                f"reward/flags differ: got {got}, recorded {want}")
        if _obs_bytes(res.observation) != _obs_bytes(record.observations[step.t + 1]):
            return ReplayReport(False, step.t, step.t, "observation differs")
    return ReplayReport(True, len(record.steps))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    seed: int
    steps: int
    volume_left: float
    max_height_left: float
    mean_height_left: float
    total_duration: float
    total_reward: float
    done: bool
    failed: bool


def metrics(record: EpisodeRecord) -> MetricsRow:
    if not (record.done or record.failed):
        raise NonTerminalRecord("record has no terminal flag")
    reward_sum = sum(s.reward for s in record.steps)
    if abs(reward_sum - record.total_reward) > 1e-9 * max(1.0, abs(reward_sum)):
        raise RecordError("per-step rewards do not sum to the recorded total")
    duration_sum = sum(s.duration for s in record.steps)
    return MetricsRow(seed=record.seed, steps=len(record.steps),
                      volume_left=record.volume_left,
                      max_height_left=record.max_height_left,
                      mean_height_left=record.mean_height_left,
                      total_duration=duration_sum,
                      total_reward=record.total_reward,
                      done=record.done, failed=record.failed)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

DATASET_FORMAT = "dozersim-dataset-v1"


@dataclass(frozen=True)
class DatasetManifest:
    policy: str
    count: int
    seed0: int
    episodes: tuple[str, ...]   # relative paths


def build_dataset(spec: ScenarioSpec, policy_factory, n: int, seed0: int,
                  out_dir, cfg: Config) -> DatasetManifest:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rels = []
    name = "unknown"
    for i in range(n):
        seed = seed0 + i
        policy = policy_factory()
        name = getattr(policy, "name", name)
        rel = f"episode_{seed}"
        record_episode(spec, seed, policy, cfg,
                       out_dir=os.path.join(out_dir, rel))
        rels.append(rel)
    manifest = DatasetManifest(policy=name, count=n, seed0=seed0,
                               episodes=tuple(rels))
    lines = [f"format = {DATASET_FORMAT}",
             f"policy = {manifest.policy}",
             f"count = {manifest.count}",
             f"seed0 = {manifest.seed0}"]
    for rel in rels:
        with open(os.path.join(out_dir, rel, "manifest.txt"), "rb") as fh:
            crc = zlib.crc32(fh.read())
        lines.append(f"file {rel}/manifest.txt {crc} 0")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(out_dir, verify: bool = True) -> DatasetManifest:
    out_dir = os.fspath(out_dir)
    kv, files = _parse_manifest(os.path.join(out_dir, "manifest.txt"))
    if kv.get("format") != DATASET_FORMAT:
        raise RecordError(f"unknown dataset format {kv.get('format')!r}")
    episodes = []
    for rel, crc, _ in files:
        path = os.path.join(out_dir, rel)
        if not os.path.exists(path):
            raise RecordError(f"missing episode manifest {rel}")
        if verify:
            with open(path, "rb") as fh:
                if zlib.crc32(fh.read()) != crc:
                    raise ChecksumError(f"{rel} failed checksum verification")
        episodes.append(os.path.dirname(rel))
    manifest = DatasetManifest(policy=kv["policy"], count=int(kv["count"]),
                               seed0=int(kv["seed0"]), episodes=tuple(episodes))
    if manifest.count != len(manifest.episodes):
        raise RecordError("dataset count does not match episode list")
    return manifest
