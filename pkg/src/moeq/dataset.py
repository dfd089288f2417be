"""Offline trajectory collection, the line-delimited dataset file, and the training sampler."""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import ACTION_DIM, discretize_action
from .decoder import Context
from .env import SKILL_OBJECTS, SKILLS, GAITS, SPEEDS, GridEnv, TaskSpec, scripted_expert, scripted_suboptimal
from .qlearning import TransitionBatch

FORMAT_NAME = "moeq-dataset"
FORMAT_VERSION = 1
DEFAULT_DEMO_FRACTION = 0.7569
DEFAULT_EPSILON = 0.6


class DatasetError(ValueError):
    pass


@dataclass
class EpisodeRecord:
    spec: TaskSpec
    success: bool
    obs: np.ndarray          # (T, obs_width) ints, observation before each command
    cmds: np.ndarray         # (T, 12) floats
    source: str = "demo"

    @property
    def reward(self) -> float:
        return 1.0 if self.success else 0.0

    def __len__(self):
        return len(self.cmds)


@dataclass
class Dataset:
    header: dict
    episodes: list[EpisodeRecord] = field(default_factory=list)

    @property
    def demo_fraction(self) -> float:
        return float(self.header.get("demo_fraction", DEFAULT_DEMO_FRACTION))

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.header["bounds"], dtype=np.float64)


# ---------------------------------------------------------------- collection


def run_episode(env: GridEnv, spec: TaskSpec, policy) -> EpisodeRecord:
    """Roll ``policy(env) -> cmd`` from ``reset(spec)`` until done."""
    obs = [env.reset(spec).as_list()]
    cmds = []
    while True:
        cmd = np.asarray(policy(env), dtype=np.float64)
        cmds.append(cmd)
        o, done, success = env.step(cmd)
        if done:
            break
        obs.append(o.as_list())
    return EpisodeRecord(spec, bool(success), np.array(obs, dtype=np.int64), np.array(cmds))


def _spec_stream(rng: np.random.Generator, specs):
    i = 0
    while True:
        if specs:
            base = specs[i % len(specs)]
            yield TaskSpec(base.skill, base.target, base.gait, base.speed, int(rng.integers(2**31)))
        else:
            skill = SKILLS[i % len(SKILLS)]
            objs = SKILL_OBJECTS[skill]
            yield TaskSpec(skill, objs[rng.integers(len(objs))], GAITS[rng.integers(len(GAITS))],
                           SPEEDS[rng.integers(len(SPEEDS))], int(rng.integers(2**31)))
        i += 1


def collect_dataset(n_episodes: int, demo_fraction: float = DEFAULT_DEMO_FRACTION, specs=None,
                    out_path=None, *, epsilon: float = DEFAULT_EPSILON, seed: int = 0,
                    width: int = 7, height: int = 7, horizon: int = 60) -> tuple[Dataset, dict]:
    """Collect demo-sourced and sub-optimal episodes, optionally writing them to ``out_path``.

    Demo episodes come from the scripted expert and only successes are kept;
    sub-optimal episodes are kept regardless of outcome.
    """
    if not 0.0 <= demo_fraction <= 1.0:
        raise ValueError("demo_fraction must lie in [0, 1]")
    if n_episodes < 0:
        raise ValueError("n_episodes must be non-negative")
    if out_path is not None:
        parent = Path(out_path).resolve().parent
        if not parent.is_dir():
            raise DatasetError(f"output directory does not exist: {parent}")
    n_demo = int(np.floor(n_episodes * demo_fraction + 0.5))
    rng = np.random.default_rng(seed)
    env = GridEnv(width, height, horizon)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": {"n_episodes": n_episodes, "seed": seed, "epsilon": epsilon,
                   "width": width, "height": height, "horizon": horizon},
        "bounds": env.bounds.tolist(),
        "V": 256,
        "d_A": ACTION_DIM,
        "demo_fraction": demo_fraction,
    }
    ds = Dataset(header)
    demo_specs, sub_specs = _spec_stream(rng, specs), _spec_stream(rng, specs)
    discarded = 0
    while sum(e.source == "demo" for e in ds.episodes) < n_demo:
        ep = run_episode(env, next(demo_specs), scripted_expert)
        if ep.success:
            ds.episodes.append(ep)
        else:
            discarded += 1
            if discarded > 10 * max(n_demo, 1):
                raise DatasetError("scripted expert keeps failing; cannot fill the demo quota")
    for _ in range(n_episodes - n_demo):
        ep = run_episode(env, next(sub_specs), lambda e: scripted_suboptimal(e, epsilon, rng))
        ep.source = "suboptimal"
        ds.episodes.append(ep)
    if out_path is not None:
        save_dataset(ds, out_path)
    return ds, summarize(ds, discarded)


def summarize(ds: Dataset, discarded: int = 0) -> dict:
    n = len(ds.episodes)
    src = Counter(e.source for e in ds.episodes)
    fam = {s: {"demo": 0, "suboptimal": 0, "success": 0} for s in SKILLS}
    for e in ds.episodes:
        fam[e.spec.skill][e.source] += 1
        fam[e.spec.skill]["success"] += int(e.success)
    return {
        "episodes": n,
        "demo_sourced": src["demo"],
        "suboptimal_sourced": src["suboptimal"],
        "demo_pct": 100.0 * src["demo"] / n if n else 0.0,
        "suboptimal_pct": 100.0 * src["suboptimal"] / n if n else 0.0,
        "successes": sum(e.success for e in ds.episodes),
        "transitions": sum(len(e) for e in ds.episodes),
        "discarded_demo_failures": discarded,
        "families": fam,
    }


# ---------------------------------------------------------------- file format


def _floats(values) -> str:
    out = []
    for v in values:
        v = float(v)
        if not np.isfinite(v):
            raise DatasetError("non-finite value in command")
        out.append(format(v, ".17g"))
    return "[" + ",".join(out) + "]"


def _episode_line(e: EpisodeRecord) -> str:
    task = {k: v for k, v in e.spec.as_dict().items() if k != "seed"}
    steps = []
    for o, c in zip(e.obs, e.cmds):
        steps.append('{"pos":%d,"heading":%d,"target":%d,"patch":%s,"cmd":%s}'
                     % (o[0], o[1], o[2], json.dumps([int(x) for x in o[3:]]), _floats(c)))
    return ('{"task":%s,"seed":%d,"success":%s,"reward":%s,"steps":[%s],"source":%s}'
            % (json.dumps(task), e.spec.seed, json.dumps(e.success), format(e.reward, ".17g"),
               ",".join(steps), json.dumps(e.source)))


def save_dataset(ds: Dataset, path):
    path = Path(path)
    if not path.resolve().parent.is_dir():
        raise DatasetError(f"output directory does not exist: {path.resolve().parent}")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(ds.header) + "\n")
        for e in ds.episodes:
            f.write(_episode_line(e) + "\n")
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset not found: {path}")
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetError(f"empty dataset file: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"bad dataset header in {path}: {exc}") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {header.get('format')!r} "
                           f"version {header.get('version')!r} (want {FORMAT_NAME} v{FORMAT_VERSION})")
    ds = Dataset(header)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            spec = TaskSpec.from_dict({**r["task"], "seed": r["seed"]})
            obs = np.array([[s["pos"], s["heading"], s["target"], *s["patch"]] for s in r["steps"]],
                           dtype=np.int64)
            cmds = np.array([s["cmd"] for s in r["steps"]], dtype=np.float64)
            ep = EpisodeRecord(spec, bool(r["success"]), obs, cmds, r.get("source", "demo"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed episode record ({exc})") from None
        if float(r["reward"]) != ep.reward:
            raise DatasetError(f"{path}:{lineno}: reward does not match success flag")
        ds.episodes.append(ep)
    return ds


# ---------------------------------------------------------------- transitions


@dataclass
class TransitionTable:
    """Flat per-step arrays; windows are index rows into ``frames``."""

    frames: np.ndarray       # (F, obs_width)
    window: np.ndarray       # (N, W) frame indices ending at step t
    next_window: np.ndarray  # (N, W) shifted by one step (copy of window when terminal)
    instr: np.ndarray        # (N, 4)
    bins: np.ndarray         # (N, d_A)
    reward: np.ndarray       # (N,)
    terminal: np.ndarray     # (N,) bool
    success: np.ndarray      # (N,) bool, trajectory label
    episode: np.ndarray      # (N,) episode index

    def __len__(self):
        return len(self.bins)

    def batch(self, idx) -> TransitionBatch:
        idx = np.asarray(idx, dtype=np.int64)
        ctx = Context(self.frames[self.window[idx]], self.instr[idx])
        nxt = Context(self.frames[self.next_window[idx]], self.instr[idx])
        return TransitionBatch(ctx, nxt, self.bins[idx], self.reward[idx], self.terminal[idx],
                               self.success[idx])


def build_transitions(ds: Dataset, window: int = 6, V: int = 256, only_success: bool = False) -> TransitionTable:
    """Slice episodes into windows, padding the first steps with the episode's first frame."""
    bounds = ds.bounds
    frames, win, nxt, instr, bins, rew, term, succ, epi = [], [], [], [], [], [], [], [], []
    base = 0
    for k, e in enumerate(ds.episodes):
        if only_success and not e.success:
            continue
        T = len(e)
        frames.append(e.obs)
        offs = np.arange(-window + 1, 1)
        for t in range(T):
            win.append(base + np.maximum(t + offs, 0))
            nxt.append(base + np.maximum(t + 1 + offs, 0) if t + 1 < T else win[-1])
        instr.append(np.tile(e.spec.instruction(), (T, 1)))
        bins.append(discretize_action(e.cmds, bounds, V).bins)
        r = np.zeros(T)
        r[-1] = e.reward
        rew.append(r)
        term.append(np.arange(T) == T - 1)
        succ.append(np.full(T, e.success))
        epi.append(np.full(T, k))
        base += T
    if not win:
        raise DatasetError("no demonstrations" if only_success else "dataset has no transitions")
    return TransitionTable(np.concatenate(frames), np.array(win), np.array(nxt), np.concatenate(instr),
                           np.concatenate(bins), np.concatenate(rew), np.concatenate(term),
                           np.concatenate(succ), np.concatenate(epi))


class MixtureSampler:
    """Uniform transitions from the success pool with probability ``demo_fraction``, else from the failure pool."""

    def __init__(self, table: TransitionTable, demo_fraction: float, rng: np.random.Generator):
        if not 0.0 <= demo_fraction <= 1.0:
            raise ValueError("demo_fraction must lie in [0, 1]")
        self.table, self.rng = table, rng
        self.demo = np.flatnonzero(table.success)
        self.other = np.flatnonzero(~table.success)
        if not self.demo.size:
            demo_fraction = 0.0
        elif not self.other.size:
            demo_fraction = 1.0
        self.demo_fraction = demo_fraction

    def indices(self, n: int) -> np.ndarray:
        pick_demo = self.rng.random(n) < self.demo_fraction
        idx = np.empty(n, dtype=np.int64)
        nd = int(pick_demo.sum())
        if nd:
            idx[pick_demo] = self.demo[self.rng.integers(len(self.demo), size=nd)]
        if n - nd:
            idx[~pick_demo] = self.other[self.rng.integers(len(self.other), size=n - nd)]
        return idx

    def sample(self, n: int) -> TransitionBatch:
        return self.table.batch(self.indices(n))

