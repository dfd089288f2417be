"""Run configuration, training and evaluation drivers, and the variant comparison."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import detokenize
from .dataset import DatasetError, MixtureSampler, build_transitions, load_dataset
from .decoder import Context, ModelConfig, PolicyDecoder, load_checkpoint, param_counts, save_checkpoint
from .env import SKILL_OBJECTS, SKILLS, GAITS, SPEEDS, GridEnv, TaskSpec
from .qlearning import bc_train_step, init_train_state, train_step

VARIANTS = ("germ", "germ_no_moe", "germ_no_rl")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "germ"
    gamma: float = 0.98
    alpha: float = 1.0
    lr: float = 3e-4
    batch_size: int = 64
    steps: int = 1000
    target_period: int = 200
    seed: int = 0
    dataset: str = ""
    demo_fraction: float | None = None  # None -> the dataset's stored mixture
    episodes: int = 50
    eval_seed: int = 12345
    horizon: int = 60
    out: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.batch_size < 1 or self.steps < 0 or self.episodes < 0:
            raise ConfigError("batch_size must be positive; steps and episodes non-negative")
        if self.demo_fraction is not None and not 0.0 <= self.demo_fraction <= 1.0:
            raise ConfigError("demo_fraction must lie in [0, 1]")

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, use_moe=self.variant != "germ_no_moe")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return None if raw.lower() in ("", "none") else float(raw)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Flat ``key = value`` lines; model fields may be written bare or as ``model.<name>``."""
    base = base or RunConfig()
    run_fields = {f.name for f in dataclasses.fields(RunConfig)} - {"model"}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    run_kw, model_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.removeprefix("model.")
        try:
            if key in run_fields:
                run_kw[key] = _coerce(raw, getattr(base, key))
            elif key in model_fields:
                model_kw[key] = _coerce(raw, getattr(base.model, key))
            else:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config line {lineno}: bad value for {key}: {raw!r}") from None
    try:
        model = dataclasses.replace(base.model, **model_kw)
    except ValueError as exc:
        raise ConfigError(f"model config: {exc}") from None
    return dataclasses.replace(base, model=model, **run_kw)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: PolicyDecoder
    metrics: list[dict]
    checkpoint: Path | None


def _check_dataset(ds, cfg: ModelConfig):
    if ds.header.get("V") != cfg.vocab_size or ds.header.get("d_A") != cfg.action_dim:
        raise DatasetError(f"dataset V/d_A {ds.header.get('V')}/{ds.header.get('d_A')} do not match "
                           f"model {cfg.vocab_size}/{cfg.action_dim}")


def train(rc: RunConfig, ds=None, out_dir=None, log=None) -> TrainResult:
    """Train one variant; writes ``checkpoint.bin`` and ``metrics.jsonl`` when ``out_dir`` is given."""
    ds = ds if ds is not None else load_dataset(rc.dataset)
    cfg = rc.model_config()
    _check_dataset(ds, cfg)
    bc = rc.variant == "germ_no_rl"
    table = build_transitions(ds, cfg.window, cfg.vocab_size, only_success=bc)
    frac = 1.0 if bc else (ds.demo_fraction if rc.demo_fraction is None else rc.demo_fraction)
    sampler = MixtureSampler(table, frac, np.random.default_rng([rc.seed, 2]))
    model = PolicyDecoder(cfg, np.random.default_rng([rc.seed, 0]))
    state = init_train_state(model, lr=rc.lr, seed=rc.seed, gamma=rc.gamma, alpha=rc.alpha,
                             target_period=rc.target_period)
    step_fn = bc_train_step if bc else train_step
    metrics = []
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    try:
        for _ in range(rc.steps):
            m = step_fn(sampler.sample(rc.batch_size), state)
            m["gamma"], m["alpha"] = rc.gamma, rc.alpha
            metrics.append(m)
            if sink:
                sink.write(json.dumps(m) + "\n")
            if log and (state.step % max(1, rc.steps // 10) == 0):
                log(f"[{rc.variant}] step {state.step}/{rc.steps} J={m['J']:.5f}")
    finally:
        if sink:
            sink.close()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.bin"
        save_checkpoint(ckpt, model, checkpoint_meta(rc, ds))
    return TrainResult(model, metrics, ckpt)


def checkpoint_meta(rc: RunConfig, ds) -> dict:
    return {"variant": rc.variant, "seed": rc.seed, "steps": rc.steps, "gamma": rc.gamma,
            "alpha": rc.alpha, "lr": rc.lr, "batch_size": rc.batch_size,
            "target_period": rc.target_period, "bounds": ds.bounds.tolist(),
            "V": ds.header["V"], "d_A": ds.header["d_A"]}


# ---------------------------------------------------------------- evaluation


def eval_specs(skill: str, n: int, seed: int) -> list[TaskSpec]:
    rng = np.random.default_rng([seed, SKILLS.index(skill)])
    objs = SKILL_OBJECTS[skill]
    return [TaskSpec(skill, objs[rng.integers(len(objs))], GAITS[rng.integers(len(GAITS))],
                     SPEEDS[rng.integers(len(SPEEDS))], int(rng.integers(2**31))) for _ in range(n)]


def model_policy(model: PolicyDecoder, bounds=None):
    """Batched greedy policy: (contexts) -> commands (B, d_A)."""
    def act(ctx: Context, envs) -> np.ndarray:
        model.train_mode = False
        bins, _ = model.decode(ctx)
        return detokenize(bins, bounds if bounds is not None else envs[0].bounds, model.cfg.vocab_size).command
    return act


def env_policy(fn):
    """Adapt a per-environment controller such as ``scripted_expert``."""
    def act(ctx, envs) -> np.ndarray:
        return np.array([fn(e) for e in envs])
    return act


def rollout(policy, specs: list[TaskSpec], window: int = 6, horizon: int = 60) -> np.ndarray:
    """Run all episodes in lockstep; returns the success flags."""
    envs = [GridEnv(horizon=horizon) for _ in specs]
    hist = [[e.reset(s).as_list()] for e, s in zip(envs, specs)]
    instr = np.array([s.instruction() for s in specs], dtype=np.int64)
    success = np.zeros(len(specs), dtype=bool)
    live = list(range(len(specs)))
    while live:
        obs = np.array([[hist[i][max(len(hist[i]) - window + j, 0)] for j in range(window)] for i in live],
                       dtype=np.int64)
        cmds = policy(Context(obs, instr[live]), [envs[i] for i in live])
        still = []
        for i, cmd in zip(live, cmds):
            o, done, ok = envs[i].step(cmd)
            if done:
                success[i] = ok
            else:
                hist[i].append(o.as_list())
                still.append(i)
        live = still
    return success


@dataclass
class EvalReport:
    variant: str
    success: dict[str, float]
    stderr: dict[str, float]
    episodes: int
    total_params: int
    active_params: int
    seed: int
    config: dict
    wall_clock: float = 0.0

    @property
    def mean_success(self) -> float:
        return float(np.mean(list(self.success.values()))) if self.success else 0.0

    def to_record(self) -> dict:
        """Deterministic structured record (wall-clock is reported separately)."""
        return {"variant": self.variant, "success": self.success, "stderr": self.stderr,
                "mean_success": self.mean_success, "episodes_per_skill": self.episodes,
                "total_params": self.total_params, "active_params": self.active_params,
                "seed": self.seed, "config": self.config}


def evaluate(policy, variant: str, cfg: ModelConfig | None, episodes: int = 50, seed: int = 12345,
             skills=SKILLS, horizon: int = 60, config: dict | None = None) -> EvalReport:
    t0 = time.perf_counter()
    window = cfg.window if cfg else 6
    rates, errs = {}, {}
    for skill in skills:
        ok = rollout(policy, eval_specs(skill, episodes, seed), window, horizon) if episodes else np.zeros(0)
        p = float(ok.mean()) if episodes else 0.0
        rates[skill] = 100.0 * p
        errs[skill] = 100.0 * float(np.sqrt(p * (1 - p) / episodes)) if episodes else 0.0
    total, active = param_counts(cfg) if cfg else (0, 0)
    return EvalReport(variant, rates, errs, episodes, total, active, seed, config or {},
                      time.perf_counter() - t0)


def evaluate_checkpoint(path, episodes: int = 50, seed: int = 12345, bounds=None, horizon: int = 60) -> EvalReport:
    try:
        model, meta = load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None
    env_bounds = GridEnv().bounds if bounds is None else np.asarray(bounds)
    if "bounds" in meta and not np.array_equal(np.asarray(meta["bounds"]), env_bounds):
        raise ConfigError("checkpoint bounds do not match the environment")
    if meta.get("V", model.cfg.vocab_size) != model.cfg.vocab_size or model.cfg.action_dim != len(env_bounds):
        raise ConfigError("checkpoint V/d_A do not match the environment")
    return evaluate(model_policy(model, env_bounds), meta.get("variant", "germ"), model.cfg, episodes, seed,
                    horizon=horizon, config={"checkpoint_meta": meta, "model": model.cfg.to_dict()})


# ---------------------------------------------------------------- reporting


def format_table(reports: list[EvalReport], mixed: dict[str, bool] | None = None) -> str:
    skills = list(reports[0].success) if reports else list(SKILLS)
    head = ["variant", *skills, "mean", "Total Params", "Active Params", "mixed data"]
    rows = [head]
    for r in reports:
        mix = "-" if mixed is None else ("yes" if mixed.get(r.variant) else "no")
        rows.append([r.variant, *(f"{r.success[s]:.1f}" for s in skills), f"{r.mean_success:.1f}",
                     str(r.total_params), str(r.active_params), mix])
    widths = [max(len(row[c]) for row in rows) for c in range(len(head))]
    lines = ["  ".join(cell.rjust(w) if c else cell.ljust(w) for c, (cell, w) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def compare(base: RunConfig, ds=None, out_dir=None, variants=VARIANTS, log=None) -> list[EvalReport]:
    """Train every variant on the same data and evaluate on the same episode seeds."""
    ds = ds if ds is not None else load_dataset(base.dataset)
    reports = []
    for v in variants:
        rc = base.replace(variant=v)
        sub = Path(out_dir) / v if out_dir is not None else None
        res = train(rc, ds, sub, log)
        rep = evaluate(model_policy(res.model, ds.bounds), v, rc.model_config(), rc.episodes, rc.eval_seed,
                       horizon=rc.horizon, config=rc.to_dict())
        if log:
            log(f"[{v}] mean success {rep.mean_success:.1f}% in {rep.wall_clock:.1f}s eval")
        reports.append(rep)
    return reports


def mixed_flags(variants=VARIANTS) -> dict[str, bool]:
    return {v: v != "germ_no_rl" for v in variants}

