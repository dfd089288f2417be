"""Per-dimension autoregressive TD learning with a conservative penalty.

Any Q model works here as long as it provides ``q_values(ctx, action_bins, rng)``
returning a (B, d_A, V) tensor, ``first_dim_q(ctx)`` returning (B, V), plus
``params``, ``state_dict``, ``load_state_dict``, ``copy`` and a ``train_mode``
attribute. :class:`PolicyDecoder` and :class:`TabularQ` both qualify.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe import expert_load_stats


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TransitionBatch:
    context: Any
    next_context: Any          # rows aligned with context; ignored where terminal
    actions: np.ndarray        # (B, d_A) bins
    rewards: np.ndarray        # (B,)
    terminal: np.ndarray       # (B,) bool
    is_demo: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


# ---------------------------------------------------------------------- targets


def compute_q_targets(batch: TransitionBatch, target_model, gamma: float) -> np.ndarray:
    """Per-dimension regression targets (B, d_A), clipped to [0, 1].

    Dimension i < d_A bootstraps from the best bin of dimension i+1 given the
    logged prefix; the last dimension uses reward plus the discounted best
    first-dimension value of the next window (dropped when terminal).
    """
    if len(batch) == 0:
        raise ValueError("compute_q_targets: empty batch")
    target_model.train_mode = False
    with ad.no_tape():
        q = target_model.q_values(batch.context, batch.actions).data
        terminal = np.asarray(batch.terminal, dtype=bool)
        boot = np.zeros(len(batch))
        live = np.flatnonzero(~terminal)
        if live.size:
            nxt = take(batch.next_context, live)
            boot[live] = target_model.first_dim_q(nxt).data.max(axis=-1)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(boot))):
        raise TrainingAbort("compute_q_targets: target network produced non-finite Q values")
    y = np.empty(batch.actions.shape)
    y[:, :-1] = q[:, 1:, :].max(axis=-1)
    y[:, -1] = np.asarray(batch.rewards, dtype=np.float64) + gamma * boot
    return np.clip(y, 0.0, 1.0)


def take(ctx, idx):
    """Row subset of a context (array-like or object with ``take``)."""
    return ctx.take(idx) if hasattr(ctx, "take") else np.asarray(ctx)[idx]


# ---------------------------------------------------------------------- losses


def conservative_penalty(q_rows: Tensor, taken_bins) -> Tensor:
    """Half the mean squared Q over the non-taken bins of each row (shape of taken_bins)."""
    q_rows = q_rows if isinstance(q_rows, Tensor) else Tensor(q_rows)
    V = q_rows.shape[-1]
    taken = np.asarray(taken_bins, dtype=np.int64)
    if V == 1:
        return Tensor(np.zeros(taken.shape))
    if taken.size and (taken.min() < 0 or taken.max() >= V):
        raise ValueError(f"taken bin outside [0, {V})")
    mask = np.ones(q_rows.shape)
    np.put_along_axis(mask, taken[..., None], 0.0, axis=-1)
    return ad.scalar_mul(ad.sum(ad.mul(ad.square(q_rows), Tensor(mask)), axis=-1), 0.5 / (V - 1))


def td_loss_from_q(q: Tensor, actions, targets, alpha: float) -> tuple[Tensor, dict]:
    """J = mean ½(Q(taken) − y)² + α · mean conservative penalty, over samples and dimensions."""
    actions = np.asarray(actions, dtype=np.int64)
    taken = ad.reshape(ad.gather_lastdim(q, actions[..., None]), actions.shape)
    td = ad.scalar_mul(ad.mean(ad.square(taken - Tensor(targets))), 0.5)
    cql = ad.mean(conservative_penalty(q, actions))
    J = td + ad.scalar_mul(cql, alpha) if alpha else td
    if not np.isfinite(J.item()):
        bad = np.flatnonzero(~np.all(np.isfinite(q.data.reshape(len(actions), -1)), axis=1))
        where = f"batch index {int(bad[0])}" if bad.size else "loss reduction"
        raise TrainingAbort(f"td_loss: non-finite loss at {where}")
    V = q.shape[-1]
    q_sum = q.data.sum(axis=-1)
    metrics = {
        "J": J.item(),
        "td_term": td.item(),
        "cql_term": cql.item(),
        "mean_q_in": float(taken.data.mean()),
        "mean_q_out": float(((q_sum - taken.data) / max(V - 1, 1)).mean()),
    }
    return J, metrics


def td_loss(model, batch: TransitionBatch, targets, alpha: float, rng=None) -> tuple[Tensor, dict]:
    q = model.q_values(batch.context, batch.actions, rng)
    return td_loss_from_q(q, batch.actions, targets, alpha)


def cross_entropy_loss(q: Tensor, actions) -> Tensor:
    """Mean per-dimension cross-entropy treating Q rows as logits (behaviour cloning)."""
    actions = np.asarray(actions, dtype=np.int64)
    taken = ad.reshape(ad.gather_lastdim(q, actions[..., None]), actions.shape)
    return ad.mean(ad.logsumexp_lastdim(q) - taken)


# ---------------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    model: Any
    target: Any
    optimizer: Adam
    gamma: float = 0.98
    alpha: float = 1.0
    target_period: int = 200
    clip_norm: float = 1.0
    step: int = 0
    n_clipped: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.target_period < 1:
            raise ValueError("target_period must be at least 1")


def init_train_state(model, lr: float = 3e-4, seed: int = 0, **kw) -> TrainState:
    return TrainState(model=model, target=model.copy(), optimizer=Adam(model.params(), lr),
                      rng=np.random.default_rng(seed), **kw)


def _apply_gradients(state: TrainState, grads: list[np.ndarray]) -> dict:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if not np.isfinite(norm):
        bad = [p.name for p, g in zip(state.model.params(), grads) if not np.all(np.isfinite(g))]
        raise TrainingAbort(f"non-finite gradient at step {state.step} in {bad[:5]}")
    clipped = norm > state.clip_norm
    if clipped:
        scale = state.clip_norm / norm
        grads = [g * scale for g in grads]
        state.n_clipped += 1
    state.optimizer.step(grads)
    state.step += 1
    if state.step % state.target_period == 0:
        state.target.load_state_dict(state.model.state_dict())
    return {"grad_norm": norm, "clipped": bool(clipped), "n_clipped": state.n_clipped}


def _load_fractions(model) -> list[list[float]]:
    decisions = model.last_decisions() if hasattr(model, "last_decisions") else []
    return [expert_load_stats(d)[0].round(6).tolist() for d in decisions]


def train_step(batch: TransitionBatch, state: TrainState) -> dict:
    """One optimiser step on the conservative TD objective."""
    targets = compute_q_targets(batch, state.target, state.gamma)
    model = state.model
    params = model.params()
    model.train_mode = True
    try:
        with ad.Tape() as tape:
            J, metrics = td_loss(model, batch, targets, state.alpha, state.rng)
            reg = model.regularizer() if hasattr(model, "regularizer") else None
            total = J + reg if reg is not None else J
        g = ad.backprop(tape, total, params)
    finally:
        model.train_mode = False
    metrics.update(_apply_gradients(state, [g[p.id] for p in params]))
    metrics["step"] = state.step
    metrics["expert_fractions"] = _load_fractions(model)
    return metrics


def bc_train_step(batch: TransitionBatch, state: TrainState) -> dict:
    """One optimiser step of per-dimension cross-entropy on the logged bins."""
    model = state.model
    params = model.params()
    model.train_mode = True
    try:
        with ad.Tape() as tape:
            q = model.q_values(batch.context, batch.actions, state.rng)
            loss = cross_entropy_loss(q, batch.actions)
            reg = model.regularizer() if hasattr(model, "regularizer") else None
            total = loss + reg if reg is not None else loss
        if not np.isfinite(total.item()):
            raise TrainingAbort(f"non-finite cross-entropy at step {state.step}")
        g = ad.backprop(tape, total, params)
    finally:
        model.train_mode = False
    metrics = {"J": loss.item()}
    metrics.update(_apply_gradients(state, [g[p.id] for p in params]))
    metrics["step"] = state.step
    metrics["expert_fractions"] = _load_fractions(model)
    return metrics


# ---------------------------------------------------------------------- tabular model


class TabularQ:
    """Lookup-table Q over integer states; dimension i is indexed by (state, bins[:i])."""

    def __init__(self, n_states: int, action_dim: int, V: int, init: float = 0.0):
        self.n_states, self.action_dim, self.V = n_states, action_dim, V
        self.train_mode = False
        self.tables = [Tensor(np.full((n_states * V ** i, V), init), requires_grad=True, name=f"table{i}")
                       for i in range(action_dim)]

    def params(self) -> list[Tensor]:
        return self.tables

    def state_dict(self) -> dict[str, np.ndarray]:
        return {t.name: t.data.copy() for t in self.tables}

    def load_state_dict(self, state):
        for t in self.tables:
            t.data[...] = state[t.name]

    def copy(self) -> "TabularQ":
        other = TabularQ(self.n_states, self.action_dim, self.V)
        other.load_state_dict(self.state_dict())
        return other

    def _row_ids(self, states, bins, i):
        idx = np.asarray(states, dtype=np.int64).copy()
        for j in range(i):
            idx = idx * self.V + bins[:, j]
        return idx

    def q_values(self, states, action_bins, rng=None) -> Tensor:
        bins = np.asarray(action_bins, dtype=np.int64)
        B = len(bins)
        rows = [ad.reshape(ad.embedding_gather(self.tables[i], self._row_ids(states, bins, i)), (B, 1, self.V))
                for i in range(self.action_dim)]
        return ad.concat(rows, axis=1)

    def first_dim_q(self, states) -> Tensor:
        return ad.embedding_gather(self.tables[0], np.asarray(states, dtype=np.int64))

    def greedy(self, state: int) -> tuple[int, ...]:
        bins = np.zeros((1, self.action_dim), dtype=np.int64)
        for i in range(self.action_dim):
            row = self.tables[i].data[self._row_ids([state], bins, i)[0]]
            bins[0, i] = int(row.argmax())
        return tuple(int(b) for b in bins[0])
