"""Sparse mixture-of-experts feed-forward layer with noisy top-k gating."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class ExpertFFN:
    W_in: Tensor
    b_in: Tensor
    W_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, rng, d_model: int, d_ff: int) -> "ExpertFFN":
        return cls(uniform_init(rng, (d_model, d_ff), d_model), zeros_param((d_ff,)),
                   uniform_init(rng, (d_ff, d_model), d_ff), zeros_param((d_model,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.gelu(x @ self.W_in + self.b_in) @ self.W_out + self.b_out

    def params(self) -> dict[str, Tensor]:
        return {"W_in": self.W_in, "b_in": self.b_in, "W_out": self.W_out, "b_out": self.b_out}


@dataclass
class GateParams:
    W_g: Tensor
    W_noise: Tensor
    k: int
    train_mode: bool = False

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValueError(f"top_k must lie in [1, {self.n}], got {self.k}")

    @property
    def n(self) -> int:
        return self.W_g.shape[1]

    @classmethod
    def init(cls, rng, d_model: int, n: int, k: int) -> "GateParams":
        # zero noise weights start every logit at noise scale softplus(0) = ln 2
        return cls(uniform_init(rng, (d_model, n), d_model), zeros_param((d_model, n)), k)

    def params(self) -> dict[str, Tensor]:
        return {"W_g": self.W_g, "W_noise": self.W_noise}


@dataclass
class GateDecision:
    """Routing of N tokens: k expert ids and weights per token."""

    indices: np.ndarray        # (N, k) int
    weights: np.ndarray        # (N, k)
    noisy_logits: np.ndarray   # (N, n)
    probs: Tensor = field(repr=False)  # (N, n) masked softmax, differentiable

    @property
    def n(self) -> int:
        return self.noisy_logits.shape[1]

    def dense_weights(self) -> np.ndarray:
        return self.probs.data


def _as_tokens(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    return x


def noisy_logits(x, gate: GateParams, rng: np.random.Generator | None = None) -> Tensor:
    """Gate logits plus N(0,1) noise scaled by softplus of a learned projection.

    The noise term is present only when ``gate.train_mode`` is set.
    """
    x = _as_tokens(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("noisy_logits: non-finite token input")
    clean = x @ gate.W_g
    if not gate.train_mode:
        return clean
    if rng is None:
        raise ValueError("noisy_logits: train_mode requires an rng")
    nu = rng.standard_normal(clean.shape)
    return clean + ad.mul(Tensor(nu), ad.softplus(x @ gate.W_noise))


def topk_mask(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k largest entries per row (ties to the lower index) and the keep mask."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return order, keep


def gate_forward(x, gate: GateParams, rng: np.random.Generator | None = None) -> GateDecision:
    h = noisy_logits(x, gate, rng)
    indices, keep = topk_mask(h.data, gate.k)
    # selection is constant w.r.t. the gradient; only kept logits receive one
    probs = ad.softmax_lastdim(ad.mask_fill(h, ~keep, ad.MASK_VALUE))
    weights = np.take_along_axis(probs.data, indices, axis=-1)
    return GateDecision(indices, weights, h.data, probs)


def moe_forward(x, experts: list[ExpertFFN], decision: GateDecision) -> Tensor:
    """Weighted sum of the selected experts' outputs; unselected experts are not run."""
    x = _as_tokens(x)
    if len(experts) != decision.n:
        raise ValueError(f"moe_forward: {len(experts)} experts but gate routes over {decision.n}")
    n_tok, k = decision.indices.shape
    tok = np.repeat(np.arange(n_tok), k)
    exp = decision.indices.reshape(-1)
    perm = np.argsort(exp, kind="stable")
    tok_sorted = tok[perm]
    bounds = np.searchsorted(exp[perm], np.arange(len(experts) + 1))

    outputs = []
    for e, expert in enumerate(experts):
        lo, hi = bounds[e], bounds[e + 1]
        if hi > lo:
            outputs.append(expert(ad.embedding_gather(x, tok_sorted[lo:hi])))
    if not outputs:
        raise ValueError("moe_forward: decision routes no tokens")
    w_flat = ad.reshape(ad.gather_lastdim(decision.probs, decision.indices), (n_tok * k, 1))
    w_sorted = ad.embedding_gather(w_flat, perm)
    stacked = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=0)
    return ad.index_add(ad.mul(stacked, w_sorted), tok_sorted, n_tok)


def dense_mixture(x, experts: list[ExpertFFN], gate: GateParams) -> np.ndarray:
    """Reference: every expert evaluated, full softmax of the clean logits."""
    x = _as_tokens(x)
    with ad.no_tape():
        logits = (x @ gate.W_g).data
        w = np.exp(logits - logits.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        outs = np.stack([e(x).data for e in experts], axis=1)  # (N, n, d)
    return np.einsum("tn,tnd->td", w, outs)


def importance_penalty(decision: GateDecision) -> Tensor:
    """Squared coefficient of variation of per-expert weight mass."""
    imp = ad.sum(decision.probs, axis=0)
    n = decision.n
    m = ad.scalar_mul(ad.sum(imp), 1.0 / n)
    var = ad.mean(ad.square(imp - m))
    # rows of probs sum to 1, so the mean mass is the constant N / n
    return ad.mul(var, Tensor(1.0 / (m.data ** 2 + 1e-12)))


def expert_load_stats(decisions) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert routing fraction (routings / tokens) and total weight mass."""
    if isinstance(decisions, GateDecision):
        decisions = [decisions]
    decisions = list(decisions)
    if not decisions:
        raise ValueError("expert_load_stats: empty batch")
    n = decisions[0].n
    counts = np.zeros(n)
    mass = np.zeros(n)
    tokens = 0
    for d in decisions:
        idx = d.indices.reshape(-1)
        counts += np.bincount(idx, minlength=n)
        mass += np.bincount(idx, weights=d.weights.reshape(-1), minlength=n)
        tokens += d.indices.shape[0]
    return counts / tokens, mass


class MoELayer:
    """Gate plus n experts; routes each row of a (N, d_model) input."""

    def __init__(self, rng, d_model: int, d_ff: int, n: int = 8, k: int = 2):
        self.gate = GateParams.init(rng, d_model, n, k)
        self.experts = [ExpertFFN.init(rng, d_model, d_ff) for _ in range(n)]
        self.last_decision: GateDecision | None = None

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        decision = gate_forward(x, self.gate, rng)
        self.last_decision = decision
        return moe_forward(x, self.experts, decision)

    def params(self) -> dict[str, Tensor]:
        out = {f"gate.{k}": v for k, v in self.gate.params().items()}
        for i, e in enumerate(self.experts):
            out.update({f"expert{i}.{k}": v for k, v in e.params().items()})
        return out


class DenseFFN:
    """Single feed-forward block used where the mixture is ablated."""

    def __init__(self, rng, d_model: int, d_ff: int):
        self.ffn = ExpertFFN.init(rng, d_model, d_ff)
        self.last_decision = None

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.ffn(x)

    def params(self) -> dict[str, Tensor]:
        return {f"ffn.{k}": v for k, v in self.ffn.params().items()}


def expert_param_count(d_model: int, d_ff: int) -> int:
    return d_model * d_ff + d_ff + d_ff * d_model + d_model


def active_total(shared: int, per_expert: int, n: int, k: int) -> tuple[int, int]:
    """(total, active) given shared parameters and per-expert size summed over layers."""
    return shared + n * per_expert, shared + k * per_expert
