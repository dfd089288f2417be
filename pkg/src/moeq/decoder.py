"""Causal transformer decoder with MoE feed-forward blocks producing per-dimension Q rows.

Sequence layout for one sample::

    [frame_1 .. frame_{T-1}, skill, object, gait, speed, act_1 .. act_m]

Row ``i`` of the output (0-based) is read at the position just before action
token ``i + 1``, so it only sees the context and bins ``0..i-1``.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .actions import ACTION_DIM, DiscretizedAction, default_bounds, detokenize
from .autodiff import Tensor
from .moe import DenseFFN, MoELayer, active_total, expert_param_count, uniform_init, zeros_param

N_INSTRUCTION_TOKENS = 4
OBS_FIELDS = 3  # pos, heading, target descriptor; then the patch cells


@dataclass
class ModelConfig:
    action_dim: int = 12
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    num_experts: int = 8
    top_k: int = 2
    vocab_size: int = 256
    time_length: int = 7
    context_len: int = 32
    d_ff: int = 128
    use_moe: bool = True
    dense_d_ff: int = 0  # 0 -> width matched to the MoE active count
    n_pos: int = 49
    n_heading: int = 4
    n_target: int = 169
    n_cell_types: int = 6
    patch_cells: int = 9
    n_skills: int = 5
    n_objects: int = 17
    n_gaits: int = 4
    n_speeds: int = 3

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.time_length < 2:
            raise ValueError("time_length must be at least 2")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError("top_k must lie in [1, num_experts]")
        if self.max_sequence > self.context_len:
            raise ValueError(f"context_len {self.context_len} < required {self.max_sequence}")

    @property
    def window(self) -> int:
        return self.time_length - 1

    @property
    def n_context(self) -> int:
        return self.window + N_INSTRUCTION_TOKENS

    @property
    def max_sequence(self) -> int:
        return self.n_context + self.action_dim - 1

    @property
    def obs_width(self) -> int:
        return OBS_FIELDS + self.patch_cells

    def ffn_width(self) -> int:
        if self.use_moe:
            return self.d_ff
        return self.dense_d_ff or matched_dense_width(self)

    def field_sizes(self) -> list[tuple[str, int]]:
        return ([("pos", self.n_pos), ("heading", self.n_heading), ("target", self.n_target)]
                + [(f"patch{j}", self.n_cell_types) for j in range(self.patch_cells)]
                + [("skill", self.n_skills), ("object", self.n_objects),
                   ("gait", self.n_gaits), ("speed", self.n_speeds)])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def matched_dense_width(cfg: ModelConfig) -> int:
    """Dense hidden width whose FFN + gate-free block matches k experts plus the gate."""
    d = cfg.d_model
    target = cfg.top_k * expert_param_count(d, cfg.d_ff) + 2 * d * cfg.num_experts
    return max(1, int(round((target - d) / (2 * d + 1))))


@dataclass
class Context:
    """Batch of observation windows (B, T-1, obs_width) and instructions (B, 4)."""

    obs: np.ndarray
    instr: np.ndarray

    def __len__(self):
        return self.obs.shape[0]

    def take(self, idx) -> "Context":
        return Context(self.obs[idx], self.instr[idx])


@dataclass
class PolicyOutput:
    q_logits: np.ndarray  # (d_A, V), or (B, d_A, V) for a batch


def _offsets(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, int]:
    sizes = np.array([s for _, s in cfg.field_sizes()])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return offsets, sizes, int(sizes.sum())


class PolicyDecoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.train_mode = False
        d = cfg.d_model
        self._field_offsets, self._field_sizes, n_tok = _offsets(cfg)
        self.p: dict[str, Tensor] = {}
        self.p["embed.tokens"] = Tensor(rng.normal(0, 0.1, (n_tok, d)), requires_grad=True)
        self.p["embed.actions"] = Tensor(rng.normal(0, 0.1, (cfg.action_dim * cfg.vocab_size, d)),
                                         requires_grad=True)
        self.p["embed.position"] = Tensor(rng.normal(0, 0.1, (cfg.context_len, d)), requires_grad=True)
        self.ffns = []
        for i in range(cfg.num_layers):
            pre = f"block{i}"
            for w in ("q", "k", "v", "o"):
                self.p[f"{pre}.attn.W{w}"] = uniform_init(rng, (d, d), d)
                self.p[f"{pre}.attn.b{w}"] = zeros_param((d,))
            for ln in ("ln1", "ln2"):
                self.p[f"{pre}.{ln}.gamma"] = Tensor(np.ones(d), requires_grad=True)
                self.p[f"{pre}.{ln}.beta"] = zeros_param((d,))
            if cfg.use_moe:
                ffn = MoELayer(rng, d, cfg.d_ff, cfg.num_experts, cfg.top_k)
            else:
                ffn = DenseFFN(rng, d, cfg.ffn_width())
            self.ffns.append(ffn)
            for name, t in ffn.params().items():
                self.p[f"{pre}.ffn.{name}"] = t
        self.p["head.W"] = uniform_init(rng, (d, cfg.vocab_size), d)
        self.p["head.b"] = zeros_param((cfg.vocab_size,))
        for name, t in self.p.items():
            t.name = name

    # ------------------------------------------------------------------ params

    def params(self) -> list[Tensor]:
        return list(self.p.values())

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.p)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.p.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.p):
            missing = set(self.p) ^ set(state)
            raise ValueError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.p[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.p[k].shape}")
            self.p[k].data[...] = v

    def copy(self) -> "PolicyDecoder":
        other = PolicyDecoder(self.cfg)
        other.load_state_dict(self.state_dict())
        return other

    def last_decisions(self):
        return [f.last_decision for f in self.ffns if f.last_decision is not None]

    # ------------------------------------------------------------------ forward

    def _check_ids(self, ids: np.ndarray):
        for j, (name, size) in enumerate(self.cfg.field_sizes()):
            col = ids[..., j]
            if col.size and (col.min() < 0 or col.max() >= size):
                raise IndexError(f"observation field {name!r} outside [0, {size})")

    def encode_context(self, ctx: Context) -> Tensor:
        """Embed the observation window and instruction into (B, C, d) tokens."""
        cfg = self.cfg
        obs = np.asarray(ctx.obs, dtype=np.int64)
        instr = np.asarray(ctx.instr, dtype=np.int64)
        if obs.ndim != 3 or obs.shape[1] != cfg.window or obs.shape[2] != cfg.obs_width:
            raise ValueError(f"observation window must be (B, {cfg.window}, {cfg.obs_width}), "
                             f"got {obs.shape}")
        if instr.shape != (obs.shape[0], N_INSTRUCTION_TOKENS):
            raise ValueError(f"instruction must be (B, {N_INSTRUCTION_TOKENS}), got {instr.shape}")
        n_obs = cfg.obs_width
        B = obs.shape[0]
        # columns: obs fields, then instruction fields broadcast over nothing
        self._check_ids(np.concatenate([obs, np.broadcast_to(instr[:, None, :], (B, cfg.window, 4))],
                                       axis=-1))
        table = self.p["embed.tokens"]
        frames = ad.sum(ad.embedding_gather(table, obs + self._field_offsets[:n_obs]), axis=2)
        words = ad.embedding_gather(table, instr + self._field_offsets[n_obs:])
        return ad.concat([frames, words], axis=1)

    def _attention(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        B, L, d = x.shape
        h, dh = cfg.num_heads, d // cfg.num_heads
        p = self.p
        pre = f"block{i}.attn"

        def heads(w):
            y = x @ p[f"{pre}.W{w}"] + p[f"{pre}.b{w}"]
            return ad.transpose(ad.reshape(y, (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scalar_mul(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
        att = ad.softmax_lastdim(ad.mask_fill(scores, mask))
        out = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, L, d))
        return out @ p[f"{pre}.Wo"] + p[f"{pre}.bo"]

    def forward(self, ctx: Context, prior_bins=None, rng=None) -> Tensor:
        """Q rows for dimensions ``0..m`` given the first ``m`` bins: shape (B, m+1, V)."""
        cfg = self.cfg
        x = self.encode_context(ctx)
        B = x.shape[0]
        m = 0 if prior_bins is None else np.asarray(prior_bins).shape[1]
        if m:
            bins = np.asarray(prior_bins, dtype=np.int64)
            if bins.min() < 0 or bins.max() >= cfg.vocab_size:
                raise IndexError(f"prior action bins outside [0, {cfg.vocab_size})")
            if m >= cfg.action_dim:
                raise ValueError(f"at most {cfg.action_dim - 1} prior bins, got {m}")
            ids = bins + np.arange(m) * cfg.vocab_size
            x = ad.concat([x, ad.embedding_gather(self.p["embed.actions"], ids)], axis=1)
        L = cfg.n_context + m
        if L > cfg.context_len:
            raise ValueError(f"sequence length {L} exceeds context_len {cfg.context_len}")
        x = x + ad.embedding_gather(self.p["embed.position"], np.arange(L))
        mask = np.triu(np.ones((L, L), dtype=bool), k=1)
        d = cfg.d_model
        noise_rng = rng if self.train_mode else None
        for i, ffn in enumerate(self.ffns):
            pre = f"block{i}"
            x = ad.layernorm(x + self._attention(x, i, mask), self.p[f"{pre}.ln1.gamma"],
                             self.p[f"{pre}.ln1.beta"])
            if isinstance(ffn, MoELayer):
                ffn.gate.train_mode = self.train_mode
            f = ad.reshape(ffn(ad.reshape(x, (B * L, d)), noise_rng), (B, L, d))
            x = ad.layernorm(x + f, self.p[f"{pre}.ln2.gamma"], self.p[f"{pre}.ln2.beta"])
        rows = (np.arange(B)[:, None] * L + cfg.n_context - 1 + np.arange(m + 1)).reshape(-1)
        h = ad.embedding_gather(ad.reshape(x, (B * L, d)), rows)
        logits = h @ self.p["head.W"] + self.p["head.b"]
        return ad.reshape(logits, (B, m + 1, cfg.vocab_size))

    def q_values(self, ctx: Context, action_bins, rng=None) -> Tensor:
        """Teacher-forced Q rows for every dimension: (B, d_A, V)."""
        bins = np.asarray(action_bins)[:, : self.cfg.action_dim - 1]
        return self.forward(ctx, bins, rng)

    def first_dim_q(self, ctx: Context) -> Tensor:
        return ad.reshape(self.forward(ctx), (len(ctx), self.cfg.vocab_size))

    def regularizer(self) -> Tensor | None:
        return None

    def decode(self, ctx: Context, forced: dict[int, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Greedy autoregressive decoding; ``forced`` pins chosen dimensions to given bins.

        Returns (bins (B, d_A), q rows (B, d_A, V)).
        """
        cfg = self.cfg
        B = len(ctx)
        bins = np.zeros((B, cfg.action_dim), dtype=np.int64)
        rows = np.zeros((B, cfg.action_dim, cfg.vocab_size))
        with ad.no_tape():
            for i in range(cfg.action_dim):
                out = self.forward(ctx, bins[:, :i] if i else None).data[:, -1]
                rows[:, i] = out
                bins[:, i] = out.argmax(axis=-1)
                if forced and i in forced:
                    bins[:, i] = forced[i]
        return bins, rows


def greedy_action(output: PolicyOutput, bounds=None) -> DiscretizedAction:
    """Per-row argmax (lowest bin on ties) with the command those bins encode."""
    q = np.asarray(output.q_logits)
    bins = q.argmax(axis=-1)
    if bounds is None:
        bounds = default_bounds() if q.shape[-2] == ACTION_DIM else np.tile([-1.0, 1.0], (q.shape[-2], 1))
    return detokenize(bins, bounds, q.shape[-1])


def param_counts(cfg: ModelConfig) -> tuple[int, int]:
    """(total, active) parameters; active touches k of n experts per token."""
    model = PolicyDecoder(cfg, np.random.default_rng(0))
    sizes = {k: v.size for k, v in model.p.items()}
    if not cfg.use_moe:
        total = sum(sizes.values())
        return total, total
    per_expert = sum(s for k, s in sizes.items() if ".expert0." in k)
    expert_total = sum(s for k, s in sizes.items() if ".expert" in k)
    shared = sum(sizes.values()) - expert_total
    return active_total(shared, per_expert, cfg.num_experts, cfg.top_k)


def ffn_param_counts(cfg: ModelConfig) -> tuple[int, int]:
    """(total, active) over expert weights only."""
    per = expert_param_count(cfg.d_model, cfg.d_ff) * cfg.num_layers
    return active_total(0, per, cfg.num_experts, cfg.top_k)


# ---------------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MOEQCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: PolicyDecoder, meta: dict | None = None):
    """Binary checkpoint.

    Layout (all integers little-endian u32)::

        magic "MOEQCKPT" | version | header_len | header JSON (config fields in
        declaration order, then "meta") | n_params | per param: name_len, name,
        ndim, dims..., data as little-endian float64 in row-major order
    """
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
              struct.pack("<I", len(model.p))]
    for name, t in model.p.items():
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[PolicyDecoder, dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", buf, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += 8
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    model = PolicyDecoder(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header["meta"]
