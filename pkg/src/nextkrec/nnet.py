"""Causal transformer decoder with policy and value heads, exact analytic
gradients for the four training losses, and an Adam optimizer.

All math runs in float64. Pre-norm blocks, GELU (tanh approximation)
feed-forward, learned token+position embeddings, additive -1e9 attention
masking. The policy head projects to item logits only (PAD/SEP are never in
the output space); the value head is a two-layer d -> d -> 1 network with a
tanh hidden layer read at the decision slot.

backward() computes gradients by hand (no autodiff dependency); its
correctness contract is the central-finite-difference check in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import seqcodec

MASK_ADD = -1e9
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    num_items: int
    embed_dim: int = 64
    num_blocks: int = 3
    num_heads: int = 2
    ff_dim: Optional[int] = None
    n_max: int = 50
    K: int = 10
    dropout_rate: float = 0.0
    layout: str = "gptrec"  # "gptrec" (history+SEP+generation) or "shifting"

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.embed_dim
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.layout not in ("gptrec", "shifting"):
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def vocab(self) -> int:
        return self.num_items + 2

    @property
    def num_positions(self) -> int:
        return self.n_max + self.K + 1

    @property
    def window(self) -> int:
        if self.layout == "shifting":
            return self.n_max
        return self.n_max + 1 + self.K

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def names(self) -> list[str]:
        return list(self.tensors)


BACKBONE_PREFIXES = ("tok_emb", "pos_emb", "block", "lnf_")
VALUE_HEAD_NAMES = ("w_v1", "b_v1", "w_v2", "b_v2")


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until all entries lie within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, ff = cfg.embed_dim, cfg.ff_dim
    t: dict[str, np.ndarray] = {}
    t["tok_emb"] = truncated_normal(rng, (cfg.vocab, d))
    t["pos_emb"] = truncated_normal(rng, (cfg.num_positions, d))
    for b in range(cfg.num_blocks):
        p = f"block{b}."
        t[p + "ln1_g"] = np.ones(d)
        t[p + "ln1_b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            t[p + w] = truncated_normal(rng, (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            t[p + bias] = np.zeros(d)
        t[p + "ln2_g"] = np.ones(d)
        t[p + "ln2_b"] = np.zeros(d)
        t[p + "w1"] = truncated_normal(rng, (d, ff))
        t[p + "b1"] = np.zeros(ff)
        t[p + "w2"] = truncated_normal(rng, (ff, d))
        t[p + "b2"] = np.zeros(d)
    t["lnf_g"] = np.ones(d)
    t["lnf_b"] = np.zeros(d)
    t["w_pol"] = truncated_normal(rng, (d, cfg.num_items))
    t["b_pol"] = np.zeros(cfg.num_items)
    t["w_v1"] = truncated_normal(rng, (d, d))
    t["b_v1"] = np.zeros(d)
    t["w_v2"] = truncated_normal(rng, (d, 1))
    t["b_v2"] = np.zeros(1)
    return ModelParams(t)


def init_value_from_policy(student: ModelParams, seed: int) -> ModelParams:
    """Value model: backbone copied from the student, value head re-drawn."""
    out = student.copy()
    rng = np.random.default_rng(seed)
    d = out["w_v1"].shape[0]
    out.tensors["w_v1"] = truncated_normal(rng, (d, d))
    out.tensors["b_v1"] = np.zeros(d)
    out.tensors["w_v2"] = truncated_normal(rng, (d, 1))
    out.tensors["b_v2"] = np.zeros(1)
    return out


# --- primitives --------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _mm(x, w):
    # (B,T,d) @ (d,e) -> (B,T,e)
    return x.reshape(-1, x.shape[-1]).dot(w).reshape(*x.shape[:-1], w.shape[1])


def _mm_grads(x, w, dy):
    B_flat_x = x.reshape(-1, x.shape[-1])
    B_flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = B_flat_x.T.dot(B_flat_dy)
    dx = B_flat_dy.dot(w.T).reshape(x.shape)
    return dx, dw


# --- forward / backward -------------------------------------------------------


@dataclass
class ForwardResult:
    logits: np.ndarray  # (B, T, num_items)
    values: np.ndarray  # (B, T)
    hidden: np.ndarray  # (B, T, d) after final layer norm
    cache: Optional[dict] = field(default=None, repr=False)


def _split_heads(x, num_heads):
    B, T, d = x.shape
    return x.reshape(B, T, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def forward_full(
    params: ModelParams,
    cfg: ModelConfig,
    tokens: np.ndarray,
    positions: np.ndarray,
    attn_mask: np.ndarray,
    need_cache: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
) -> ForwardResult:
    """Run the backbone plus both heads over a (B, T) batch."""
    tokens = np.atleast_2d(tokens)
    positions = np.atleast_2d(positions)
    attn_mask = np.atleast_2d(attn_mask)
    B, T = tokens.shape
    t = params.tensors
    H = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.embed_dim // H)

    # additive attention bias: query i may attend key j iff j <= i and key j
    # is not PAD; everything else gets -1e9. The diagonal stays allowed so a
    # PAD query row (all its keys banned) attends itself instead of going
    # uniform over the whole row, keeping every slot's output strictly local
    # to slots <= t.
    causal = np.tril(np.ones((T, T)))
    allowed = causal[None, :, :] * attn_mask[:, None, :]
    allowed = np.maximum(allowed, np.eye(T)[None, :, :])
    bias = MASK_ADD * (1.0 - allowed)[:, None, :, :]  # (B,1,T,T)

    drop_rate = cfg.dropout_rate if dropout_rng is not None else 0.0

    x = t["tok_emb"][tokens] + t["pos_emb"][positions]
    blocks = []
    for b in range(cfg.num_blocks):
        p = f"block{b}."
        c: dict = {"x_in": x}
        a, c["ln1"] = _layernorm(x, t[p + "ln1_g"], t[p + "ln1_b"])
        c["a"] = a
        q = _split_heads(_mm(a, t[p + "wq"]) + t[p + "bq"], H)
        k = _split_heads(_mm(a, t[p + "wk"]) + t[p + "bk"], H)
        v = _split_heads(_mm(a, t[p + "wv"]) + t[p + "bv"], H)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + bias
        att = _softmax(scores)
        ctx = _merge_heads(att @ v)
        attn_out = _mm(ctx, t[p + "wo"]) + t[p + "bo"]
        if drop_rate > 0.0:
            keep = dropout_rng.random(attn_out.shape) >= drop_rate
            attn_out = attn_out * keep / (1.0 - drop_rate)
            c["drop_attn"] = keep
        c.update(q=q, k=k, v=v, att=att, ctx=ctx)
        x = x + attn_out
        c["x_mid"] = x
        m, c["ln2"] = _layernorm(x, t[p + "ln2_g"], t[p + "ln2_b"])
        c["m"] = m
        u = _mm(m, t[p + "w1"]) + t[p + "b1"]
        g = gelu(u)
        ff_out = _mm(g, t[p + "w2"]) + t[p + "b2"]
        if drop_rate > 0.0:
            keep = dropout_rng.random(ff_out.shape) >= drop_rate
            ff_out = ff_out * keep / (1.0 - drop_rate)
            c["drop_ff"] = keep
        c.update(u=u, g=g)
        x = x + ff_out
        blocks.append(c)

    h, lnf_cache = _layernorm(x, t["lnf_g"], t["lnf_b"])
    logits = _mm(h, t["w_pol"]) + t["b_pol"]
    vh = np.tanh(_mm(h, t["w_v1"]) + t["b_v1"])
    values = (_mm(vh, t["w_v2"]) + t["b_v2"])[..., 0]

    cache = None
    if need_cache:
        cache = {
            "tokens": tokens,
            "positions": positions,
            "blocks": blocks,
            "x_final": x,
            "lnf": lnf_cache,
            "h": h,
            "vh": vh,
            "drop_rate": drop_rate,
        }
    return ForwardResult(logits, values, h, cache)


def backward_from_heads(
    params: ModelParams,
    cfg: ModelConfig,
    cache: dict,
    dlogits: np.ndarray,
    dvalues: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss given its gradients at both heads."""
    t = params.tensors
    grads = params.zeros_like()
    h = cache["h"]
    vh = cache["vh"]
    drop_rate = cache["drop_rate"]

    dh, grads["w_pol"] = _mm_grads(h, t["w_pol"], dlogits)
    grads["b_pol"] = dlogits.sum(axis=(0, 1))

    dv2_in = dvalues[..., None]  # (B,T,1)
    dvh, grads["w_v2"] = _mm_grads(vh, t["w_v2"], dv2_in)
    grads["b_v2"] = dv2_in.sum(axis=(0, 1))
    dpre = dvh * (1.0 - vh**2)
    dh_v, grads["w_v1"] = _mm_grads(h, t["w_v1"], dpre)
    grads["b_v1"] = dpre.sum(axis=(0, 1))
    dh = dh + dh_v

    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_backward(dh, t["lnf_g"], cache["lnf"])

    H = cfg.num_heads
    scale = 1.0 / math.sqrt(cfg.embed_dim // H)
    for b in reversed(range(cfg.num_blocks)):
        p = f"block{b}."
        c = cache["blocks"][b]

        # feed-forward branch
        dff = dx
        if drop_rate > 0.0:
            dff = dff * c["drop_ff"] / (1.0 - drop_rate)
        dg, grads[p + "w2"] = _mm_grads(c["g"], t[p + "w2"], dff)
        grads[p + "b2"] = dff.sum(axis=(0, 1))
        du = dg * gelu_grad(c["u"])
        dm, grads[p + "w1"] = _mm_grads(c["m"], t[p + "w1"], du)
        grads[p + "b1"] = du.sum(axis=(0, 1))
        dx_mid, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_backward(
            dm, t[p + "ln2_g"], c["ln2"]
        )
        dx = dx + dx_mid  # residual

        # attention branch
        dattn = dx
        if drop_rate > 0.0:
            dattn = dattn * c["drop_attn"] / (1.0 - drop_rate)
        dctx, grads[p + "wo"] = _mm_grads(c["ctx"], t[p + "wo"], dattn)
        grads[p + "bo"] = dattn.sum(axis=(0, 1))
        dctx_h = _split_heads(dctx, H)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = dctx_h @ v.transpose(0, 1, 3, 2)
        dv_h = att.transpose(0, 1, 3, 2) @ dctx_h
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq_h = dscores @ k * scale
        dk_h = dscores.transpose(0, 1, 3, 2) @ q * scale
        dq = _merge_heads(dq_h)
        dk = _merge_heads(dk_h)
        dv = _merge_heads(dv_h)
        a = c["a"]
        da_q, grads[p + "wq"] = _mm_grads(a, t[p + "wq"], dq)
        da_k, grads[p + "wk"] = _mm_grads(a, t[p + "wk"], dk)
        da_v, grads[p + "wv"] = _mm_grads(a, t[p + "wv"], dv)
        grads[p + "bq"] = dq.sum(axis=(0, 1))
        grads[p + "bk"] = dk.sum(axis=(0, 1))
        grads[p + "bv"] = dv.sum(axis=(0, 1))
        da = da_q + da_k + da_v
        dx_in, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_backward(
            da, t[p + "ln1_g"], c["ln1"]
        )
        dx = dx + dx_in  # residual

    np.add.at(grads["tok_emb"], cache["tokens"], dx)
    np.add.at(grads["pos_emb"], cache["positions"], dx)
    return grads


# --- loss specs ----------------------------------------------------------------


@dataclass
class LMLoss:
    """Sum over list positions of -log pi(teacher item), mean over batch."""

    targets: np.ndarray  # (B, K) teacher item ids at the decision slots
    scale: float = 1.0
    name: str = "lm_loss"


@dataclass
class ShiftingCELoss:
    """Softmax cross-entropy, mean over unmasked target slots."""

    targets: np.ndarray  # (B, T); -1 marks ignored slots
    scale: float = 1.0
    name: str = "shifting_ce_loss"


@dataclass
class PPOClipLoss:
    """Clipped surrogate: -sum_i min(rho A, clip(rho) A), mean over batch.

    Log-probabilities are taken under the sampling distribution: items
    generated at earlier steps of the same episode are masked out and the
    remainder renormalized.
    """

    actions: np.ndarray  # (B, K)
    old_logprobs: np.ndarray  # (B, K)
    advantages: np.ndarray  # (B, K)
    epsilon: float = 0.2
    scale: float = 1.0
    name: str = "ppo_clip_loss"


@dataclass
class ValueMSELoss:
    """Sum over positions of squared error, mean over batch."""

    targets: np.ndarray  # (B, K)
    scale: float = 1.0
    name: str = "value_mse_loss"


def masked_item_logprobs(
    logits_slots: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Log-probs of each action under the masked, renormalized distribution.

    logits_slots: (B, K, num_items) raw logits at the K decision slots.
    Items taken at earlier steps are excluded from each step's support.
    Returns (logprobs (B,K), masked probs (B,K,num_items); 0 at banned items).
    """
    B, K, I = logits_slots.shape
    masked = logits_slots.astype(np.float64, copy=True)
    for i in range(1, K):
        rows = np.arange(B)[:, None]
        masked[rows, i, actions[:, :i]] = -np.inf
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    logz = np.log(z[..., 0]) + m[..., 0]
    taken = np.take_along_axis(logits_slots, actions[..., None], axis=-1)[..., 0]
    return taken - logz, probs


def compute_loss_and_head_grads(
    cfg: ModelConfig, fwd: ForwardResult, spec
) -> tuple[float, np.ndarray, np.ndarray, dict]:
    """Scalar loss plus dL/dlogits and dL/dvalues for one loss spec."""
    logits = fwd.logits
    values = fwd.values
    B = logits.shape[0]
    dlogits = np.zeros_like(logits)
    dvalues = np.zeros_like(values)
    stats: dict = {}

    if isinstance(spec, LMLoss):
        K = spec.targets.shape[1]
        slots = seqcodec.decision_slots(cfg.n_max, K)
        ls = logits[:, slots, :]
        m = ls.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(ls - m).sum(axis=-1)) + m[..., 0]
        taken = np.take_along_axis(ls, spec.targets[..., None], axis=-1)[..., 0]
        loss = float((logz - taken).sum(axis=1).mean()) * spec.scale
        d = _softmax(ls)
        np.add.at(
            d,
            (np.arange(B)[:, None], np.arange(K)[None, :], spec.targets),
            -1.0,
        )
        dlogits[:, slots, :] = d * (spec.scale / B)

    elif isinstance(spec, ShiftingCELoss):
        valid = spec.targets >= 0
        count = int(valid.sum())
        if count == 0:
            raise ValueError("shifting_ce_loss: no target slots")
        safe_targets = np.where(valid, spec.targets, 0)
        m = logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
        taken = np.take_along_axis(logits, safe_targets[..., None], axis=-1)[..., 0]
        loss = float(((logz - taken) * valid).sum() / count) * spec.scale
        d = _softmax(logits)
        bi, ti = np.nonzero(valid)
        np.add.at(d, (bi, ti, safe_targets[bi, ti]), -1.0)
        dlogits[:] = d * (spec.scale / count) * valid[..., None]

    elif isinstance(spec, PPOClipLoss):
        K = spec.actions.shape[1]
        slots = seqcodec.decision_slots(cfg.n_max, K)
        new_lp, probs = masked_item_logprobs(logits[:, slots, :], spec.actions)
        rho = np.exp(new_lp - spec.old_logprobs)
        if not np.isfinite(rho).all():
            raise FloatingPointError("ppo_clip_loss: non-finite probability ratio")
        adv = spec.advantages
        unclipped = rho * adv
        clipped = np.clip(rho, 1.0 - spec.epsilon, 1.0 + spec.epsilon) * adv
        take_unclipped = unclipped <= clipped
        loss = float(-np.minimum(unclipped, clipped).sum(axis=1).mean()) * spec.scale
        # d loss / d new_logprob: -rho*adv on the unclipped branch, else 0
        dlp = np.where(take_unclipped, -rho * adv, 0.0) * (spec.scale / B)
        onehot_minus_p = -probs
        np.add.at(
            onehot_minus_p,
            (np.arange(B)[:, None], np.arange(K)[None, :], spec.actions),
            1.0,
        )
        dlogits[:, slots, :] = dlp[..., None] * onehot_minus_p
        stats["clip_fraction"] = float((~take_unclipped).mean())
        stats["ratio_mean"] = float(rho.mean())

    elif isinstance(spec, ValueMSELoss):
        K = spec.targets.shape[1]
        slots = seqcodec.decision_slots(cfg.n_max, K)
        pred = values[:, slots]
        err = pred - spec.targets
        loss = float((err**2).sum(axis=1).mean()) * spec.scale
        dvalues[:, slots] = 2.0 * err * (spec.scale / B)

    else:
        raise TypeError(f"unknown loss spec: {type(spec).__name__}")

    if not np.isfinite(loss):
        raise FloatingPointError(f"{spec.name}: loss is non-finite ({loss})")
    return loss, dlogits, dvalues, stats


def backward(
    params: ModelParams,
    cfg: ModelConfig,
    tokens: np.ndarray,
    positions: np.ndarray,
    attn_mask: np.ndarray,
    spec,
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Forward + exact gradients of the given loss w.r.t. every parameter."""
    fwd = forward_full(params, cfg, tokens, positions, attn_mask, need_cache=True)
    loss, dlogits, dvalues, stats = compute_loss_and_head_grads(cfg, fwd, spec)
    grads = backward_from_heads(params, cfg, fwd.cache, dlogits, dvalues)
    return loss, grads, stats


def forward_policy(params, cfg, tokens, positions, attn_mask) -> np.ndarray:
    """Per-slot item logits; (T, num_items) for 1-d input, else (B, T, num_items)."""
    single = np.asarray(tokens).ndim == 1
    out = forward_full(params, cfg, tokens, positions, attn_mask).logits
    return out[0] if single else out


def forward_value(params, cfg, tokens, positions, attn_mask) -> np.ndarray:
    """Per-slot value scalars; (T,) for 1-d input, else (B, T)."""
    single = np.asarray(tokens).ndim == 1
    out = forward_full(params, cfg, tokens, positions, attn_mask).values
    return out[0] if single else out


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(0, params.zeros_like(), params.zeros_like())


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction; deterministic."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
