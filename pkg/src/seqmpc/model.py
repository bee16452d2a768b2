"""Causal transformer over interleaved trajectory tokens, in plain numpy.

Each timestep contributes five tokens in fixed order: target, reward-to-go,
violation budget, state, control. Modality-specific linear maps embed the raw
values, a learned per-timestep table is added to all five tokens of a step,
and a pre-LayerNorm GPT stack processes the sequence under a causal mask.
State predictions are decoded from the hidden state at the violation-budget
token (so they condition on everything before the state), control predictions
from the hidden state at the state token.

The backward pass is written out by hand; gradients are validated against
central finite differences in the test suite. Generation is deterministic
(decoder means, no sampling) and propagates states through the scenario
dynamics rather than the state head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ConditionSeed, check_violation, running_cost

N_MODALITIES = 5
_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    context_length: int
    n_layers: int = 3
    n_heads: int = 3
    embed_dim: int = 96
    n_x: int = 6
    n_u: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_length < 1:
            raise ValueError("context_length must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "context_length": self.context_length, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "embed_dim": self.embed_dim,
            "n_x": self.n_x, "n_u": self.n_u, "dropout": self.dropout,
        }


# reference architecture at publication scale; desk runs default to 3/3/96
PAPER_SCALE = {"n_layers": 6, "n_heads": 6}


@dataclass
class NormStats:
    """Per-dimension standardization constants for each input modality."""

    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    rtg_mean: float
    rtg_std: float
    vb_mean: float
    vb_std: float

    def __post_init__(self):
        for name in ("state_std", "control_std", "target_std"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be positive")
        if self.rtg_std <= 0 or self.vb_std <= 0:
            raise ValueError("scalar stds must be positive")

    @staticmethod
    def identity(n_x: int, n_u: int) -> "NormStats":
        return NormStats(
            state_mean=np.zeros(n_x), state_std=np.ones(n_x),
            control_mean=np.zeros(n_u), control_std=np.ones(n_u),
            target_mean=np.zeros(n_x), target_std=np.ones(n_x),
            rtg_mean=0.0, rtg_std=1.0, vb_mean=0.0, vb_std=1.0,
        )

    def norm_state(self, x):
        return (np.asarray(x, float) - self.state_mean) / self.state_std

    def denorm_state(self, x):
        return np.asarray(x, float) * self.state_std + self.state_mean

    def norm_control(self, u):
        return (np.asarray(u, float) - self.control_mean) / self.control_std

    def denorm_control(self, u):
        return np.asarray(u, float) * self.control_std + self.control_mean

    def norm_target(self, t):
        return (np.asarray(t, float) - self.target_mean) / self.target_std

    def norm_rtg(self, r):
        return (np.asarray(r, float) - self.rtg_mean) / self.rtg_std

    def norm_vb(self, c):
        return (np.asarray(c, float) - self.vb_mean) / self.vb_std

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "state_mean": self.state_mean, "state_std": self.state_std,
            "control_mean": self.control_mean, "control_std": self.control_std,
            "target_mean": self.target_mean, "target_std": self.target_std,
            "scalars": np.array([self.rtg_mean, self.rtg_std, self.vb_mean, self.vb_std]),
        }

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "NormStats":
        s = arrays["scalars"]
        return NormStats(
            state_mean=arrays["state_mean"], state_std=arrays["state_std"],
            control_mean=arrays["control_mean"], control_std=arrays["control_std"],
            target_mean=arrays["target_mean"], target_std=arrays["target_std"],
            rtg_mean=float(s[0]), rtg_std=float(s[1]),
            vb_mean=float(s[2]), vb_std=float(s[3]),
        )


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> float:
        return float(sum(np.abs(v).sum() for v in self.tensors.values()))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    t = {}

    def lin(name, din, dout, scale=0.02):
        t[f"{name}.w"] = rng.normal(0.0, scale, size=(din, dout))
        t[f"{name}.b"] = np.zeros(dout)

    lin("embed.target", config.n_x, d)
    lin("embed.rtg", 1, d)
    lin("embed.vb", 1, d)
    lin("embed.state", config.n_x, d)
    lin("embed.control", config.n_u, d)
    t["time_embed"] = rng.normal(0.0, 0.02, size=(config.context_length, d))
    resid_scale = 0.02 / math.sqrt(2 * config.n_layers)
    for i in range(config.n_layers):
        p = f"layer{i}"
        t[f"{p}.ln1.g"] = np.ones(d)
        t[f"{p}.ln1.b"] = np.zeros(d)
        lin(f"{p}.attn.qkv", d, 3 * d)
        lin(f"{p}.attn.out", d, d, scale=resid_scale)
        t[f"{p}.ln2.g"] = np.ones(d)
        t[f"{p}.ln2.b"] = np.zeros(d)
        lin(f"{p}.mlp.fc", d, 4 * d)
        lin(f"{p}.mlp.proj", 4 * d, d, scale=resid_scale)
    t["lnf.g"] = np.ones(d)
    t["lnf.b"] = np.zeros(d)
    lin("dec.state", d, config.n_x)
    lin("dec.control", d, config.n_u)
    return ModelParams(config, t)


# --- primitive ops -----------------------------------------------------------

def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), th


def _gelu_bwd(x, th, dout):
    sech2 = 1.0 - th * th
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_bwd(dout, cache, g):
    xhat, inv = cache
    dg = np.sum(dout * xhat, axis=tuple(range(dout.ndim - 1)))
    db = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


# --- full-sequence forward / backward ---------------------------------------

def _interleave(parts):
    # parts: list of (B, T, d) in modality order -> (B, 5T, d)
    stacked = np.stack(parts, axis=2)
    b, t, m, d = stacked.shape
    return stacked.reshape(b, t * m, d)


def _forward_tokens(params: ModelParams, tokens: np.ndarray, caches: list | None = None):
    """Run the GPT stack on embedded tokens (B, L, d); returns final hidden states."""
    cfg = params.config
    t = params.tensors
    b, L, d = tokens.shape
    mask = np.tril(np.ones((L, L), dtype=bool))
    h = tokens
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        ln1, ln1_cache = _layernorm(h, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        qkv = ln1 @ t[f"{p}.attn.qkv.w"] + t[f"{p}.attn.qkv.b"]
        q, k, v = np.split(qkv, 3, axis=-1)
        qh, kh, vh = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask, scores, -np.inf)
        scores_max = scores.max(axis=-1, keepdims=True)
        att = np.exp(scores - scores_max)
        att /= att.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(att @ vh)
        attn_out = ctx @ t[f"{p}.attn.out.w"] + t[f"{p}.attn.out.b"]
        h1 = h + attn_out
        ln2, ln2_cache = _layernorm(h1, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        fc = ln2 @ t[f"{p}.mlp.fc.w"] + t[f"{p}.mlp.fc.b"]
        act, act_th = _gelu(fc)
        mlp_out = act @ t[f"{p}.mlp.proj.w"] + t[f"{p}.mlp.proj.b"]
        h2 = h1 + mlp_out
        if caches is not None:
            caches.append(dict(h=h, ln1=ln1, ln1_cache=ln1_cache, qh=qh, kh=kh, vh=vh,
                               att=att, ctx=ctx, h1=h1, ln2=ln2, ln2_cache=ln2_cache,
                               fc=fc, act=act, act_th=act_th))
        h = h2
    hf, lnf_cache = _layernorm(h, t["lnf.g"], t["lnf.b"])
    if caches is not None:
        caches.append(dict(h=h, lnf_cache=lnf_cache))
    return hf


def _embed_sequence(params: ModelParams, stats: NormStats, seq: dict, normalized: bool = False):
    """Embed raw (or pre-normalized) modality arrays into interleaved tokens.

    seq holds target (B,T,n_x), rtg (B,T), vb (B,T), states (B,T,n_x),
    controls (B,T,n_u).
    """
    t = params.tensors
    if normalized:
        tgt, rtg, vb = seq["target"], seq["rtg"], seq["vb"]
        xs, us = seq["states"], seq["controls"]
    else:
        tgt = stats.norm_target(seq["target"])
        rtg = stats.norm_rtg(seq["rtg"])
        vb = stats.norm_vb(seq["vb"])
        xs = stats.norm_state(seq["states"])
        us = stats.norm_control(seq["controls"])
    b, T = rtg.shape
    parts_in = [tgt, rtg[..., None], vb[..., None], xs, us]
    names = ["target", "rtg", "vb", "state", "control"]
    parts = [p @ t[f"embed.{n}.w"] + t[f"embed.{n}.b"] for p, n in zip(parts_in, names)]
    time_emb = t["time_embed"][:T]
    parts = [p + time_emb[None, :, :] for p in parts]
    tokens = _interleave(parts)
    return tokens, parts_in, (tgt, rtg, vb, xs, us)


def forward(params: ModelParams, stats: NormStats, seq: dict) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing forward pass; returns denormalized (x_hat, u_hat).

    x_hat[:, i] depends on tokens before the step-i state token; u_hat[:, i]
    additionally sees the step-i state.
    """
    cfg = params.config
    b, T = np.asarray(seq["rtg"]).shape
    if T > cfg.context_length:
        raise ValueError(f"sequence length {T} exceeds context {cfg.context_length}")
    tokens, _, _ = _embed_sequence(params, stats, seq)
    hf = _forward_tokens(params, tokens)
    t = params.tensors
    h_state = hf[:, 2::N_MODALITIES, :]
    h_control = hf[:, 3::N_MODALITIES, :]
    x_hat_n = h_state @ t["dec.state.w"] + t["dec.state.b"]
    u_hat_n = h_control @ t["dec.control.w"] + t["dec.control.b"]
    x_hat = x_hat_n * stats.state_std + stats.state_mean
    u_hat = u_hat_n * stats.control_std + stats.control_mean
    return x_hat, u_hat


def loss(params: ModelParams, stats: NormStats, batch: dict) -> float:
    """Mean squared one-step prediction error in normalized units."""
    value, _ = loss_and_grad(params, stats, batch, need_grad=False)
    return value


def loss_and_grad(params: ModelParams, stats: NormStats, batch: dict,
                  need_grad: bool = True):
    """Teacher-forcing MSE loss and its gradient w.r.t. every parameter."""
    cfg = params.config
    t = params.tensors
    tokens, parts_in, _ = _embed_sequence(params, stats, batch,
                                          normalized=batch.get("normalized", False))
    b, L, d = tokens.shape
    T = L // N_MODALITIES
    caches: list = []
    hf = _forward_tokens(params, tokens, caches)
    h_state = hf[:, 2::N_MODALITIES, :]
    h_control = hf[:, 3::N_MODALITIES, :]
    x_hat = h_state @ t["dec.state.w"] + t["dec.state.b"]
    u_hat = h_control @ t["dec.control.w"] + t["dec.control.b"]
    if batch.get("normalized", False):
        x_tgt = batch["states"]
        u_tgt = batch["controls"]
    else:
        x_tgt = stats.norm_state(batch["states"])
        u_tgt = stats.norm_control(batch["controls"])
    dx = x_hat - x_tgt
    du = u_hat - u_tgt
    value = float((dx * dx).sum() + (du * du).sum()) / (b * T)
    if not need_grad:
        return value, None

    grads = {k: np.zeros_like(v) for k, v in t.items()}
    scale = 2.0 / (b * T)
    gx = scale * dx
    gu = scale * du
    grads["dec.state.w"] = h_state.reshape(-1, d).T @ gx.reshape(-1, cfg.n_x)
    grads["dec.state.b"] = gx.sum(axis=(0, 1))
    grads["dec.control.w"] = h_control.reshape(-1, d).T @ gu.reshape(-1, cfg.n_u)
    grads["dec.control.b"] = gu.sum(axis=(0, 1))
    dhf = np.zeros((b, L, d))
    dhf[:, 2::N_MODALITIES, :] = gx @ t["dec.state.w"].T
    dhf[:, 3::N_MODALITIES, :] = gu @ t["dec.control.w"].T

    final = caches[-1]
    dh, dg, db = _layernorm_bwd(dhf, final["lnf_cache"], t["lnf.g"])
    grads["lnf.g"] = dg
    grads["lnf.b"] = db

    att_scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.n_layers - 1, -1, -1):
        p = f"layer{i}"
        c = caches[i]
        # mlp branch
        dmlp_out = dh
        grads[f"{p}.mlp.proj.w"] = c["act"].reshape(-1, 4 * d).T @ dmlp_out.reshape(-1, d)
        grads[f"{p}.mlp.proj.b"] = dmlp_out.sum(axis=(0, 1))
        dact = dmlp_out @ t[f"{p}.mlp.proj.w"].T
        dfc = _gelu_bwd(c["fc"], c["act_th"], dact)
        grads[f"{p}.mlp.fc.w"] = c["ln2"].reshape(-1, d).T @ dfc.reshape(-1, 4 * d)
        grads[f"{p}.mlp.fc.b"] = dfc.sum(axis=(0, 1))
        dln2 = dfc @ t[f"{p}.mlp.fc.w"].T
        dh1_from_ln2, dg2, db2 = _layernorm_bwd(dln2, c["ln2_cache"], t[f"{p}.ln2.g"])
        grads[f"{p}.ln2.g"] = dg2
        grads[f"{p}.ln2.b"] = db2
        dh1 = dh + dh1_from_ln2
        # attention branch
        dattn_out = dh1
        grads[f"{p}.attn.out.w"] = c["ctx"].reshape(-1, d).T @ dattn_out.reshape(-1, d)
        grads[f"{p}.attn.out.b"] = dattn_out.sum(axis=(0, 1))
        dctx = dattn_out @ t[f"{p}.attn.out.w"].T
        dctx_h = _split_heads(dctx, cfg.n_heads)
        datt = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["att"].transpose(0, 1, 3, 2) @ dctx_h
        att = c["att"]
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dscores *= att_scale
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        dqkv = np.concatenate([dq, dk, dv], axis=-1)
        grads[f"{p}.attn.qkv.w"] = c["ln1"].reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        grads[f"{p}.attn.qkv.b"] = dqkv.sum(axis=(0, 1))
        dln1 = dqkv @ t[f"{p}.attn.qkv.w"].T
        dh_from_ln1, dg1, db1 = _layernorm_bwd(dln1, c["ln1_cache"], t[f"{p}.ln1.g"])
        grads[f"{p}.ln1.g"] = dg1
        grads[f"{p}.ln1.b"] = db1
        dh = dh1 + dh_from_ln1

    # embeddings: split interleaved gradient back into modalities
    dtokens = dh.reshape(b, T, N_MODALITIES, d)
    names = ["target", "rtg", "vb", "state", "control"]
    for m, name in enumerate(names):
        dpart = dtokens[:, :, m, :]
        src = parts_in[m]
        din = src.shape[-1]
        grads[f"embed.{name}.w"] = src.reshape(-1, din).T @ dpart.reshape(-1, d)
        grads[f"embed.{name}.b"] = dpart.sum(axis=(0, 1))
    grads["time_embed"][:T] = dtokens.sum(axis=(0, 2))
    return value, grads


# --- incremental decoding -----------------------------------------------------

class GenerationContext:
    """Token history plus per-layer key/value caches for incremental decoding.

    Raw (unnormalized) modality values are appended step by step; the cache is
    rebuilt from scratch when the window slides past the context length.
    """

    def __init__(self, params: ModelParams, stats: NormStats):
        self.params = params
        self.stats = stats
        self.cfg = params.config
        self.steps: list[dict] = []   # raw per-step values
        self._reset_cache()

    def _reset_cache(self):
        cfg = self.cfg
        self.kv = [
            (np.zeros((0, cfg.n_heads, cfg.head_dim)), np.zeros((0, cfg.n_heads, cfg.head_dim)))
            for _ in range(cfg.n_layers)
        ]
        self.n_tokens = 0

    def clone(self) -> "GenerationContext":
        other = GenerationContext(self.params, self.stats)
        other.steps = [dict(s) for s in self.steps]
        other.kv = [(k.copy(), v.copy()) for k, v in self.kv]
        other.n_tokens = self.n_tokens
        return other

    # -- token-level machinery --

    def _token_forward(self, emb: np.ndarray) -> np.ndarray:
        """Push one embedded token through the stack, updating the KV cache."""
        cfg = self.cfg
        t = self.params.tensors
        scale = 1.0 / math.sqrt(cfg.head_dim)
        h = emb
        for i in range(cfg.n_layers):
            p = f"layer{i}"
            ln1, _ = _layernorm(h, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
            qkv = ln1 @ t[f"{p}.attn.qkv.w"] + t[f"{p}.attn.qkv.b"]
            q, k, v = np.split(qkv, 3)
            qh = q.reshape(cfg.n_heads, cfg.head_dim)
            kh = k.reshape(1, cfg.n_heads, cfg.head_dim)
            vh = v.reshape(1, cfg.n_heads, cfg.head_dim)
            K, V = self.kv[i]
            K = np.concatenate([K, kh], axis=0)
            V = np.concatenate([V, vh], axis=0)
            self.kv[i] = (K, V)
            scores = np.einsum("hd,thd->ht", qh, K) * scale
            scores -= scores.max(axis=-1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=-1, keepdims=True)
            ctx = np.einsum("ht,thd->hd", att, V).reshape(cfg.embed_dim)
            h = h + ctx @ t[f"{p}.attn.out.w"] + t[f"{p}.attn.out.b"]
            ln2, _ = _layernorm(h, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
            fc = ln2 @ t[f"{p}.mlp.fc.w"] + t[f"{p}.mlp.fc.b"]
            h = h + _gelu(fc)[0] @ t[f"{p}.mlp.proj.w"] + t[f"{p}.mlp.proj.b"]
        hf, _ = _layernorm(h, t["lnf.g"], t["lnf.b"])
        self.n_tokens += 1
        return hf

    def _embed_value(self, modality: str, value: np.ndarray, step_index: int) -> np.ndarray:
        t = self.params.tensors
        v = np.atleast_1d(np.asarray(value, float))
        return v @ t[f"embed.{modality}.w"] + t[f"embed.{modality}.b"] + t["time_embed"][step_index]

    def _push_step_tokens(self, step: dict, step_index: int, upto: str) -> np.ndarray:
        """Feed tokens of one step in modality order up to `upto`; returns last hidden."""
        stats = self.stats
        values = {
            "target": stats.norm_target(step["target"]),
            "rtg": np.array([stats.norm_rtg(step["rtg"])]),
            "vb": np.array([stats.norm_vb(step["vb"])]),
            "state": stats.norm_state(step["state"]),
            "control": stats.norm_control(step["control"]) if step.get("control") is not None else None,
        }
        hf = None
        for name in ("target", "rtg", "vb", "state", "control"):
            hf = self._token_forward(self._embed_value(name, values[name], step_index))
            if name == upto:
                return hf
        return hf

    def _rebuild(self, upto_last: str):
        """Re-encode the trailing window after truncation to the context length."""
        self._reset_cache()
        window = self.steps[-self.cfg.context_length:]
        hf = None
        for j, step in enumerate(window):
            last = upto_last if j == len(window) - 1 else "control"
            hf = self._push_step_tokens(step, j, last)
        self._last_hidden = hf

    # -- public api --

    def append_conditioning(self, target, rtg, vb, state) -> np.ndarray:
        """Add (target, rtg, vb, state) tokens for a new step; returns the hidden
        state at the state token, from which the next control is decoded."""
        step = {"target": np.asarray(target, float), "rtg": float(rtg),
                "vb": float(vb), "state": np.asarray(state, float), "control": None}
        self.steps.append(step)
        if len(self.steps) > self.cfg.context_length:
            self._rebuild("state")
            return self._last_hidden
        idx = min(len(self.steps) - 1, self.cfg.context_length - 1)
        return self._push_step_tokens(step, idx, "state")

    def append_control(self, control):
        if not self.steps or self.steps[-1]["control"] is not None:
            raise RuntimeError("no open step to attach the control to")
        self.steps[-1]["control"] = np.asarray(control, float)
        if len(self.steps) > self.cfg.context_length:
            # control token is part of the rebuilt window on the next append
            return
        idx = min(len(self.steps) - 1, self.cfg.context_length - 1)
        norm_u = self.stats.norm_control(self.steps[-1]["control"])
        self._token_forward(self._embed_value("control", norm_u, idx))

    def decode_control(self, hidden: np.ndarray) -> np.ndarray:
        t = self.params.tensors
        u_n = hidden @ t["dec.control.w"] + t["dec.control.b"]
        return self.stats.denorm_control(u_n)


def generate(params: ModelParams, stats: NormStats, seed_cond: ConditionSeed,
             horizon: int, spec, context: GenerationContext | None = None,
             rtg_override: float | None = None):
    """Autoregressive rollout with the dynamics in the loop.

    Per step: decode a control from the context, propagate the state through
    the scenario dynamics, decrement the reward-to-go by the realized cost and
    the violation budget by the realized violation flag (clamped at zero).
    Returns (states, controls) with horizon+1 states.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    ctx = context if context is not None else GenerationContext(params, stats)
    x = np.asarray(seed_cond.initial_state, float)
    rtg = float(seed_cond.reward_to_go) if rtg_override is None else float(rtg_override)
    vb = float(seed_cond.violation_budget)
    target = np.asarray(seed_cond.target, float)
    states = [x]
    controls = []
    for _ in range(horizon):
        hidden = ctx.append_conditioning(target, rtg, vb, x)
        u = ctx.decode_control(hidden)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"non-finite control generated at step {len(controls)}")
        ctx.append_control(u)
        cost = running_cost(u, spec.p, spec.q)
        flag = check_violation(x, u, spec)
        x = spec.step(x, u)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state generated at step {len(controls)}")
        rtg = rtg + cost          # reward r = -cost, and rtg_next = rtg - r
        vb = max(vb - flag, 0.0)
        states.append(x)
        controls.append(u)
    return np.array(states), np.array(controls)
