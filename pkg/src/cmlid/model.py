"""A small post-LN transformer encoder in numpy with hand-derived gradients.

Three heads sit on the encoder output: a masked-LM head (tied to the token
embedding by default), a next-sentence head on the ``[CLS]`` position, and a
per-token label classifier. Everything runs in float64 so that central
finite differences can check the backward pass to ~1e-8.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import erf

IGNORE = -1
LOSS_KINDS = ("mlm", "nsp", "token_cls")


class ModelError(ValueError):
    pass


class ShapeMismatch(ModelError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    T: int = 64
    vocab_size: int = 512
    n_labels: int = 7
    dropout_rate: float = 0.1
    layernorm_epsilon: float = 1e-12
    init_std: float = 0.02
    tie_mlm: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.T < 8:
            raise ModelError(f"T must be at least 8, got {self.T}")
        if self.vocab_size < 5:
            raise ModelError("vocab_size must cover the 5 special units")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.n_layers < 1 or self.n_labels < 1 or self.d_ff < 1:
            raise ModelError("n_layers, n_labels and d_ff must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


PRESETS = {
    "tiny": dict(n_layers=2, n_heads=2, d_model=64, d_ff=256, T=64),
    # documented upper preset; not exercised by the tests
    "paper": dict(n_layers=12, n_heads=12, d_model=768, d_ff=3072, T=512),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ModelConfig(**base)


Params = dict  # name -> np.ndarray, insertion-ordered


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.T, d),
        "seg_emb": (2, d),
        "emb_ln.g": (d,),
        "emb_ln.b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + proj + ".w"] = (d, d)
            shapes[p + proj + ".b"] = (d,)
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ff1.w"] = (d, f)
        shapes[p + "ff1.b"] = (f,)
        shapes[p + "ff2.w"] = (f, d)
        shapes[p + "ff2.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    if not cfg.tie_mlm:
        shapes["mlm.w"] = (d, cfg.vocab_size)
    shapes["mlm.b"] = (cfg.vocab_size,)
    shapes["nsp.w"] = (d, 2)
    shapes["nsp.b"] = (2,)
    shapes["cls.w"] = (d, cfg.n_labels)
    shapes["cls.b"] = (cfg.n_labels,)
    return shapes


def _is_weight(name: str) -> bool:
    return name.endswith((".w", "_emb"))


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Truncated-normal weights (cut at two std), zero biases, unit layernorm scale."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif _is_weight(name):
            params[name] = _truncated_normal(rng, shape, cfg.init_std)
        else:
            params[name] = np.zeros(shape)
    return params


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def num_parameters(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_targets: np.ndarray | None = None
    nsp_targets: np.ndarray | None = None
    label_targets: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        for name in ("mlm_targets", "nsp_targets", "label_targets"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.int64))
        if self.ids.ndim != 2:
            raise ShapeMismatch(f"ids must be [B, T], got shape {self.ids.shape}")
        if self.segment_ids.shape != self.ids.shape or self.attention_mask.shape != self.ids.shape:
            raise ShapeMismatch("ids, segment_ids and attention_mask must share one shape")
        for name in ("mlm_targets", "label_targets"):
            v = getattr(self, name)
            if v is None:
                continue
            if v.shape != self.ids.shape:
                raise ShapeMismatch(f"{name} must match ids shape")
            if np.any((v != IGNORE) & (self.attention_mask == 0)):
                raise ShapeMismatch(f"{name} has a live target on a padded position")
        if self.nsp_targets is not None and self.nsp_targets.shape != (self.ids.shape[0],):
            raise ShapeMismatch("nsp_targets must be [B]")


def _check_batch(cfg: ModelConfig, batch: Batch) -> None:
    B, T = batch.ids.shape
    if T > cfg.T:
        raise ShapeMismatch(f"sequence length {T} exceeds model T={cfg.T}")
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= cfg.vocab_size):
        raise ModelError("token id out of range")
    if batch.segment_ids.size and (batch.segment_ids.min() < 0 or batch.segment_ids.max() > 1):
        raise ModelError("segment ids must be 0 or 1")


# ----------------------------------------------------------------- building blocks


def _ln_fwd(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    """Exact (erf) GELU; also returns the normal CDF for the backward pass."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _dropout(x, rate, rng):
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def _linear_bwd(dy, x, w):
    """Gradients of ``y = x @ w + b`` for arbitrary leading dims."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(0)


# ------------------------------------------------------------------ encoder


class EncoderCache(NamedTuple):
    emb_ln: tuple
    emb_drop: np.ndarray | None
    layers: list
    ids: np.ndarray
    segment_ids: np.ndarray


def _encoder_fwd(params, cfg, batch, rng):
    ids, seg, mask = batch.ids, batch.segment_ids, batch.attention_mask
    B, T = ids.shape
    x = params["tok_emb"][ids] + params["pos_emb"][:T][None] + params["seg_emb"][seg]
    x, emb_ln = _ln_fwd(x, params["emb_ln.g"], params["emb_ln.b"], cfg.layernorm_epsilon)
    x, emb_drop = _dropout(x, cfg.dropout_rate, rng)
    neg = np.where(mask[:, None, None, :] == 0, -np.inf, 0.0)
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    layers = []
    attn_probs = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        split = lambda t: t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        q = split(x @ params[p + "q.w"] + params[p + "q.b"])
        k = split(x @ params[p + "k.w"] + params[p + "k.b"])
        v = split(x @ params[p + "v.w"] + params[p + "v.b"])
        probs = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + neg)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        a = ctx @ params[p + "o.w"] + params[p + "o.b"]
        a, drop1 = _dropout(a, cfg.dropout_rate, rng)
        x1, ln1 = _ln_fwd(x + a, params[p + "ln1.g"], params[p + "ln1.b"], cfg.layernorm_epsilon)
        pre = x1 @ params[p + "ff1.w"] + params[p + "ff1.b"]
        act, cdf = _gelu(pre)
        f = act @ params[p + "ff2.w"] + params[p + "ff2.b"]
        f, drop2 = _dropout(f, cfg.dropout_rate, rng)
        x2, ln2 = _ln_fwd(x1 + f, params[p + "ln2.g"], params[p + "ln2.b"], cfg.layernorm_epsilon)
        layers.append((x, q, k, v, probs, ctx, drop1, x1, ln1, pre, cdf, act, drop2, ln2))
        attn_probs.append(probs)
        x = x2
    return x, EncoderCache(emb_ln, emb_drop, layers, ids, seg), attn_probs


def _encoder_bwd(dx, params, cfg, cache: EncoderCache, grads):
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        x, q, k, v, probs, ctx, drop1, x1, ln1, pre, cdf, act, drop2, ln2 = cache.layers[i]
        B, T, _ = x.shape
        dsum2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_bwd(dx, params[p + "ln2.g"], ln2)
        df = dsum2 if drop2 is None else dsum2 * drop2
        dact, grads[p + "ff2.w"], grads[p + "ff2.b"] = _linear_bwd(df, act, params[p + "ff2.w"])
        dpre = dact * _gelu_grad(pre, cdf)
        dx1_ff, grads[p + "ff1.w"], grads[p + "ff1.b"] = _linear_bwd(dpre, x1, params[p + "ff1.w"])
        dx1 = dsum2 + dx1_ff
        dsum1, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_bwd(dx1, params[p + "ln1.g"], ln1)
        da = dsum1 if drop1 is None else dsum1 * drop1
        dctx, grads[p + "o.w"], grads[p + "o.b"] = _linear_bwd(da, ctx, params[p + "o.w"])
        dctx = dctx.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        dx_in = dsum1.copy()
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dxi, grads[p + name + ".w"], grads[p + name + ".b"] = _linear_bwd(merge(dt), x, params[p + name + ".w"])
            dx_in += dxi
        dx = dx_in
    if cache.emb_drop is not None:
        dx = dx * cache.emb_drop
    dx, grads["emb_ln.g"], grads["emb_ln.b"] = _ln_bwd(dx, params["emb_ln.g"], cache.emb_ln)
    T = dx.shape[1]
    d = dx.shape[-1]
    np.add.at(grads["tok_emb"], cache.ids.reshape(-1), dx.reshape(-1, d))
    grads["pos_emb"][:T] += dx.sum(0)
    np.add.at(grads["seg_emb"], cache.segment_ids.reshape(-1), dx.reshape(-1, d))


# ------------------------------------------------------------------- losses


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Mean cross-entropy over non-sentinel targets; returns (loss, dlogits, n_live)."""
    K = logits.shape[-1]
    flat = logits.reshape(-1, K)
    t = np.asarray(targets).reshape(-1)
    live = t != IGNORE
    if np.any((t[live] < 0) | (t[live] >= K)):
        raise ModelError(f"target id out of range for {K} classes")
    n = int(live.sum())
    dl = np.zeros_like(flat)
    if n == 0:
        return 0.0, dl.reshape(logits.shape), 0
    z = flat[live]
    m = z.max(-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(-1))
    tl = t[live]
    value = float((lse - z[np.arange(n), tl]).sum() / n)
    g = np.exp(z - lse[:, None])
    g[np.arange(n), tl] -= 1.0
    dl[live] = g / n
    return value, dl.reshape(logits.shape), n


def loss(logits: np.ndarray, targets: np.ndarray, kind: str) -> tuple[float, bool]:
    """``(mean cross-entropy, has_live_positions)``; 0.0 when nothing is live."""
    if kind not in LOSS_KINDS:
        raise ModelError(f"unknown loss kind {kind!r}")
    value, _, n = cross_entropy(logits, targets)
    return value, n > 0


# ------------------------------------------------------------------ forward


class ForwardOutput(NamedTuple):
    hidden: np.ndarray
    mlm_logits: np.ndarray
    nsp_logits: np.ndarray
    label_logits: np.ndarray
    attention: list


def _mlm_weight(params, cfg):
    return params["tok_emb"].T if cfg.tie_mlm else params["mlm.w"]


def forward(params: Params, cfg: ModelConfig, batch: Batch, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOutput:
    _check_batch(cfg, batch)
    h, _, attn = _encoder_fwd(params, cfg, batch, rng if train else None)
    mlm = h @ _mlm_weight(params, cfg) + params["mlm.b"]
    nsp = h[:, 0] @ params["nsp.w"] + params["nsp.b"]
    lab = h @ params["cls.w"] + params["cls.b"]
    return ForwardOutput(h, mlm, nsp, lab, attn)


def encode_hidden(params: Params, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    _check_batch(cfg, batch)
    return _encoder_fwd(params, cfg, batch, None)[0]


def predict_labels(params: Params, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    h = encode_hidden(params, cfg, batch)
    return (h @ params["cls.w"] + params["cls.b"]).argmax(-1)


def loss_and_grads(params: Params, cfg: ModelConfig, batch: Batch, kinds=("mlm",),
                   train: bool = False, rng: np.random.Generator | None = None):
    """Summed loss over ``kinds`` plus gradients for every parameter.

    Returns ``(total, {kind: value}, grads)``. Heads that are not part of the
    loss get exact zero gradients.
    """
    if isinstance(kinds, str):
        kinds = (kinds,)
    for kd in kinds:
        if kd not in LOSS_KINDS:
            raise ModelError(f"unknown loss kind {kd!r}")
    _check_batch(cfg, batch)
    h, cache, _ = _encoder_fwd(params, cfg, batch, rng if train else None)
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    dh = np.zeros_like(h)
    values = {}
    if "mlm" in kinds:
        if batch.mlm_targets is None:
            raise ModelError("mlm loss needs mlm_targets")
        t = batch.mlm_targets
        live = t != IGNORE
        hl = h[live]
        w = _mlm_weight(params, cfg)
        logits = hl @ w + params["mlm.b"]
        values["mlm"], dlog, _ = cross_entropy(logits, t[live])
        dh[live] += dlog @ w.T
        gw = hl.T @ dlog
        if cfg.tie_mlm:
            grads["tok_emb"] += gw.T
        else:
            grads["mlm.w"] += gw
        grads["mlm.b"] += dlog.sum(0)
    if "nsp" in kinds:
        if batch.nsp_targets is None:
            raise ModelError("nsp loss needs nsp_targets")
        cls_h = h[:, 0]
        logits = cls_h @ params["nsp.w"] + params["nsp.b"]
        values["nsp"], dlog, _ = cross_entropy(logits, batch.nsp_targets)
        dh[:, 0] += dlog @ params["nsp.w"].T
        grads["nsp.w"] += cls_h.T @ dlog
        grads["nsp.b"] += dlog.sum(0)
    if "token_cls" in kinds:
        if batch.label_targets is None:
            raise ModelError("token_cls loss needs label_targets")
        t = batch.label_targets
        live = t != IGNORE
        hl = h[live]
        logits = hl @ params["cls.w"] + params["cls.b"]
        values["token_cls"], dlog, _ = cross_entropy(logits, t[live])
        dh[live] += dlog @ params["cls.w"].T
        grads["cls.w"] += hl.T @ dlog
        grads["cls.b"] += dlog.sum(0)
    if np.any(dh):
        _encoder_bwd(dh, params, cfg, cache, grads)
    return float(sum(values.values())), values, grads


def backward(params: Params, cfg: ModelConfig, batch: Batch, loss_kind) -> dict[str, np.ndarray]:
    """Gradients of the chosen loss(es) in evaluation mode (no dropout)."""
    return loss_and_grads(params, cfg, batch, loss_kind)[2]


# --------------------------------------------------------------- checkpoints

MAGIC = b"CMLIDCK1"


def save_checkpoint(path: str | Path, params: Params, cfg: ModelConfig, vocab_sha256: str,
                    meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float64 blobs``."""
    tensors = []
    offset = 0
    for name, arr in params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "cmlid-checkpoint",
        "version": 1,
        "dtype": "<f8",
        "config": asdict(cfg),
        "vocab_sha256": vocab_sha256,
        "tensors": tensors,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, vocab_sha256: str | None = None):
    """Return ``(params, config, header)``; checks the vocabulary hash when given."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    if vocab_sha256 is not None and header["vocab_sha256"] != vocab_sha256:
        raise CheckpointError(
            f"{path}: trained with vocabulary {header['vocab_sha256'][:12]}, got {vocab_sha256[:12]}"
        )
    cfg = ModelConfig(**header["config"])
    base = 16 + n
    params: Params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    expected = param_shapes(cfg)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: tensor set does not match its config")
    return params, cfg, header


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
