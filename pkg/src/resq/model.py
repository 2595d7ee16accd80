"""Small decoder-only transformer with RoPE, grouped-query attention and a
gated FFN, runnable in float, projected, or quantized form.

Weights are input-major (``y = x @ W``). Projection handling:

* ``U_A`` (hidden x hidden) rotates the residual stream. It is fused into
  the embedding, the first linear layer of each block (``U_A^T W``), the
  block output layers (``W U_A``) and the head. Norm gains must be folded
  into the following linear layers first, since RMSNorm only commutes with
  a rotation at unit gain.
* ``U_B`` (head x head) is fused into ``v_proj`` (right) and ``o_proj``
  (left, once per query head).
* ``U_C`` (head x head) is applied at runtime to the post-RoPE query and
  key, so the key cache is stored in the projected basis.
* ``U_D`` (ffn x ffn) is applied at runtime to the FFN hidden state (fast
  Hadamard transform when possible) and fused into ``down_proj``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .gptq import HessianEstimate, assemble_rows, gptq_quantize_mixed
from .linalg import fast_hadamard_transform, hadamard, is_hadamard_size, random_orthogonal
from .projection import (
    IDENTITY,
    ROTATION,
    LayerProjections,
    ProjectionBasis,
    ProjectionSet,
    build_baseline_basis,
    default_rank,
)
from .quant import PER_CHANNEL, PER_HEAD, PER_TOKEN, QuantConfig, QuantizedTensor, dequantize, fake_quant, quantize

__all__ = [
    "DecoderConfig",
    "LayerWeights",
    "ModelWeights",
    "QuantMode",
    "KVCache",
    "init_toy_model",
    "fold_norms",
    "fuse_projections",
    "identity_projections",
    "ffn_rotation",
    "quantize_model",
    "forward",
    "perplexity",
    "nll",
    "generate",
    "LINEAR_NAMES",
]

LINEAR_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")


@dataclass(frozen=True)
class DecoderConfig:
    d_h: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ffn: int = 512
    n_layers: int = 2
    vocab: int = 256
    rope_theta: float = 10000.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_head % 2:
            raise ValueError("RoPE needs an even head dimension")

    @property
    def d_head(self) -> int:
        return self.d_h // self.n_heads

    @property
    def group(self) -> int:
        return self.n_heads // self.n_kv_heads

    def as_dict(self) -> dict:
        return {
            "d_h": self.d_h,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_ffn": self.d_ffn,
            "n_layers": self.n_layers,
            "vocab": self.vocab,
            "rope_theta": self.rope_theta,
            "eps": self.eps,
        }


@dataclass
class LayerWeights:
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    o_proj: np.ndarray
    gate_proj: np.ndarray
    up_proj: np.ndarray
    down_proj: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    def map(self, fn) -> "LayerWeights":
        return LayerWeights(**{k: fn(k, v) for k, v in self.__dict__.items()})


@dataclass
class ModelWeights:
    config: DecoderConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray
    norms_folded: bool = False
    fused: bool = False
    # name -> (low, high) quantized row groups; filled by quantize_model
    quantized: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.embed.dtype

    def astype(self, dtype) -> "ModelWeights":
        return replace(
            self,
            embed=self.embed.astype(dtype),
            layers=[lw.map(lambda _k, v: v.astype(dtype)) for lw in self.layers],
            final_norm=self.final_norm.astype(dtype),
            lm_head=self.lm_head.astype(dtype),
        )

    def tensors(self):
        """(name, array) pairs in a fixed order."""
        yield "embed", self.embed
        for i, lw in enumerate(self.layers):
            for k, v in lw.__dict__.items():
                yield f"layer.{i}.{k}", v
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head


@dataclass(frozen=True)
class QuantMode:
    """Bit widths of the quantized forward pass.

    ``high_bits`` applies to the last ``rank_high`` channels of every mixed
    site. The runtime key projection (``U_C``) and its input run at
    ``uc_bits``; the query stays unquantized.
    """

    wbits: int = 4
    abits: int = 4
    kvbits: int = 4
    high_bits: int = 8
    uc_bits: int = 8
    mixed_uc: bool = False
    page_len: int = 64

    def high(self, bits: int) -> int:
        return 16 if bits == 16 else max(bits, self.high_bits)

    def as_dict(self) -> dict:
        return {
            "wbits": self.wbits,
            "abits": self.abits,
            "kvbits": self.kvbits,
            "high_bits": self.high_bits,
            "uc_bits": self.uc_bits,
            "mixed_uc": self.mixed_uc,
            "page_len": self.page_len,
        }


ACT_CFG = QuantConfig(4, symmetric=False, granularity=PER_TOKEN)
WT_CFG = QuantConfig(4, symmetric=True, granularity=PER_CHANNEL)


# ---------------------------------------------------------------------------
# toy model construction
# ---------------------------------------------------------------------------


def init_toy_model(
    config: DecoderConfig = DecoderConfig(),
    seed: int = 0,
    n_massive: int = 4,
    massive_scale: float = 20.0,
    n_ffn_outliers: int = 8,
    n_kv_outliers: int = 2,
    outlier_scale: float = 8.0,
    logit_scale: float = 8.0,
    block_scale: float = 2.0,
    dtype=np.float32,
) -> ModelWeights:
    """Random decoder whose activations resemble a trained LLM's.

    The residual stream carries ``n_massive`` near-constant channels about
    ``massive_scale`` times larger than the rest, with matching small norm
    gains; the remaining embedding energy follows a 1/k spectrum in a random
    basis. A few FFN hidden units, key dimensions and value dimensions are
    scaled up by ``outlier_scale`` with compensating downscales on the
    consuming weights, so the float function is unchanged in character but
    the quantized tensors contain outliers.
    """
    c = config
    rng = np.random.default_rng(seed)
    d, dh, hq, hk = c.d_h, c.d_head, c.n_heads, c.n_kv_heads

    spectrum = 1.0 / np.arange(1, d + 1)
    spectrum *= d / spectrum.sum()
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    embed = (rng.standard_normal((c.vocab, d)) * np.sqrt(spectrum)) @ basis.T
    massive = rng.choice(d, size=n_massive, replace=False) if n_massive else np.zeros(0, int)
    signs = rng.choice([-1.0, 1.0], size=n_massive)
    embed[:, massive] = massive_scale * signs * (1.0 + 0.05 * rng.standard_normal((c.vocab, n_massive)))

    def gain(n):
        g = rng.uniform(0.6, 1.4, size=n)
        g[massive] /= massive_scale
        return g

    def mat(n_in, n_out, scale=1.0):
        return rng.standard_normal((n_in, n_out)) * (scale / np.sqrt(n_in))

    layers = []
    for _ in range(c.n_layers):
        wq = mat(d, hq * dh)
        wk = mat(d, hk * dh)
        wv = mat(d, hk * dh)
        wo = mat(hq * dh, d, block_scale)
        wg = mat(d, c.d_ffn)
        wu = mat(d, c.d_ffn)
        wd = mat(c.d_ffn, d, block_scale)

        half = dh // 2
        for h in range(hk):
            dims = rng.choice(half, size=n_kv_outliers, replace=False)
            for j in np.concatenate([dims, dims + half]):
                wk[:, h * dh + j] *= outlier_scale
                for g in range(c.group):
                    wq[:, (h * c.group + g) * dh + j] /= outlier_scale
            vdims = rng.choice(dh, size=n_kv_outliers, replace=False)
            for j in vdims:
                wv[:, h * dh + j] *= outlier_scale
                for g in range(c.group):
                    wo[(h * c.group + g) * dh + j, :] /= outlier_scale
        hot = rng.choice(c.d_ffn, size=n_ffn_outliers, replace=False)
        wu[:, hot] *= outlier_scale
        wd[hot, :] /= outlier_scale

        layers.append(LayerWeights(wq, wk, wv, wo, wg, wu, wd, gain(d), gain(d)))

    lm_head = mat(d, c.vocab, logit_scale)
    w = ModelWeights(c, embed, layers, gain(d), lm_head)
    return w.astype(dtype)


def fold_norms(weights: ModelWeights) -> ModelWeights:
    """Fold RMSNorm gains into the linear layers that consume them."""
    if weights.norms_folded:
        return weights
    layers = []
    for lw in weights.layers:
        a = lw.attn_norm[:, None]
        f = lw.ffn_norm[:, None]
        layers.append(
            replace(
                lw,
                q_proj=a * lw.q_proj,
                k_proj=a * lw.k_proj,
                v_proj=a * lw.v_proj,
                gate_proj=f * lw.gate_proj,
                up_proj=f * lw.up_proj,
                attn_norm=np.ones_like(lw.attn_norm),
                ffn_norm=np.ones_like(lw.ffn_norm),
            )
        )
    return replace(
        weights,
        layers=layers,
        lm_head=weights.final_norm[:, None] * weights.lm_head,
        final_norm=np.ones_like(weights.final_norm),
        norms_folded=True,
    )


def identity_projections(config: DecoderConfig, rank_frac: float = 0.125) -> ProjectionSet:
    """All-identity bases with the default high-precision ranks."""

    def ident(n, r):
        return ProjectionBasis(np.eye(n), r, IDENTITY)

    layers = [
        LayerProjections(
            ident(config.d_head, default_rank(config.d_head, rank_frac)),
            ident(config.d_head, default_rank(config.d_head, rank_frac)),
            ident(config.d_ffn, 0),
        )
        for _ in range(config.n_layers)
    ]
    return ProjectionSet(ident(config.d_h, default_rank(config.d_h, rank_frac)), layers)


def ffn_rotation(d_ffn: int, seed=0) -> ProjectionBasis:
    """``U_D``: Hadamard when the size allows, else a random rotation (with a warning)."""
    if is_hadamard_size(d_ffn):
        return ProjectionBasis(hadamard(d_ffn), 0, ROTATION, is_hadamard=(d_ffn & (d_ffn - 1)) == 0)
    warnings.warn(f"no Hadamard matrix of order {d_ffn}; using a random orthogonal U_D", stacklevel=2)
    return ProjectionBasis(random_orthogonal(d_ffn, seed), 0, ROTATION)


def _blockdiag(u: np.ndarray, n: int) -> np.ndarray:
    return np.kron(np.eye(n), u)


def _is_identity(b: ProjectionBasis) -> bool:
    return b.kind == IDENTITY or np.array_equal(b.u, np.eye(b.dim))


def fuse_projections(weights: ModelWeights, proj: ProjectionSet, check_tol: float = 1e-5) -> ModelWeights:
    """Absorb ``U_A``, ``U_B`` and the weight side of ``U_D`` into the weights."""
    if not weights.norms_folded:
        raise ValueError("fold RMSNorm gains into the linear layers (fold_norms) before fusing projections")
    if weights.fused:
        raise ValueError("weights are already fused")
    c = weights.config
    if proj.u_a.dim != c.d_h or len(proj.layers) != c.n_layers:
        raise ValueError("projection set does not match the model architecture")
    proj.check(check_tol)
    dt = weights.dtype

    def mm(a, b):
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(dt)

    ua = proj.u_a.u
    skip_a = _is_identity(proj.u_a)
    embed = weights.embed if skip_a else mm(weights.embed, ua)
    lm_head = weights.lm_head if skip_a else mm(ua.T, weights.lm_head)

    layers = []
    for lw, lp in zip(weights.layers, proj.layers):
        if lp.u_b.dim != c.d_head or lp.u_c.dim != c.d_head or lp.u_d.dim != c.d_ffn:
            raise ValueError("per-layer projection dimensions do not match the model")
        q, k, v, o = lw.q_proj, lw.k_proj, lw.v_proj, lw.o_proj
        g, up, dn = lw.gate_proj, lw.up_proj, lw.down_proj
        if not skip_a:
            q, k, v, g, up = (mm(ua.T, m) for m in (q, k, v, g, up))
            o, dn = mm(o, ua), mm(dn, ua)
        if not _is_identity(lp.u_b):
            v = mm(v, _blockdiag(lp.u_b.u, c.n_kv_heads))
            o = mm(_blockdiag(lp.u_b.u, c.n_heads).T, o)
        if not _is_identity(lp.u_d):
            dn = mm(lp.u_d.u.T, dn)
        layers.append(replace(lw, q_proj=q, k_proj=k, v_proj=v, o_proj=o, gate_proj=g, up_proj=up, down_proj=dn))
    return replace(weights, embed=embed, layers=layers, lm_head=lm_head, fused=True, quantized={})


# ---------------------------------------------------------------------------
# weight quantization
# ---------------------------------------------------------------------------


def _high_rows_per_head(n_heads: int, d_head: int, r: int) -> np.ndarray:
    if r == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(h * d_head + d_head - r, (h + 1) * d_head) for h in range(n_heads)])


def weight_layout(config: DecoderConfig, proj: ProjectionSet, layer: int, name: str) -> dict:
    """Which input rows of a linear layer are high precision, and its Hessian basis."""
    lp = proj.layers[layer]
    if name in ("q_proj", "k_proj", "v_proj", "gate_proj", "up_proj"):
        return {"rank_high": proj.u_a.rank_high, "high_rows": None}
    if name == "o_proj":
        return {"rank_high": 0, "high_rows": _high_rows_per_head(config.n_heads, config.d_head, lp.u_b.rank_high)}
    if name == "down_proj":
        return {"rank_high": 0, "high_rows": None}
    raise KeyError(name)


def hessian_basis(config: DecoderConfig, proj: ProjectionSet, layer: int, name: str) -> np.ndarray:
    """Matrix ``B`` such that the fused layer's inputs are ``x @ B`` for the unfused inputs ``x``."""
    lp = proj.layers[layer]
    if name in ("q_proj", "k_proj", "v_proj", "gate_proj", "up_proj"):
        return proj.u_a.u
    if name == "o_proj":
        return _blockdiag(lp.u_b.u, config.n_heads)
    if name == "down_proj":
        return lp.u_d.u
    raise KeyError(name)


HESSIAN_SITE = {
    "q_proj": "qkv",
    "k_proj": "qkv",
    "v_proj": "qkv",
    "o_proj": "o",
    "gate_proj": "upgate",
    "up_proj": "upgate",
    "down_proj": "down",
}


def quantize_model(
    fused: ModelWeights,
    proj: ProjectionSet,
    mode: QuantMode,
    hessians: dict | None = None,
    use_gptq: bool = True,
    block: int = 128,
) -> ModelWeights:
    """Quantize every linear layer of a fused model, per output channel, symmetric.

    ``hessians`` maps ``"layer.{i}.{qkv|o|upgate|down}"`` to input Hessians of
    the *unfused* model; they are rotated into the fused basis here. Without
    them (or with ``use_gptq=False``) weights are rounded to nearest.
    """
    if mode.wbits == 16:
        return fused
    c = fused.config
    lo_cfg = WT_CFG.with_bits(mode.wbits)
    hi_cfg = WT_CFG.with_bits(mode.high(mode.wbits))
    layers = []
    qstore = {}
    for i, lw in enumerate(fused.layers):
        new = {}
        for name in LINEAR_NAMES:
            w = getattr(lw, name)
            layout = weight_layout(c, proj, i, name)
            hess = None
            if use_gptq and hessians is not None:
                h = hessians[f"layer.{i}.{HESSIAN_SITE[name]}"]
                hess = h.project(hessian_basis(c, proj, i, name))
            q_low, q_high = gptq_quantize_mixed(
                w, hess, lo_cfg, hi_cfg, layout["rank_high"], block, layout["high_rows"]
            )
            qstore[f"layer.{i}.{name}"] = (q_low, q_high)
            new[name] = assemble_rows(q_low, q_high, w.shape[0], layout["rank_high"], layout["high_rows"]).astype(
                w.dtype
            )
        layers.append(replace(lw, **new))
    return replace(fused, layers=layers, quantized=qstore)


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------


def rms_norm(x: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x.astype(np.float64) ** 2, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + eps)).astype(x.dtype)


def rope_tables(positions: np.ndarray, d_head: int, theta: float):
    half = d_head // 2
    inv = theta ** (-np.arange(half) * 2.0 / d_head)
    ang = positions[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """x: (B, T, H, d_head); cos/sin: (T, d_head/2)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos[None, :, None, :].astype(x.dtype)
    s = sin[None, :, None, :].astype(x.dtype)
    return np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _split_quant(x2: np.ndarray, high_mask: np.ndarray, bits: int, bits_high: int, cfg: QuantConfig, head_split=None):
    """Fake-quantize columns outside ``high_mask`` at ``bits`` and inside at ``bits_high``.

    ``head_split`` = (n_heads, d_low, d_high) switches to per-head groups.
    """
    if bits == 16 and bits_high == 16:
        return x2
    out = np.empty_like(x2)
    low = ~high_mask
    for mask, b, hd_idx in ((low, bits, 1), (high_mask, bits_high, 2)):
        if not mask.any():
            continue
        c = cfg.with_bits(b)
        if head_split is not None:
            c = replace(c, granularity=PER_HEAD, head_dim=head_split[hd_idx])
        out[:, mask] = fake_quant(x2[:, mask], c)
    return out


def _last_r_mask(n: int, r: int) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    if r:
        m[n - r :] = True
    return m


def _per_head_mask(n_heads: int, d_head: int, r: int) -> np.ndarray:
    return np.tile(_last_r_mask(d_head, r), n_heads)


@dataclass
class _KVPage:
    length: int
    k: object
    v: object


class KVCache:
    """Per-layer key/value storage in fixed-length pages.

    Keys are stored after RoPE and ``U_C``; values after ``U_B`` (fused in
    ``v_proj``). With ``kvbits < 16`` every page holds per-head asymmetric
    codes, split into low/high channel groups by the bases' ranks.
    """

    def __init__(self, n_layers: int, page_len: int = 64):
        self.page_len = page_len
        self.pages: list[list[_KVPage]] = [[] for _ in range(n_layers)]
        self.lengths = [0] * n_layers

    @property
    def length(self) -> int:
        return self.lengths[0]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, encode=None):
        """k, v: (B, T, n_kv, d_head)."""
        t = k.shape[1]
        start = 0
        while start < t:
            pages = self.pages[layer]
            room = self.page_len - pages[-1].length if pages and pages[-1].length < self.page_len else 0
            n = min(room or self.page_len, t - start)
            ks, vs = k[:, start : start + n], v[:, start : start + n]
            entry = (encode(ks, vs) if encode else (ks.copy(), vs.copy()))
            if room:
                page = pages[-1]
                page.k.append(entry[0])
                page.v.append(entry[1])
                page.length += n
            else:
                pages.append(_KVPage(n, [entry[0]], [entry[1]]))
            start += n
        self.lengths[layer] += t

    def read(self, layer: int, decode=None):
        ks, vs = [], []
        for page in self.pages[layer]:
            for a, b in zip(page.k, page.v):
                ks.append(decode(a) if decode else a)
                vs.append(decode(b) if decode else b)
        return np.concatenate(ks, axis=1), np.concatenate(vs, axis=1)


class _KVCodec:
    """Quantize (B, T, n_kv, d_head) blocks per token and head with a low/high channel split."""

    def __init__(self, bits: int, bits_high: int, r_k: int, r_v: int, dtype):
        self.bits, self.bits_high, self.r_k, self.r_v, self.dtype = bits, bits_high, r_k, r_v, dtype

    def _enc(self, x, r):
        b, t, nh, dh = x.shape
        rows = x.reshape(b * t, nh, dh)
        parts = []
        for sl, bits in ((slice(0, dh - r), self.bits), (slice(dh - r, dh), self.bits_high)):
            width = sl.stop - sl.start
            if width == 0:
                parts.append(None)
                continue
            cfg = QuantConfig(bits, symmetric=False, granularity=PER_HEAD, head_dim=width)
            parts.append(quantize(np.ascontiguousarray(rows[:, :, sl]).reshape(b * t, nh * width), cfg))
        return (x.shape, r, parts)

    def encode(self, k, v):
        return self._enc(k, self.r_k), self._enc(v, self.r_v)

    def decode(self, blob):
        shape, r, parts = blob
        b, t, nh, dh = shape
        out = np.empty((b * t, nh, dh), dtype=self.dtype)
        for sl, qt in zip((slice(0, dh - r), slice(dh - r, dh)), parts):
            if qt is None:
                continue
            width = sl.stop - sl.start
            out[:, :, sl] = dequantize(qt, np.float64).reshape(b * t, nh, width)
        return out.reshape(shape)


def _apply_ffn_rotation(hid: np.ndarray, basis: ProjectionBasis) -> np.ndarray:
    if _is_identity(basis):
        return hid
    if basis.is_hadamard:
        return fast_hadamard_transform(hid, axis=-1).astype(hid.dtype)
    return (hid @ basis.u.astype(hid.dtype))


def forward(
    tokens,
    weights: ModelWeights,
    proj: ProjectionSet | None = None,
    quant: QuantMode | None = None,
    cache: KVCache | None = None,
    capture=None,
) -> np.ndarray:
    """Logits for ``tokens`` (shape (T,) or (B, T)).

    ``weights`` must already be fused with ``proj`` when ``proj`` is given
    (see ``fuse_projections``); the runtime projections ``U_C`` and ``U_D``
    come from ``proj``. ``quant`` switches on activation and KV-cache
    quantization (weights are quantized beforehand by ``quantize_model``).
    ``capture(site, layer, array)`` receives intermediate activations.
    """
    toks = np.asarray(tokens)
    squeeze = toks.ndim == 1
    if squeeze:
        toks = toks[None, :]
    c = weights.config
    if toks.size and (toks.min() < 0 or toks.max() >= c.vocab):
        raise ValueError("token id out of range")
    if proj is not None and not weights.fused:
        raise ValueError("weights must be fused with the projection set before a projected forward pass")
    if quant is not None and proj is None:
        proj = identity_projections(c)
    dt = weights.dtype
    b, t = toks.shape
    dh, hq, hk = c.d_head, c.n_heads, c.n_kv_heads

    own_cache = cache is None
    if own_cache:
        cache = KVCache(c.n_layers, quant.page_len if quant else 64)
    pos0 = cache.length
    positions = np.arange(pos0, pos0 + t, dtype=np.float64)
    cos, sin = rope_tables(positions, dh, c.rope_theta)

    h = weights.embed[toks]
    for i, lw in enumerate(weights.layers):
        lp = proj.layers[i] if proj is not None else None

        x = rms_norm(h, c.eps)
        if not weights.norms_folded:
            x = x * lw.attn_norm
        if capture:
            capture("attn_in", i, x)
        if quant is not None:
            r_a = proj.u_a.rank_high
            x = _split_quant(
                x.reshape(b * t, c.d_h), _last_r_mask(c.d_h, r_a), quant.abits, quant.high(quant.abits), ACT_CFG
            ).reshape(b, t, c.d_h)

        q = (x @ lw.q_proj).reshape(b, t, hq, dh)
        k = (x @ lw.k_proj).reshape(b, t, hk, dh)
        v = (x @ lw.v_proj).reshape(b, t, hk, dh)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        if capture:
            capture("key", i, k)
            capture("value", i, v)

        if lp is not None and not _is_identity(lp.u_c):
            uc = lp.u_c.u.astype(dt)
            q = q @ uc
            if quant is not None and quant.uc_bits != 16:
                k = _runtime_key_projection(k, lp.u_c, quant).astype(dt)
            else:
                k = k @ uc

        codec = None
        if quant is not None and quant.kvbits != 16:
            codec = _KVCodec(quant.kvbits, quant.high(quant.kvbits), lp.u_c.rank_high, lp.u_b.rank_high, dt)
        cache.append(i, k, v, codec.encode if codec else None)
        kk, vv = cache.read(i, codec.decode if codec else None)

        kk = np.repeat(kk, c.group, axis=2)
        vv = np.repeat(vv, c.group, axis=2)
        scores = np.einsum("bthd,bshd->bhts", q, kk) / np.sqrt(dh).astype(dt)
        total = kk.shape[1]
        mask = np.arange(total)[None, :] > (pos0 + np.arange(t))[:, None]
        scores = np.where(mask[None, None], -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        o = np.einsum("bhts,bshd->bthd", p.astype(dt), vv).reshape(b, t, hq * dh)
        if capture:
            capture("attn_out", i, o)
        if quant is not None:
            r_b = lp.u_b.rank_high
            o = _split_quant(
                o.reshape(b * t, hq * dh),
                _per_head_mask(hq, dh, r_b),
                quant.abits,
                quant.high(quant.abits),
                ACT_CFG,
            ).reshape(b, t, hq * dh)
        h = h + o @ lw.o_proj

        f = rms_norm(h, c.eps)
        if not weights.norms_folded:
            f = f * lw.ffn_norm
        if capture:
            capture("ffn_in", i, f)
        if quant is not None:
            r_a = proj.u_a.rank_high
            f = _split_quant(
                f.reshape(b * t, c.d_h), _last_r_mask(c.d_h, r_a), quant.abits, quant.high(quant.abits), ACT_CFG
            ).reshape(b, t, c.d_h)
        hid = _silu(f @ lw.gate_proj) * (f @ lw.up_proj)
        if capture:
            capture("ffn_hidden", i, hid)
        if lp is not None:
            hid = _apply_ffn_rotation(hid, lp.u_d)
        if quant is not None and quant.abits != 16:
            hid = fake_quant(hid.reshape(b * t, c.d_ffn), ACT_CFG.with_bits(quant.abits)).reshape(b, t, c.d_ffn)
        h = h + hid @ lw.down_proj

    x = rms_norm(h, c.eps)
    if not weights.norms_folded:
        x = x * weights.final_norm
    logits = x @ weights.lm_head
    return logits[0] if squeeze else logits


def _runtime_key_projection(k: np.ndarray, u_c: ProjectionBasis, quant: QuantMode) -> np.ndarray:
    """``k @ U_C`` with the key and ``U_C`` quantized (8-bit by default)."""
    b, t, nh, dh = k.shape
    rows = k.reshape(b * t * nh, dh).astype(np.float64)
    kq = fake_quant(rows, ACT_CFG.with_bits(quant.uc_bits))
    u = u_c.u.astype(np.float64)
    if quant.mixed_uc:
        r = u_c.rank_high
        u_q = np.empty_like(u)
        u_q[:, : dh - r] = fake_quant(u[:, : dh - r], WT_CFG.with_bits(quant.abits))
        if r:
            u_q[:, dh - r :] = fake_quant(u[:, dh - r :], WT_CFG.with_bits(quant.high(quant.abits)))
    else:
        u_q = fake_quant(u, WT_CFG.with_bits(quant.uc_bits))
    return (kq @ u_q).reshape(b, t, nh, dh)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def nll(logits: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Next-token negative log-likelihoods, shape (..., T-1)."""
    lp = _log_softmax(logits[..., :-1, :])
    nxt = np.asarray(tokens)[..., 1:]
    return -np.take_along_axis(lp, nxt[..., None], axis=-1)[..., 0]


def perplexity(
    tokens,
    weights: ModelWeights,
    proj: ProjectionSet | None = None,
    quant: QuantMode | None = None,
    batch: int = 16,
) -> float:
    """exp(mean next-token NLL), teacher forced; ``tokens`` is (T,) or (N, T)."""
    toks = np.asarray(tokens)
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.size == 0 or toks.shape[-1] < 2:
        raise ValueError("perplexity needs sequences of at least 2 tokens")
    total, count = 0.0, 0
    for s in range(0, toks.shape[0], batch):
        chunk = toks[s : s + batch]
        logits = forward(chunk, weights, proj, quant)
        vals = nll(logits, chunk)
        total += float(vals.sum())
        count += vals.size
    return float(np.exp(total / count))


def perplexity_from_logits(logits, tokens) -> float:
    vals = nll(np.asarray(logits), np.asarray(tokens))
    return float(np.exp(vals.mean()))


def generate(
    weights: ModelWeights,
    n_seqs: int,
    seq_len: int,
    seed: int = 0,
    temperature: float = 1.0,
) -> np.ndarray:
    """Sample ``n_seqs`` sequences from the float model using the KV cache."""
    c = weights.config
    rng = np.random.default_rng(seed)
    out = np.zeros((n_seqs, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, c.vocab, size=n_seqs)
    cache = KVCache(c.n_layers)
    logits = forward(out[:, :1], weights, cache=cache)
    for t in range(1, seq_len):
        z = logits[:, -1, :].astype(np.float64) / temperature
        z -= z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random((n_seqs, 1))
        nxt = (p.cumsum(axis=-1) < u).sum(axis=-1)
        out[:, t] = np.minimum(nxt, c.vocab - 1)
        if t < seq_len - 1:
            logits = forward(out[:, t : t + 1], weights, cache=cache)
    return out
