"""3D masked vision-transformer autoencoder.

Token order for a [C, D, H, W] volume cut into ``p``-voxel cubes: the patch
grid is raster-scanned D-major, then H, then W. Inside a token the voxels
are laid out channel-major, then d, h, w (so a token is ``x[:, d0:d0+p,
h0:h0+p, w0:w0+p].ravel()``). The CLS token always sits at sequence index
0 and uses positional row 0, which is all zeros.

Model inputs are intensities divided by 255 ("model units").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ModelParams = dict  # name -> Tensor; see ``param_shapes`` for the full list


@dataclass
class ModelConfig:
    input_side: int = 96
    patch_side: int = 8
    channels: int = 4
    enc_dim: int = 768
    enc_blocks: int = 12
    enc_heads: int = 12
    dec_dim: int = 512
    dec_blocks: int = 8
    dec_heads: int = 8
    mask_ratio: float = 0.75
    predictor_hidden: int = 256
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.input_side % self.patch_side:
            raise ValueError(f"input_side {self.input_side} not divisible by patch_side {self.patch_side}")
        if self.enc_dim < 6 or self.dec_dim < 6:
            raise ValueError("embedding dims must be >= 6 for the 3-axis positional encoding")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("head counts must divide the embedding dims")
        if not 0 < self.mask_ratio < 1:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(input_side=32, patch_side=8, channels=4, enc_dim=64, enc_blocks=4, enc_heads=4,
                    dec_dim=32, dec_blocks=2, dec_heads=4)
        base.update(kw)
        return cls(**base)

    @property
    def grid(self) -> tuple[int, int, int]:
        g = self.input_side // self.patch_side
        return (g, g, g)

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.grid))

    @property
    def patch_voxels(self) -> int:
        return self.channels * self.patch_side**3


# -- patches ---------------------------------------------------------------


def patchify(x, patch: int):
    """[..., C, D, H, W] -> [..., k, C * patch**3]; works on arrays and Tensors."""
    shape = x.shape
    if len(shape) < 4:
        raise T.ShapeError(f"patchify needs [..., C, D, H, W], got {shape}")
    lead, (C, D, H, W) = tuple(shape[:-4]), shape[-4:]
    if D % patch or H % patch or W % patch:
        raise T.ShapeError(f"dims {(D, H, W)} not divisible by patch side {patch}")
    gd, gh, gw = D // patch, H // patch, W // patch
    n = len(lead)
    y = x.reshape(lead + (C, gd, patch, gh, patch, gw, patch))
    axes = tuple(range(n)) + tuple(n + a for a in (1, 3, 5, 0, 2, 4, 6))
    y = y.transpose(axes)
    return y.reshape(lead + (gd * gh * gw, C * patch**3))


def unpatchify(t, grid: tuple[int, int, int], channels: int, patch: int):
    """Inverse of ``patchify``."""
    shape = t.shape
    gd, gh, gw = grid
    k = gd * gh * gw
    if shape[-2] != k or shape[-1] != channels * patch**3:
        raise T.ShapeError(f"expected [..., {k}, {channels * patch**3}] tokens, got {shape}")
    lead = tuple(shape[:-2])
    n = len(lead)
    y = t.reshape(lead + (gd, gh, gw, channels, patch, patch, patch))
    axes = tuple(range(n)) + tuple(n + a for a in (3, 0, 4, 1, 5, 2, 6))
    y = y.transpose(axes)
    return y.reshape(lead + (channels, gd * patch, gh * patch, gw * patch))


# -- positional encoding ------------------------------------------------------


def sincos_1d(pos: np.ndarray, width: int) -> np.ndarray:
    """[n] positions -> [n, width]: sin block then cos block over ``width // 2``
    geometric frequencies 1 / 10000**(i / (width // 2)); an odd trailing column is zero."""
    half = width // 2
    omega = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    ang = np.outer(pos.astype(np.float64), omega)
    out = np.zeros((len(pos), width))
    out[:, :half] = np.sin(ang)
    out[:, half : 2 * half] = np.cos(ang)
    return out


@lru_cache(maxsize=32)
def _pos_table(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    if dim < 6:
        raise ValueError(f"positional encoding needs dim >= 6, got {dim}")
    width = dim // 3
    coords = np.indices(grid).reshape(3, -1)
    table = np.zeros((coords.shape[1] + 1, dim))
    for axis in range(3):
        table[1:, axis * width : (axis + 1) * width] = sincos_1d(coords[axis], width)
    table.setflags(write=False)
    return table


def positional_encoding_3d(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed table [k + 1, dim]: row 0 (CLS) is zero; patch rows concatenate
    per-axis sin/cos blocks of width ``dim // 3`` for the d, h and w grid
    coordinates; the last ``dim % 3`` columns are zero."""
    return _pos_table(tuple(int(g) for g in grid), int(dim)).copy()


# -- masking -----------------------------------------------------------------


@dataclass
class MaskPlan:
    k: int
    visible_idx: np.ndarray
    hidden_idx: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.visible_idx = np.asarray(self.visible_idx, dtype=np.intp)
        self.hidden_idx = np.asarray(self.hidden_idx, dtype=np.intp)
        both = np.concatenate([self.visible_idx, self.hidden_idx])
        if len(both) != self.k or not np.array_equal(np.sort(both), np.arange(self.k)):
            raise ValueError("visible and hidden indices must partition 0..k-1")

    @property
    def num_visible(self) -> int:
        return len(self.visible_idx)

    def hidden_mask(self) -> np.ndarray:
        m = np.zeros(self.k, dtype=bool)
        m[self.hidden_idx] = True
        return m


def num_hidden(k: int, p: float) -> int:
    # round half up
    return math.floor(p * k + 0.5)


def make_mask_plan(k: int, p: float, seed) -> MaskPlan:
    if not 0 < p < 1:
        raise ValueError(f"mask ratio must be in (0, 1), got {p}")
    if k < 2:
        raise ValueError(f"need at least 2 patches, got {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h = num_hidden(k, p)
    if h == k:
        raise ValueError(f"mask ratio {p} hides all {k} patches; the encoder needs at least one visible patch")
    perm = rng.permutation(k)
    return MaskPlan(k, np.sort(perm[h:]), np.sort(perm[:h]), seed if isinstance(seed, int) else None)


def full_plan(k: int) -> MaskPlan:
    """Every patch visible."""
    return MaskPlan(k, np.arange(k), np.zeros(0, dtype=np.intp))


# -- parameters ----------------------------------------------------------------


def _block_shapes(prefix: str, dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.norm1.g": (dim,),
        f"{prefix}.norm1.b": (dim,),
        f"{prefix}.attn.qkv.w": (dim, 3 * dim),
        f"{prefix}.attn.qkv.b": (3 * dim,),
        f"{prefix}.attn.proj.w": (dim, dim),
        f"{prefix}.attn.proj.b": (dim,),
        f"{prefix}.norm2.g": (dim,),
        f"{prefix}.norm2.b": (dim,),
        f"{prefix}.mlp.fc1.w": (dim, hidden),
        f"{prefix}.mlp.fc1.b": (hidden,),
        f"{prefix}.mlp.fc2.w": (hidden, dim),
        f"{prefix}.mlp.fc2.b": (dim,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, Dd, P = cfg.enc_dim, cfg.dec_dim, cfg.patch_voxels
    shapes = {"patch_embed.w": (P, E), "patch_embed.b": (E,), "cls_token": (E,)}
    for i in range(cfg.enc_blocks):
        shapes.update(_block_shapes(f"enc.{i}", E, cfg.mlp_ratio * E))
    shapes.update({"enc_norm.g": (E,), "enc_norm.b": (E,), "dec_embed.w": (E, Dd), "dec_embed.b": (Dd,),
                   "mask_token": (Dd,)})
    for i in range(cfg.dec_blocks):
        shapes.update(_block_shapes(f"dec.{i}", Dd, cfg.mlp_ratio * Dd))
    shapes.update({
        "dec_norm.g": (Dd,), "dec_norm.b": (Dd,),
        "dec_pred.w": (Dd, P), "dec_pred.b": (P,),
        "predictor.fc1.w": (E, cfg.predictor_hidden), "predictor.fc1.b": (cfg.predictor_hidden,),
        "predictor.fc2.w": (cfg.predictor_hidden, E), "predictor.fc2.b": (E,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit LayerNorm gains, N(0, 0.02)
    CLS and MASK tokens. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name in ("cls_token", "mask_token"):
            arr = 0.02 * rng.standard_normal(shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".w"):
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-lim, lim, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# -- transformer -----------------------------------------------------------------


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _ln(x: Tensor, params: ModelParams, name: str, eps: float) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def attention(x: Tensor, params: ModelParams, prefix: str, heads: int) -> Tensor:
    B, N, E = x.shape
    hd = E // heads
    qkv = _linear(x, params, f"{prefix}.qkv").reshape(B, N, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, E)
    return _linear(out, params, f"{prefix}.proj")


def block(x: Tensor, params: ModelParams, prefix: str, heads: int, eps: float) -> Tensor:
    """Pre-norm transformer block: attention and GELU MLP, each with a residual."""
    x = x + attention(_ln(x, params, f"{prefix}.norm1", eps), params, f"{prefix}.attn", heads)
    h = T.gelu(_linear(_ln(x, params, f"{prefix}.norm2", eps), params, f"{prefix}.mlp.fc1"))
    return x + _linear(h, params, f"{prefix}.mlp.fc2")


@dataclass
class EncoderOutput:
    tokens: Tensor  # [B, 1 + m, E], CLS first
    visible_idx: np.ndarray  # [B, m]

    @property
    def cls_feature(self) -> Tensor:
        return self.tokens[:, 0, :]

    @property
    def visible_tokens(self) -> Tensor:
        return self.tokens[:, 1:, :]


def _as_batch(x) -> np.ndarray:
    x = x.voxels / 255.0 if hasattr(x, "voxels") else np.asarray(x)
    return x[None] if x.ndim == 4 else x


def _plans_index(plans, batch: int, k: int) -> np.ndarray:
    if isinstance(plans, MaskPlan):
        plans = [plans] * batch
    if len(plans) != batch:
        raise ValueError(f"{len(plans)} mask plans for a batch of {batch}")
    for p in plans:
        if p.k != k:
            raise ValueError(f"mask plan covers {p.k} patches but the model grid has {k}")
    counts = {p.num_visible for p in plans}
    if len(counts) != 1:
        raise ValueError("all plans in a batch must keep the same number of visible patches")
    return np.stack([p.visible_idx for p in plans])


def encode_indices(x: np.ndarray, visible_idx: np.ndarray, params: ModelParams, cfg: ModelConfig) -> EncoderOutput:
    """Encode the patches at ``visible_idx`` ([B, m], any order) of ``x`` ([B, C, S, S, S], model units)."""
    patches = patchify(np.asarray(x), cfg.patch_side)
    B = patches.shape[0]
    vis = np.take_along_axis(patches, visible_idx[..., None], axis=1)
    pos = positional_encoding_3d(cfg.grid, cfg.enc_dim)[visible_idx + 1]
    emb = _linear(Tensor(vis), params, "patch_embed") + Tensor(pos)
    cls = T.broadcast_to(params["cls_token"].reshape(1, 1, cfg.enc_dim), (B, 1, cfg.enc_dim))
    h = T.concat([cls, emb], axis=1)
    for i in range(cfg.enc_blocks):
        h = block(h, params, f"enc.{i}", cfg.enc_heads, cfg.ln_eps)
    return EncoderOutput(_ln(h, params, "enc_norm", cfg.ln_eps), visible_idx)


def encode(x, plans, params: ModelParams, cfg: ModelConfig) -> EncoderOutput:
    """Encode only the visible patches; cost grows with the visible count, not k."""
    xb = _as_batch(x)
    return encode_indices(xb, _plans_index(plans, xb.shape[0], cfg.num_patches), params, cfg)


def decode(enc: EncoderOutput, params: ModelParams, cfg: ModelConfig, plans=None) -> Tensor:
    """Reconstruct full volumes [B, C, S, S, S] in model units.

    The projected CLS token rides along at sequence index 0 and is dropped
    before the pixel head; every hidden position receives the shared MASK token.
    """
    k, Dd = cfg.num_patches, cfg.dec_dim
    if plans is not None:
        idx = _plans_index(plans, enc.visible_idx.shape[0], k)
        if not np.array_equal(np.sort(idx, axis=1), np.sort(enc.visible_idx, axis=1)):
            raise ValueError("mask plan does not match the encoded visible set")
    y = _linear(enc.tokens, params, "dec_embed")
    B = y.shape[0]
    full = T.scatter_rows(y[:, 1:, :], enc.visible_idx, k)
    hidden = np.ones((B, k, 1))
    np.put_along_axis(hidden, enc.visible_idx[..., None], 0.0, axis=1)
    if hidden.any():
        full = full + Tensor(hidden) * params["mask_token"].reshape(1, 1, Dd)
    h = T.concat([y[:, :1, :], full], axis=1) + Tensor(positional_encoding_3d(cfg.grid, Dd))
    for i in range(cfg.dec_blocks):
        h = block(h, params, f"dec.{i}", cfg.dec_heads, cfg.ln_eps)
    h = _ln(h, params, "dec_norm", cfg.ln_eps)
    pred = _linear(h[:, 1:, :], params, "dec_pred")
    return unpatchify(pred, cfg.grid, cfg.channels, cfg.patch_side)


def predictor_head(f: Tensor, params: ModelParams) -> Tensor:
    """Two-layer MLP (linear, GELU, linear) on encoder features."""
    return _linear(T.gelu(_linear(f, params, "predictor.fc1")), params, "predictor.fc2")


def extract_features(v, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """CLS feature(s) with every patch visible. A single volume gives [E]."""
    xb = _as_batch(v)
    with T.no_grad():
        enc = encode(xb, full_plan(cfg.num_patches), params, cfg)
    feats = enc.cls_feature.data.astype(np.float64)
    single = hasattr(v, "voxels") or np.asarray(v).ndim == 4
    return feats[0] if single else feats


def attention_cost(tokens: int, dim: int, blocks: int) -> int:
    """Multiply-accumulates in the attention sublayers: 4*n*d^2 for the
    projections plus 2*n^2*d for scores and weighted sums, per block."""
    return blocks * (4 * tokens * dim * dim + 2 * tokens * tokens * dim)


def count_params(params: ModelParams) -> int:
    return int(sum(p.size for p in params.values()))
