"""Reconstruction, perceptual, edge and contrastive losses and their weighted sum.

All losses work in model units (intensity / 255).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, decode, encode, patchify, predictor_head
from .optim import TrainSchedule, lambda1_at
from .tensor import Tensor


# -- reconstruction ----------------------------------------------------------


def reconstruction_loss(x, x_hat, hidden_idx: np.ndarray | None = None, patch: int | None = None) -> Tensor:
    """Mean squared error over every voxel and channel.

    With ``hidden_idx`` ([B, h] patch indices) and ``patch`` the mean runs only
    over the voxels of those patches.
    """
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"reconstruction_loss shapes differ: {x.shape} vs {x_hat.shape}")
    if hidden_idx is None:
        return T.mse(x_hat, x)
    if patch is None:
        raise ValueError("hidden-only reconstruction needs the patch side")
    return T.mse(T.gather_rows(patchify(x_hat, patch), hidden_idx), T.gather_rows(patchify(x, patch), hidden_idx))


# -- edges ---------------------------------------------------------------------


def sobel_kernels() -> np.ndarray:
    """[3, 1, 3, 3, 3] derivative kernels along W ("x"), H ("y") and D ("z").

    Each is a central difference [-1, 0, 1] along its axis times the [1, 2, 1]
    smoothing on the other two, divided by 32 so a unit-slope ramp gives a
    unit response.
    """
    smooth = np.array([1.0, 2.0, 1.0])
    diff = np.array([-1.0, 0.0, 1.0])
    out = np.empty((3, 1, 3, 3, 3))
    for j, axis in enumerate((2, 1, 0)):
        parts = [smooth, smooth, smooth]
        parts[axis] = diff
        out[j, 0] = np.einsum("a,b,c->abc", *parts) / 32.0
    out.setflags(write=False)
    return out


SOBEL = sobel_kernels()


def sobel3d(x) -> Tensor:
    """Per-channel gradient magnitude, ``sqrt(gx^2 + gy^2 + gz^2 + eps) - sqrt(eps)``.

    Borders are handled by replicating the edge voxels and running the
    convolution without zero padding, so a constant volume has no gradient
    anywhere. The eps offset keeps the
    derivative finite in flat regions and subtracting sqrt(eps) makes those
    regions exactly zero.
    """
    x = T.as_tensor(x)
    if x.ndim < 4:
        raise T.ShapeError(f"sobel3d needs [..., C, D, H, W], got {x.shape}")
    if min(x.shape[-3:]) < 3:
        raise T.ShapeError(f"sobel3d needs every spatial dim >= 3, got {x.shape[-3:]}")
    shape = x.shape
    xp = T.pad_edge3d(x.reshape((-1, 1) + shape[-3:]))
    g = T.conv3d_fixed(xp, Tensor(SOBEL), padding=0)
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    mag = T.sqrt(gx * gx + gy * gy + gz * gz) - math.sqrt(T.eps())
    return mag.reshape(shape)


def edge_loss(x, x_hat) -> Tensor:
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"edge_loss shapes differ: {x.shape} vs {x_hat.shape}")
    return reconstruction_loss(sobel3d(x), sobel3d(x_hat))


# -- perceptual ------------------------------------------------------------------


class PerceptualNet:
    """Frozen random 2D conv pyramid applied slice-wise.

    Three stages of (conv 3x3, GELU, conv 3x3, GELU), widths 16/32/64, with
    2x2 average pooling between stages. Weights are He-scaled Gaussians from
    ``seed``; no biases.
    """

    def __init__(self, channels: int, widths=(16, 32, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels, self.widths, self.seed = channels, tuple(widths), seed
        self.weights: list[tuple[np.ndarray, np.ndarray]] = []
        cin = channels
        for w in self.widths:
            pair = []
            for fan_in in (cin, w):
                k = rng.standard_normal((3, 3, fan_in, w)) * math.sqrt(2.0 / (9 * fan_in))
                k.setflags(write=False)
                pair.append(k)
            self.weights.append(tuple(pair))
            cin = w

    def features(self, x) -> list[Tensor]:
        """[N, H, W, C] slices -> one feature map per stage (taken before pooling)."""
        h = T.as_tensor(x)
        feats = []
        for i, (w1, w2) in enumerate(self.weights):
            h = T.gelu(T.conv2d(h, Tensor(w1)))
            h = T.gelu(T.conv2d(h, Tensor(w2)))
            feats.append(h)
            if i + 1 < len(self.weights):
                if h.shape[1] % 2 or h.shape[2] % 2:
                    continue  # odd sizes keep full resolution
                h = T.avg_pool2d(h)
        return feats


def _slices(v: Tensor, axis: int) -> Tensor:
    """[B, C, D, H, W] -> [B * n, a, b, C] 2D slices taken across spatial ``axis`` (0=D, 1=H, 2=W)."""
    B, C = v.shape[:2]
    order = {0: (0, 2, 3, 4, 1), 1: (0, 3, 2, 4, 1), 2: (0, 4, 2, 3, 1)}[axis]
    s = v.transpose(order)
    return s.reshape((-1,) + s.shape[2:])


def perceptual_loss(x, x_hat, net: PerceptualNet, axes: str = "axial") -> Tensor:
    """Per-slice sum over stages of mean squared feature differences, averaged over slices.

    ``axes="axial"`` slices across D only; ``"all"`` averages the D, H and W slicings.
    """
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"perceptual_loss shapes differ: {x.shape} vs {x_hat.shape}")
    if x.ndim == 4:
        x, x_hat = x.reshape((1,) + x.shape), x_hat.reshape((1,) + x_hat.shape)
    if axes not in ("axial", "all"):
        raise ValueError(f"perceptual axes must be 'axial' or 'all', got {axes!r}")
    total = None
    use = (0,) if axes == "axial" else (0, 1, 2)
    for axis in use:
        with T.no_grad():
            target = [f.data for f in net.features(_slices(x, axis))]
        # every slice has the same feature count, so the global mean is the slice average
        for f, t in zip(net.features(_slices(x_hat, axis)), target):
            d = f - Tensor(t)
            term = (d * d).mean()
            total = term if total is None else total + term
    return total * (1.0 / len(use)) if len(use) > 1 else total


# -- contrastive -------------------------------------------------------------------


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity with eps-guarded norms; [..., d] -> [...]."""
    na = T.sqrt((a * a).sum(axis=-1))
    nb = T.sqrt((b * b).sum(axis=-1))
    return T.div((a * b).sum(axis=-1), na * nb)


def contrastive_loss(f1, f2, params=None, predictor: bool = True, symmetric: bool = True,
                     stop: bool = True, targets=None) -> Tensor:
    """Negative cosine between predicted and (stopped) target features.

    Symmetric: 0.5 * (-cos(pred(f1), sg(f2)) - cos(pred(f2), sg(f1))); the
    asymmetric form keeps only the first term. ``pred`` is the identity when
    ``predictor`` is off. ``targets=(t1, t2)`` takes the target side from a
    separate branch instead of reusing ``f1``/``f2``.
    """
    f1, f2 = T.as_tensor(f1), T.as_tensor(f2)
    t1, t2 = (f1, f2) if targets is None else map(T.as_tensor, targets)
    if predictor and params is None:
        raise ValueError("the predictor head needs model params")

    def pred(f):
        return predictor_head(f, params) if predictor else f

    def tgt(f):
        return T.stop_gradient(f) if stop else f

    a = -cosine(pred(f1), tgt(t2)).mean()
    if not symmetric:
        return a
    b = -cosine(pred(f2), tgt(t1)).mean()
    return (a + b) * 0.5


# -- total -----------------------------------------------------------------------


@dataclass
class LossConfig:
    lambda2: float = 10.0
    predictor: bool = True
    rec_target: str = "full"  # or "hidden"
    recon_reference: str = "view1"  # or "original"
    perceptual_axes: str = "axial"  # or "all"
    perceptual_seed: int = 0
    decay_target: str = "lambda1"  # or "lambda2"
    use_perceptual: bool = True
    use_edge: bool = True
    use_contrastive: bool = True
    symmetric: bool = True
    stop_gradient: bool = True
    decode_both: bool = False

    def __post_init__(self):
        choices = {"rec_target": ("full", "hidden"), "recon_reference": ("view1", "original"),
                   "perceptual_axes": ("axial", "all"), "decay_target": ("lambda1", "lambda2")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @classmethod
    def rec_only(cls, **kw) -> "LossConfig":
        return cls(use_perceptual=False, use_edge=False, use_contrastive=False, **kw)


@dataclass
class LossReport:
    l_rec: float
    l_per: float
    l_edge: float
    l_cl: float
    lambda1: float
    lambda2: float
    total: float
    value: Tensor | None = field(default=None, repr=False, compare=False)

    def recompute(self) -> float:
        return self.l_rec + self.lambda1 * self.l_per + self.lambda2 * self.l_edge + self.l_cl


def loss_weights(epoch: float, sched: TrainSchedule, cfg: LossConfig) -> tuple[float, float]:
    """(lambda1, lambda2) at ``epoch``; the linear decay hits whichever weight ``decay_target`` names."""
    decay = lambda1_at(epoch, sched)
    if cfg.decay_target == "lambda1":
        return decay, cfg.lambda2
    ratio = decay / sched.lambda1_init if sched.lambda1_init else 1.0
    return sched.lambda1_init, cfg.lambda2 * ratio


def _recon_terms(ref: np.ndarray, x_hat: Tensor, plans, model_cfg: ModelConfig, cfg: LossConfig,
                 net: PerceptualNet | None) -> tuple[Tensor, Tensor | None, Tensor | None]:
    if cfg.rec_target == "hidden":
        if hasattr(plans, "hidden_idx"):
            hidden = np.tile(plans.hidden_idx, (ref.shape[0], 1))
        else:
            hidden = np.stack([p.hidden_idx for p in plans])
        l_rec = reconstruction_loss(ref, x_hat, hidden, model_cfg.patch_side)
    else:
        l_rec = reconstruction_loss(ref, x_hat)
    l_per = perceptual_loss(ref, x_hat, net, cfg.perceptual_axes) if cfg.use_perceptual else None
    l_edge = edge_loss(ref, x_hat) if cfg.use_edge else None
    return l_rec, l_per, l_edge


def _batch(a) -> np.ndarray:
    a = np.asarray(a)
    return a[None] if a.ndim == 4 else a


def total_loss(x, view1, view2, plans, params, model_cfg: ModelConfig, cfg: LossConfig, epoch: float,
               sched: TrainSchedule, net: PerceptualNet | None = None, cl_targets=None) -> LossReport:
    """Weighted sum l_rec + lambda1 * l_per + lambda2 * l_edge + l_cl.

    ``view1``/``view2`` are [B, C, S, S, S] in model units; ``plans`` is a
    pair of per-sample MaskPlan lists. View 1 is encoded and decoded; view 2
    is only encoded, for the contrastive term. The reconstruction reference
    is view 1 unless ``cfg.recon_reference == "original"`` (then ``x``).
    With ``cfg.decode_both`` view 2 is decoded too and the reconstruction,
    perceptual and edge terms are averaged over the two views.
    ``cl_targets`` replaces the stopped contrastive targets with fixed arrays;
    finite-difference checks use it to hold the stopped branch constant.
    """
    plans1, plans2 = plans
    if cfg.use_perceptual and net is None:
        net = PerceptualNet(model_cfg.channels, seed=cfg.perceptual_seed)
    lam1, lam2 = loss_weights(epoch, sched, cfg)
    original = cfg.recon_reference == "original"

    enc1 = encode(view1, plans1, params, model_cfg)
    terms = [_recon_terms(_batch(x if original else view1), decode(enc1, params, model_cfg), plans1, model_cfg,
                          cfg, net)]
    enc2 = None
    if cfg.use_contrastive or cfg.decode_both:
        enc2 = encode(view2, plans2, params, model_cfg)
    if cfg.decode_both:
        terms.append(_recon_terms(_batch(x if original else view2), decode(enc2, params, model_cfg), plans2,
                                  model_cfg, cfg, net))

    def combine(i):
        parts = [t[i] for t in terms]
        if parts[0] is None:
            return None
        return parts[0] if len(parts) == 1 else (parts[0] + parts[1]) * 0.5

    l_rec, l_per, l_edge = combine(0), combine(1), combine(2)
    total = l_rec
    if l_per is not None:
        total = total + l_per * lam1
    if l_edge is not None:
        total = total + l_edge * lam2
    l_cl = None
    if cfg.use_contrastive:
        l_cl = contrastive_loss(enc1.cls_feature, enc2.cls_feature, params, cfg.predictor, cfg.symmetric,
                                cfg.stop_gradient, targets=cl_targets)
        total = total + l_cl

    def val(t):
        return 0.0 if t is None else t.item()

    rep = LossReport(val(l_rec), val(l_per), val(l_edge), val(l_cl), lam1, lam2, 0.0, total)
    rep.total = rep.recompute()
    return rep
