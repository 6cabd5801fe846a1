"""Self-supervised training loop, checkpointing and reconstruction.

Randomness is split from the run seed with ``numpy.random.SeedSequence``:

* parameter init: ``init_params(model, seed)``
* epoch shuffle: ``SeedSequence([seed, 1, epoch])``
* augmentation and mask of sample ``i`` (dataset index), view ``v`` in
  epoch ``e``: ``SeedSequence([seed, 2, e, i, v])``; the view parameters are
  drawn first, then the mask permutation, from the same generator.

Nothing else consumes randomness, so a run is a pure function of
(seed, config, precision) and can be resumed from any epoch boundary.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import random_view
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .losses import PerceptualNet, total_loss
from .model import ModelConfig, decode, encode, init_params, make_mask_plan, param_shapes, patchify, unpatchify
from .optim import AdamWState, adamw_step, lr_at_step
from .tensor import Tensor
from .volume import Volume, VolumeDataset

STREAM_SHUFFLE = 1
STREAM_VIEW = 2


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


@dataclass
class TrainRow:
    epoch: int
    step: int
    lr: float
    lambda1: float
    l_rec: float
    l_per: float
    l_edge: float
    l_cl: float
    total: float
    wall_ms: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in astuple(self))


LOG_HEADER = tuple(f.name for f in fields(TrainRow))


@dataclass
class TrainLog:
    rows: list[TrainRow] = field(default_factory=list)

    def append(self, row: TrainRow) -> None:
        if self.rows and (row.epoch, row.step) <= (self.rows[-1].epoch, self.rows[-1].step):
            raise ValueError("log rows must be strictly ordered by (epoch, step)")
        self.rows.append(row)

    def trajectory(self) -> list[tuple]:
        """Rows without the wall-clock column, for determinism comparisons."""
        return [astuple(r)[:-1] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for r in self.rows:
                w.writerow([r.epoch, r.step] + [repr(float(v)) for v in astuple(r)[2:]])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if tuple(header) != LOG_HEADER:
                raise ValueError(f"unexpected log header {header}")
            rows = [TrainRow(int(r[0]), int(r[1]), *map(float, r[2:])) for r in rd]
        return cls(rows)


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the last 10 log rows."""

    def __init__(self, message: str, rows: list[TrainRow]):
        super().__init__(message)
        self.rows = rows


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: TrainLog
    opt_state: AdamWState
    epoch: int
    step: int
    checkpoint: Path | None = None


# -- data -------------------------------------------------------------------


def load_volumes(source, model: ModelConfig) -> tuple[np.ndarray, list[str], list]:
    """Stack a dataset (path, VolumeDataset, list of Volumes or array) into [N, C, S, S, S]."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        source = VolumeDataset.open(path)
    if isinstance(source, VolumeDataset):
        vols = list(source.volumes())
    elif isinstance(source, np.ndarray):
        vols = [Volume(v, id=str(i)) for i, v in enumerate(source)]
    else:
        vols = list(source)
    if not vols:
        raise ValueError("dataset is empty")
    want = (model.channels,) + (model.input_side,) * 3
    for v in vols:
        if v.voxels.shape != want:
            raise ValueError(f"volume {v.id!r} has shape {v.voxels.shape}, model expects {want}")
    x = np.stack([v.voxels.astype(np.float64) for v in vols])
    return x, [v.id for v in vols], [v.label for v in vols]


def make_views(x: np.ndarray, indices, epoch: int, cfg: RunConfig):
    """Two augmented, independently masked views (model units) for the samples ``indices``."""
    k = cfg.model.num_patches
    views = ([], [])
    plans = ([], [])
    for i in indices:
        for v in (0, 1):
            rng = derive_rng(cfg.train.seed, STREAM_VIEW, epoch, int(i), v)
            views[v].append(random_view(x[i], cfg.augment, rng) / 255.0)
            plans[v].append(make_mask_plan(k, cfg.model.mask_ratio, rng))
    return np.stack(views[0]), np.stack(views[1]), plans


# -- params <-> arrays ---------------------------------------------------------


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray], model: ModelConfig) -> dict[str, Tensor]:
    shapes = param_shapes(model)
    if set(arrays) != set(shapes):
        missing = sorted(set(shapes) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(shapes))[:3]
        raise CheckpointError(f"checkpoint/config mismatch: missing {missing}, unexpected {extra}")
    out = {}
    for name, shape in shapes.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(f"checkpoint/config mismatch: {name} has shape {arrays[name].shape}, "
                                  f"config needs {shape}")
        out[name] = Tensor(arrays[name], requires_grad=True, name=name)
    return out


# -- training --------------------------------------------------------------------


def train(cfg: RunConfig, data=None, resume=None, max_epochs: int | None = None,
          on_step: Callable[[TrainRow], None] | None = None) -> TrainResult:
    """Run (or continue) training.

    ``data`` defaults to ``cfg.train.dataset``. ``resume`` is a checkpoint
    path or object; training continues from its epoch, and earlier log rows
    are taken from the output directory or from the checkpoint's run. ``max_epochs`` stops
    after that many completed epochs without changing the schedule.
    Checkpoints and ``trainlog.csv`` go under ``cfg.train.out`` when set.
    """
    x, _, _ = load_volumes(data if data is not None else cfg.train.dataset, cfg.model)
    n = len(x)
    bs = cfg.train.batch_size
    spe = -(-n // bs)  # last partial batch kept
    total_epochs = cfg.schedule.total_epochs
    end = total_epochs if max_epochs is None else min(max_epochs, total_epochs)
    out = Path(cfg.train.out) if cfg.train.out else None
    log = TrainLog()

    with T.precision(cfg.train.precision):
        if resume is not None:
            ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
            if ck.run_config().model != cfg.model:
                raise CheckpointError("checkpoint/config mismatch: model configs differ")
            params = params_from_arrays(ck.params, cfg.model)
            state = ck.opt_state or AdamWState.zeros(params, **_hyper(cfg))
            start, step = ck.epoch, ck.step
            # earlier rows come from the output dir, else from the run the checkpoint belongs to
            sources = [out / "trainlog.csv"] if out else []
            if not isinstance(resume, Checkpoint):
                sources.append(Path(resume).resolve().parent.parent / "trainlog.csv")
            prior = next((p for p in sources if p.exists()), None)
            if prior is not None:
                log = TrainLog([r for r in TrainLog.from_csv(prior).rows if r.epoch < start])
        else:
            params = init_params(cfg.model, cfg.train.seed)
            state = AdamWState.zeros(params, **_hyper(cfg))
            start, step = 0, 0
        net = PerceptualNet(cfg.model.channels, seed=cfg.loss.perceptual_seed) if cfg.loss.use_perceptual else None
        last_ck = None

        for epoch in range(start, end):
            order = derive_rng(cfg.train.seed, STREAM_SHUFFLE, epoch).permutation(n)
            for b in range(spe):
                t0 = time.perf_counter()
                idx = order[b * bs : (b + 1) * bs]
                v1, v2, plans = make_views(x, idx, epoch, cfg)
                lr = lr_at_step(step, spe, cfg.schedule)
                lam_epoch = epoch if cfg.schedule.granularity == "epoch" else step / spe
                rep = total_loss(x[idx] / 255.0, v1, v2, plans, params, cfg.model, cfg.loss, lam_epoch,
                                 cfg.schedule, net)
                row = TrainRow(epoch, step, lr, rep.lambda1, rep.l_rec, rep.l_per, rep.l_edge, rep.l_cl,
                               rep.total, 0.0)
                if not row.finite():
                    log.append(row)
                    if out:
                        out.mkdir(parents=True, exist_ok=True)
                        log.to_csv(out / "trainlog.csv")
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", log.rows[-10:])
                rep.value.backward()
                adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state, lr)
                for p in params.values():
                    p.grad = None
                row.wall_ms = (time.perf_counter() - t0) * 1000.0
                log.append(row)
                if on_step:
                    on_step(row)
                step += 1
            done = epoch + 1
            if out and (done % cfg.train.checkpoint_every == 0 or done == end):
                last_ck = _save(out / "checkpoints" / f"epoch_{done:04d}.vckpt", cfg, params, state, done, step)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.resolved").write_text(cfg.to_text())
            log.to_csv(out / "trainlog.csv")
            if end == total_epochs or last_ck is None:
                last_ck = _save(out / "checkpoints" / "final.vckpt", cfg, params, state, end, step)
    return TrainResult(params, log, state, end, step, last_ck)


def _hyper(cfg: RunConfig) -> dict:
    o = cfg.optim
    return dict(beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)


def _save(path: Path, cfg: RunConfig, params, state: AdamWState, epoch: int, step: int) -> Path:
    ck = Checkpoint(cfg.to_text(), params_to_arrays(params), state, epoch, step,
                    {"precision": cfg.train.precision, "seed": cfg.train.seed})
    return save_checkpoint(path, ck)


def checkpoint_from_result(cfg: RunConfig, result: TrainResult) -> Checkpoint:
    return Checkpoint(cfg.to_text(), params_to_arrays(result.params), result.opt_state, result.epoch, result.step,
                      {"precision": cfg.train.precision, "seed": cfg.train.seed})


def load_model(checkpoint) -> tuple[dict[str, Tensor], RunConfig]:
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = ck.run_config()
    with T.precision(cfg.train.precision):
        params = params_from_arrays(ck.params, cfg.model)
    return params, cfg


# -- reconstruction ------------------------------------------------------------------


def reconstruct(checkpoint, volume: Volume, p: float, seed: int) -> tuple[Volume, Volume]:
    """(input with hidden patches zeroed, full reconstruction), both in intensity units."""
    params, cfg = load_model(checkpoint)
    model = cfg.model
    want = (model.channels,) + (model.input_side,) * 3
    if volume.voxels.shape != want:
        raise ValueError(f"checkpoint/config mismatch: volume {volume.voxels.shape}, model expects {want}")
    plan = make_mask_plan(model.num_patches, p, seed)
    x = volume.voxels.astype(np.float64)
    tokens = patchify(x, model.patch_side)
    tokens[plan.hidden_idx] = 0.0
    masked = unpatchify(tokens, model.grid, model.channels, model.patch_side)
    with T.precision(cfg.train.precision), T.no_grad():
        rec = decode(encode(x[None] / 255.0, plan, params, model), params, model).data[0] * 255.0
    meta = dict(volume.provenance, mask_ratio=p, mask_seed=seed)
    return (Volume(masked.astype(np.float32), volume.id, volume.label, volume.spacing, dict(meta, kind="masked")),
            Volume(rec.astype(np.float32), volume.id, volume.label, volume.spacing, dict(meta, kind="reconstruction")))
