"""Training, registration and evaluation loops."""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..grid import Grid3D, LabelMap, LandmarkSet
from ..loss import LossConfig, total_loss
from ..metrics import MetricReport, warp_labels
from ..net import NetConfig, forward, init_params
from ..warp import warp_by_field
from .io import load_checkpoint, save_bundle, save_checkpoint
from .optim import AdamState, adam_step, lr_schedule

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "pair", "loss", "sim", "reg")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_final: float = 1e-6
    decay_start_epoch: int = 200
    epochs: int = 300
    betas: tuple[float, float] = (0.99, 0.999)
    adam_eps: float = 1e-8
    batch: int = 1
    window: int = 9
    lam: float = 1.0
    steps: int = 7
    seed: int = 0
    dims: tuple[int, int, int] = (32, 32, 32)
    checkpoint_every: int = 50

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr0:
            raise ValueError("need 0 < lr_final <= lr0")
        if not self.decay_start_epoch < self.epochs:
            raise ValueError("decay_start_epoch must precede the final epoch")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        LossConfig(self.window, self.lam)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        for key in ("betas", "dims"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr0, self.lr_final, self.decay_start_epoch, self.epochs)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.window, self.lam)

    @property
    def net_config(self) -> NetConfig:
        return NetConfig(steps=self.steps)


# Desk-scale settings for 32^3 synthetic pairs; see README for the rationale.
DESK_CONFIG = TrainConfig(lr0=1e-3, lr_final=1e-5, decay_start_epoch=150, epochs=200,
                          betas=(0.9, 0.999), lam=0.25, checkpoint_every=50)


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


@dataclass
class TrainResult:
    params: ad.ParamStore
    state: AdamState
    trace: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _adam_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for key in state.m:
        out[f"adam.m/{key}"] = state.m[key]
        out[f"adam.v/{key}"] = state.v[key]
    return out


def _checkpoint_meta(cfg: TrainConfig, epoch: int, state: AdamState) -> dict:
    return {"train_config": cfg.to_dict(), "net_config": cfg.net_config.to_dict(),
            "epoch": epoch, "adam_step": state.step}


def resume_state(path) -> tuple[ad.ParamStore, AdamState, int, dict]:
    ckpt = load_checkpoint(path)
    state = AdamState(step=int(ckpt.meta.get("adam_step", 0)))
    for key, arr in ckpt.extra.items():
        kind, name = key.split("/", 1)
        (state.m if kind == "adam.m" else state.v)[name] = arr
    return ckpt.params, state, int(ckpt.meta.get("epoch", -1)), ckpt.meta


def train(pairs: Sequence[tuple[Grid3D, Grid3D]], cfg: TrainConfig, out_dir=None,
          resume=None, stop_after: int | None = None) -> TrainResult:
    """Unsupervised training, one Adam step per pair per epoch.

    ``resume`` continues from a checkpoint written by an earlier call with
    the same configuration.  ``stop_after`` ends the run after that epoch
    (used to simulate an interruption).
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    dims = pairs[0][0].dims
    for f, m in pairs:
        if f.dims != dims or m.dims != dims:
            raise ValueError("all training volumes must share dims")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        params, state, last_epoch, _ = resume_state(resume)
        start = last_epoch + 1
    else:
        params = init_params(cfg.net_config, cfg.seed)
        state = AdamState.zeros_like(params)
        start = 0
    result = TrainResult(params, state)

    loss_file = None
    writer = None
    if out is not None:
        loss_path = out / "loss.csv"
        fresh = resume is None or not loss_path.exists()
        loss_file = open(loss_path, "w" if fresh else "a", newline="")
        writer = csv.writer(loss_file, lineterminator="\n")
        if fresh:
            writer.writerow(LOSS_COLUMNS)

    net_cfg, loss_cfg = cfg.net_config, cfg.loss_config
    last = cfg.epochs - 1 if stop_after is None else min(stop_after, cfg.epochs - 1)
    try:
        for epoch in range(start, last + 1):
            lr = cfg.lr(epoch)
            for k, (fixed, moving) in enumerate(pairs):
                params.zero_grad()
                fw = forward(params, fixed, moving, net_cfg)
                terms = total_loss(fixed, moving, fw.phi, loss_cfg)
                value = float(terms.total.value)
                if not math.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, pair {k}: sim={float(terms.sim.value)}, "
                        f"reg={float(terms.reg.value)}")
                ad.backward(terms.total)
                adam_step(params, {p: n.grad for p, n in params.items()}, state, lr, cfg.betas, cfg.adam_eps)
                row = {"epoch": epoch, "pair": k, "loss": value,
                       "sim": float(terms.sim.value), "reg": float(terms.reg.value)}
                result.trace.append(row)
                if writer is not None:
                    writer.writerow([row[c] if c in ("epoch", "pair") else repr(row[c]) for c in LOSS_COLUMNS])
            log.debug("epoch %d lr %.3g loss %.5f", epoch, lr, value)
            if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch == last):
                path = save_checkpoint(out / f"ckpt_{epoch:04d}", params, _adam_arrays(state),
                                       _checkpoint_meta(cfg, epoch, state))
                result.checkpoints.append(path)
    finally:
        if loss_file is not None:
            loss_file.close()
    return result


@dataclass
class Registration:
    phi: Grid3D
    warped: Grid3D
    levels: list[Grid3D]


def register(params: ad.ParamStore, fixed: Grid3D, moving: Grid3D, cfg: NetConfig | None = None,
             out_dir=None, save_levels: bool = True) -> Registration:
    """One feed-forward pass; optionally writes phi, the warped image and per-level fields."""
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed {fixed.dims} and moving {moving.dims} differ")
    fw = forward(params, fixed, moving, cfg)
    phi = Grid3D(fw.phi.value.astype(np.float32), fixed.spacing)
    warped = warp_by_field(moving, phi)
    levels = []
    for node in fw.levels:
        scale = np.asarray(fixed.dims) / np.asarray(node.shape[1:])
        levels.append(Grid3D(node.value.astype(np.float32), tuple(np.asarray(fixed.spacing) * scale)))
    if out_dir is not None:
        out = Path(out_dir)
        save_bundle(out / "phi.json", phi)
        save_bundle(out / "warped.json", warped)
        if save_levels:
            n = len(levels)
            for i, g in enumerate(levels):
                save_bundle(out / f"phi_level{n - i}.json", g)
    return Registration(phi, warped, levels)


def evaluate(phi: Grid3D, labels_fixed: LabelMap, labels_moving: LabelMap,
             landmarks_fixed: LandmarkSet | None = None, landmarks_moving: LandmarkSet | None = None,
             spacing=None, out_dir=None) -> MetricReport:
    """Warp the moving labels by ``phi`` and score them against the fixed labels.

    TRE pushes each fixed landmark through ``p -> p + phi(p)`` (trilinear
    field sampling) and measures the distance to its moving counterpart.
    """
    if phi.dims != labels_fixed.dims or phi.dims != labels_moving.dims:
        raise ValueError("field and label maps must share dims")
    spacing = labels_fixed.spacing if spacing is None else spacing
    warped = warp_labels(labels_moving, phi)
    report = MetricReport.compute(warped, labels_fixed, phi, spacing, landmarks_fixed, landmarks_moving)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.csv").write_text(report.to_csv())
    return report
