"""Mini-batch RMSProp training and Table-1 style evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ShapeDataset
from .encoder import DET_PCA, DIRECT_VERTEX, MODES, PROBABILISTIC, Network, build, cl9p3dl1, forward
from .loss import LossConfig, baseline_loss, draw_noise, loss_from_outputs, predicted_contours
from .metrics import rasterize, dice, rmse, summarize
from .shape_model import PcaShapeModel

__all__ = [
    "TrainConfig",
    "TrainLogRecord",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "evaluate",
    "fit_arrays",
    "score_predictions",
    "predict_contours",
    "LOG_FIELDS",
]

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "total", "negloglik", "kld", "val_dice", "val_rmse", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters. ``learning_rate=1e-6`` reproduces the
    original small-batch setting; the default suits the synthetic data."""

    mode: str = PROBABILISTIC
    n_components: int = 8
    learning_rate: float = 1e-4
    batch_size: int = 5
    epochs: int = 200
    seed: int = 0
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-8
    patience: int = 50
    eval_every: int = 1
    checkpoint_every: int = 0
    widths: tuple[int, ...] = (16, 32, 64)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.n_components < 1:
            raise ValueError("batch_size and n_components must be >= 1, epochs >= 0")
        if self.loss.batch_size != self.batch_size:
            object.__setattr__(self, "loss", replace(self.loss, batch_size=self.batch_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["loss"]["lambda"] = d["loss"].pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = dict(d.pop("loss", {}))
        if "lambda" in loss:
            loss["lam"] = loss.pop("lambda")
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(loss=LossConfig(**loss), **d)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    total: float
    total_sem: float  # standard error of the epoch mean over batches; not written to the CSV
    negloglik: float
    kld: float
    val_dice: float
    val_rmse: float
    seconds: float

    def row(self) -> list:
        return [getattr(self, f) for f in LOG_FIELDS]


@dataclass
class TrainResult:
    network: Network
    best_epoch: int
    best_val_dice: float
    log: list[TrainLogRecord]
    step: int
    epoch: int
    optimizer: ad.RmsPropState
    final_network: Network
    stopped_early: bool = False


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``result`` holds the last good state."""

    def __init__(self, message: str, result: TrainResult):
        super().__init__(message)
        self.result = result


def predict_contours(net: Network, images, model: PcaShapeModel | None, mode: str, chunk: int = 50) -> np.ndarray:
    """Point predictions (N, 2V); the probabilistic mode returns ``E(y|x)``."""
    preds = []
    for start in range(0, len(images), chunk):
        batch = images[start : start + chunk]
        if mode == PROBABILISTIC:
            out = forward(net, batch)
            preds.append(model.decode(out.latent_mean.data, out.shift.data))
        else:
            preds.append(predicted_contours(net, batch, model, mode).data)
    return np.concatenate(preds)


def score_predictions(preds, refs, image_shape) -> dict:
    """DICE (filled delineations) and vertex RMSE summaries, population std."""
    h, w = image_shape
    dices = [dice(rasterize(p, h, w), rasterize(r, h, w)) for p, r in zip(preds, refs)]
    rmses = [rmse(p, r) for p, r in zip(preds, refs)]
    dm, ds = summarize(dices)
    rm, rs = summarize(rmses)
    return {"n": len(dices), "dice_mean": dm, "dice_std": ds, "rmse_mean": rm, "rmse_std": rs,
            "per_item": {"dice": dices, "rmse": rmses}}


def evaluate(
    net: Network, dataset: ShapeDataset, model: PcaShapeModel | None, mode: str | None = None, split: str = "test"
) -> dict:
    """DICE and RMSE summaries (mean and population std) over a split."""
    mode = mode or net.spec.mode
    if split not in dataset.splits or not dataset.splits[split]:
        raise ValueError(f"split {split!r} is empty or missing")
    ids, images, refs = dataset.split(split)
    summary = score_predictions(predict_contours(net, images, model, mode), refs, dataset.image_shape)
    summary["split"] = split
    summary["per_item"]["ids"] = ids
    return summary


def _batch_loss(net, images, contours, model, cfg: TrainConfig, rng):
    if cfg.mode == PROBABILISTIC:
        out = forward(net, images)
        draws = draw_noise(rng, len(contours), model.n_components_, cfg.loss)
        return loss_from_outputs(contours, out, model, cfg.loss, draws)
    total = baseline_loss(images, contours, net, model, cfg.mode)
    return total


def train(
    dataset: ShapeDataset,
    model: PcaShapeModel | None,
    cfg: TrainConfig,
    **kwargs,
) -> TrainResult:
    """Minimize the configured objective over ``dataset.splits['train']``.

    The ``val`` split, when present, drives best-checkpoint selection and
    early stopping. Keyword arguments are forwarded to :func:`fit_arrays`.
    """
    _, images, contours = dataset.split("train")
    val = dataset.split("val")[1:] if dataset.splits.get("val") else None
    return fit_arrays(images, contours, model, cfg, val=val, **kwargs)


def fit_arrays(
    images: np.ndarray,
    contours: np.ndarray,
    model: PcaShapeModel | None,
    cfg: TrainConfig,
    *,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    network: Network | None = None,
    optimizer: ad.RmsPropState | None = None,
    start_epoch: int = 0,
    start_step: int = 0,
    log_path=None,
    on_epoch=None,
) -> TrainResult:
    """Training loop on standardized image and contour arrays.

    Passing ``network``/``optimizer``/``start_epoch``/``start_step`` resumes a
    run; epochs are counted globally so shuffling and noise draws continue
    exactly as in an uninterrupted run.
    """
    if cfg.mode in (PROBABILISTIC, DET_PCA) and model is None:
        raise ValueError(f"mode {cfg.mode!r} needs a fitted shape model")
    if model is not None and cfg.mode != DIRECT_VERTEX and model.n_components_ != cfg.n_components:
        raise ValueError("shape model and config disagree on n_components")
    n_train = len(images)
    h, w = images.shape[1:]
    if network is None:
        spec = cl9p3dl1((h, w), cfg.mode, cfg.n_components, contours.shape[1] // 2, cfg.widths)
        network = build(spec, cfg.seed)
    if optimizer is None:
        optimizer = ad.RmsPropState(cfg.learning_rate, cfg.rms_decay, cfg.rms_epsilon)
    params = network.params
    has_val = val is not None and len(val[0]) > 0

    best = network.copy()
    best_dice, best_epoch = -np.inf, start_epoch
    log: list[TrainLogRecord] = []
    step = start_step
    n_batches = n_train // cfg.batch_size
    if n_batches == 0 and cfg.epochs > start_epoch:
        raise ValueError(f"training set ({n_train}) is smaller than one batch ({cfg.batch_size})")

    writer = None
    log_file = None
    if log_path is not None:
        new = not Path(log_path).exists() or Path(log_path).stat().st_size == 0
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(LOG_FIELDS)

    def result(stopped: bool, epoch: int) -> TrainResult:
        chosen = best if np.isfinite(best_dice) else network.copy()
        return TrainResult(chosen, best_epoch, float(best_dice), log, step, epoch, optimizer, network, stopped)

    epoch = start_epoch
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
            sums = np.zeros(3)
            totals = []
            for b in range(n_batches):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                rng = np.random.default_rng([cfg.seed, epoch, b])
                with ad.Tape() as tape:
                    parts = _batch_loss(network, images[idx], contours[idx], model, cfg, rng)
                root = parts.total if cfg.mode == PROBABILISTIC else parts
                value = root.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}", result(True, epoch))
                grads = tape.backward(root)
                ad.rmsprop_step(params, {name: grads[p] for name, p in params.items()}, optimizer)
                step += 1
                totals.append(value)
                if cfg.mode == PROBABILISTIC:
                    sums += [value, parts.neg_loglik.item(), parts.kld.item()]
                else:
                    sums += [value, value, 0.0]
            means = sums / max(n_batches, 1)
            sem = float(np.std(totals, ddof=1) / np.sqrt(len(totals))) if len(totals) > 1 else float("nan")

            val_dice = val_rmse = float("nan")
            last = epoch == cfg.epochs - 1
            if has_val and ((epoch + 1) % cfg.eval_every == 0 or last):
                preds = predict_contours(network, val[0], model, cfg.mode)
                summary = score_predictions(preds, val[1], (h, w))
                val_dice, val_rmse = summary["dice_mean"], summary["rmse_mean"]
                if val_dice > best_dice:
                    best_dice, best_epoch, best = val_dice, epoch + 1, network.copy()
            elif not has_val:
                best, best_epoch = network.copy(), epoch + 1
            rec = TrainLogRecord(epoch + 1, step, float(means[0]), sem, float(means[1]), float(means[2]), val_dice, val_rmse, time.perf_counter() - t0)
            log.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
                log_file.flush()
            logger.info(
                "epoch %d step %d loss %.6g (se %.3g) nll %.6g kld %.6g val_dice %.4f val_rmse %.4f (%.1fs)",
                *rec.row(),
            )
            if on_epoch is not None:
                on_epoch(rec, network, optimizer)
            if has_val and epoch + 1 - best_epoch >= cfg.patience:
                logger.info("early stop: no validation improvement for %d epochs", cfg.patience)
                return result(True, epoch + 1)
        return result(False, max(cfg.epochs, start_epoch))
    finally:
        if log_file is not None:
            log_file.close()
