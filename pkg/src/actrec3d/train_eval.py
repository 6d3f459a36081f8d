"""Training loop, evaluation, prediction and the frame-size study."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import LATERAL_CLASSES, DatasetManifest, Sample, augment_training_set, load_clip
from .optim import OptimConfig, OptimState, decayed_lr, optimizer_step
from .tensor import softmax, softmax_cross_entropy
from .vision import Clip, PreprocessConfig, preprocess

logger = logging.getLogger(__name__)

# Published test accuracies (without bg-sub, with bg-sub) per preset, used only
# for side-by-side printing when a user evaluates on the real datasets.
REFERENCE_ACCURACY = {
    "kth": {1: (0.32, 0.67), 2: (0.57, 0.64), 3: (0.62, 0.84), 4: (0.73, 0.96)},
    "weizmann": {1: (0.26, 0.8333), 2: (0.6333, 0.8667), 3: (0.6333, 0.9333), 4: (0.80, 1.00)},
    "ut": {1: (0.45, 0.70), 2: (0.50, 0.75), 3: (0.60, 0.70), 4: (0.60, 0.80)},
}
REFERENCE_RESOLUTION = {20: 0.84, 40: 0.82, 60: 0.84}  # KTH, model 3, bg-sub

EVAL_BATCH = 32


@dataclass(frozen=True)
class TrainConfig:
    model_id: int = 3
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(decay=0.0))
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    augment: str = "none"
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    # class names that get no flipped copies; None = the synthetic lateral classes
    flip_exclude: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.model_id not in nn.PRESETS:
            raise ValueError(f"model_id must be one of {nn.PRESETS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.augment not in ("none", "model4"):
            raise ValueError(f"unknown augmentation mode {self.augment!r}")

    @classmethod
    def for_model(cls, model_id: int, **kw) -> "TrainConfig":
        """Preset defaults: model 4 trains with nadam, lr decay and flip augmentation."""
        if model_id == 4:
            kw.setdefault("optim", OptimConfig(kind="nadam", decay=0.01))
            kw.setdefault("augment", "model4")
        return cls(model_id=model_id, **kw)

    @property
    def bg_sub(self) -> bool:
        return self.preprocess.bg_sub

    def to_dict(self) -> dict:
        o = self.optim
        return {
            "model_id": self.model_id,
            "optim": {"kind": o.kind, "lr0": o.lr0, "beta1": o.beta1, "beta2": o.beta2,
                      "eps": o.eps, "decay": o.decay},
            "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
            "augment": self.augment, "preprocess": self.preprocess.to_dict(),
            "flip_exclude": list(self.flip_exclude) if self.flip_exclude is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fe = d.get("flip_exclude")
        return cls(
            model_id=int(d.get("model_id", 3)),
            optim=OptimConfig(**d["optim"]) if "optim" in d else OptimConfig(decay=0.0),
            epochs=int(d.get("epochs", 50)), batch_size=int(d.get("batch_size", 16)),
            seed=int(d.get("seed", 0)), augment=d.get("augment", "none"),
            preprocess=(PreprocessConfig.from_dict(d["preprocess"]) if "preprocess" in d
                        else PreprocessConfig()),
            flip_exclude=tuple(fe) if fe is not None else None,
        )


@dataclass
class History:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, val_acc, lr):
        self.rows.append((epoch, float(train_loss), float(val_loss), float(val_acc), float(lr)))

    def __len__(self):
        return len(self.rows)

    @property
    def val_loss(self) -> list[float]:
        return [r[2] for r in self.rows]

    @property
    def train_loss(self) -> list[float]:
        return [r[1] for r in self.rows]

    def epochs_to(self, threshold: float) -> int | None:
        """First epoch (1-based) whose validation loss is <= threshold."""
        for epoch, _, vl, _, _ in self.rows:
            if vl <= threshold:
                return epoch
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_loss,val_acc,lr\n")
        for e, tl, vl, va, lr in self.rows:
            buf.write(f"{e},{tl:.6f},{vl:.6f},{va:.6f},{lr:.6f}\n")
        return buf.getvalue()


@dataclass
class ConfusionMatrix:
    classes: list[str]
    counts: np.ndarray  # [true, predicted]

    @classmethod
    def from_predictions(cls, classes, y_true, y_pred) -> "ConfusionMatrix":
        k = len(classes)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(list(classes), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + self.classes)
        for name, row in zip(self.classes, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


@dataclass
class TrainResult:
    spec: nn.ModelSpec
    params: dict
    best_params: dict
    best_epoch: int
    history: History
    classes: list[str]
    epoch_seconds: list[float]


def load_samples(manifest: DatasetManifest, split: str) -> list[Sample]:
    return [Sample(load_clip(manifest.resolve(e)), e.label, e.path)
            for e in manifest.split(split)]


def _stack(samples: list[Sample], pcfg: PreprocessConfig):
    if not samples:
        return None, np.zeros(0, dtype=np.int64)
    X = np.stack([preprocess(s.clip, pcfg) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def logits_for(spec: nn.ModelSpec, params: dict, X: np.ndarray) -> np.ndarray:
    out = [nn.model_forward(spec, params, X[i:i + EVAL_BATCH], "eval")[0]
           for i in range(0, len(X), EVAL_BATCH)]
    return np.concatenate(out)


def _loss_and_acc(spec, params, X, y) -> tuple[float, float]:
    z = logits_for(spec, params, X)
    losses, _, _ = softmax_cross_entropy(z, y)
    return float(np.mean(losses)), float(np.mean(argmax_lowest(z) == y))


def argmax_lowest(z: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first (lowest) index on ties
    return np.argmax(z, axis=-1)


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def train(manifest: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    """Mini-batch training with per-epoch history and best-val checkpointing."""
    pcfg = cfg.preprocess
    train_s = load_samples(manifest, "train")
    val_s = load_samples(manifest, "val")
    if not train_s or not val_s:
        raise ValueError(f"training needs non-empty train and val splits, got {manifest.counts()}")

    names = LATERAL_CLASSES if cfg.flip_exclude is None else cfg.flip_exclude
    exclude = [manifest.classes.index(n) for n in names if n in manifest.classes]
    train_s = augment_training_set(train_s, val_s, cfg.augment, exclude)

    X, y = _stack(train_s, pcfg)
    Xv, yv = _stack(val_s, pcfg)
    spec = nn.build_preset(cfg.model_id, X.shape[1:], len(manifest.classes))
    params = nn.init_params(spec, cfg.seed)
    state = OptimState.zeros_like(params)
    order_rng = np.random.default_rng(cfg.seed)

    history = History()
    best_params, best_loss, best_epoch = params, np.inf, 0
    epoch_seconds = []
    logger.info("training model %d on %d clips (%d val), input %s", cfg.model_id,
                len(X), len(Xv), X.shape[1:])
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = decayed_lr(cfg.optim, epoch)
        order = order_rng.permutation(len(X))
        total = 0.0
        for step, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            _, cache = nn.model_forward(spec, params, X[idx], "train",
                                        _step_seed(cfg.seed, epoch, step))
            loss, grads = nn.model_backward(spec, params, cache, y[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}, batch {step}")
            try:
                params, state = optimizer_step(params, grads, state, cfg.optim, lr)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch + 1}, batch {step}: {exc}") from exc
            total += loss * len(idx)
        val_loss, val_acc = _loss_and_acc(spec, params, Xv, yv)
        epoch_seconds.append(time.perf_counter() - t0)
        history.append(epoch + 1, total / len(X), val_loss, val_acc, lr)
        if val_loss < best_loss:
            best_params, best_loss, best_epoch = params, val_loss, epoch + 1
        logger.info("epoch %d: train %.4f val %.4f acc %.3f lr %.2e", epoch + 1,
                    total / len(X), val_loss, val_acc, lr)
    return TrainResult(spec, params, best_params, best_epoch, history,
                       list(manifest.classes), epoch_seconds)


def evaluate_samples(spec, params, samples: list[Sample], pcfg: PreprocessConfig,
                     classes) -> tuple[float, ConfusionMatrix]:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    X, y = _stack(samples, pcfg)
    pred = argmax_lowest(logits_for(spec, params, X))
    cm = ConfusionMatrix.from_predictions(classes, y, pred)
    return cm.accuracy, cm


def evaluate(spec, params, manifest: DatasetManifest, pcfg: PreprocessConfig,
             split: str = "test") -> tuple[float, ConfusionMatrix]:
    samples = load_samples(manifest, split)
    if not samples:
        raise ValueError(f"split {split!r} is empty; nothing to evaluate")
    return evaluate_samples(spec, params, samples, pcfg, manifest.classes)


def predict(spec, params, clip: Clip, pcfg: PreprocessConfig, classes=None):
    """Return ``(class_index, class_name, probabilities)`` for one clip."""
    x = preprocess(clip, pcfg)[None]
    logits, _ = nn.model_forward(spec, params, x, "eval")
    probs = softmax(logits[0])
    k = int(argmax_lowest(logits[0]))
    name = classes[k] if classes is not None else str(k)
    return k, name, probs


@dataclass
class ResolutionRow:
    size: int
    accuracy: float
    best_accuracy: float
    seconds_per_epoch: float


def resolution_study(manifest: DatasetManifest, cfg: TrainConfig, sizes=(20, 40, 60)):
    """Train the same split and seed at each square frame size."""
    rows = []
    test_s = load_samples(manifest, "test")
    for s in sizes:
        run_cfg = replace(cfg, preprocess=replace(cfg.preprocess, size=(s, s)))
        res = train(manifest, run_cfg)
        acc, _ = evaluate_samples(res.spec, res.params, test_s, run_cfg.preprocess,
                                  manifest.classes)
        best, _ = evaluate_samples(res.spec, res.best_params, test_s, run_cfg.preprocess,
                                   manifest.classes)
        rows.append(ResolutionRow(s, acc, best, float(np.median(res.epoch_seconds))))
        logger.info("size %d: acc %.3f (best-val %.3f), %.2f s/epoch", s, acc, best,
                    rows[-1].seconds_per_epoch)
    return rows


def resolution_csv(rows: list[ResolutionRow]) -> str:
    buf = io.StringIO()
    buf.write("size,accuracy,best_val_accuracy,seconds_per_epoch,reference_accuracy\n")
    for r in rows:
        ref = REFERENCE_RESOLUTION.get(r.size)
        buf.write(f"{r.size}x{r.size},{r.accuracy:.6f},{r.best_accuracy:.6f},"
                  f"{r.seconds_per_epoch:.6f},{'' if ref is None else f'{ref:.4f}'}\n")
    return buf.getvalue()
