"""Pretraining, composed training, evaluation and artifact bookkeeping."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import netpbm
from .data import (
    AugmentSpec,
    Sample,
    augment,
    batches,
    load_manifest,
    load_samples,
    split,
    synth_fixture,
    SYNTH_CATEGORIES,
)
from .eafp import SCALES, EafpConfig, EafpParams, ParamPool, eafp_forward, normalize_prompt
from .metrics import ConfusionMatrix, MetricReport, roc_points
from .model import EAFP_OFF, EAFP_ON, Backbone, BackboneConfig, ClassifierModel, predict
from .tensor import (
    Tensor,
    backward,
    concat_channels,
    flatten,
    global_avg_pool,
    linear,
    no_grad,
    softmax_cross_entropy,
)

LR_SCHEDULES = ("cosine", "constant")
DEFAULT_SYNTH = {"num_classes": 3, "per_category": 40, "size": 64, "seed": 7}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss {loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class RunConfig:
    seed: int
    data: str | None = None
    synth: dict | None = None
    prompt: str | None = None
    pool: str | None = None
    out: str | None = None
    mode: str = EAFP_ON
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    freeze_eafp: bool = True
    image_size: int = 64
    split_ratio: float = 0.8
    split_seed: int = 0
    augment: dict | None = None
    aliases: list[str] = field(default_factory=list)
    backbone: dict = field(default_factory=dict)
    eafp: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValueError("seed must be an integer")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.mode not in (EAFP_ON, EAFP_OFF):
            raise ValueError(f"mode must be {EAFP_ON} or {EAFP_OFF}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {', '.join(LR_SCHEDULES)}")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any], **overrides) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown run-config field(s): {', '.join(sorted(unknown))}")
        merged = dict(doc)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        if "seed" not in merged:
            raise ValueError("a seed is required")
        return cls(**merged)

    @classmethod
    def from_json(cls, path: str | os.PathLike, **overrides) -> "RunConfig":
        return cls.from_mapping(json.loads(Path(path).read_text()), **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float


# --------------------------------------------------------------------------
# optimizers


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: dict,
                   kind: str = "adam", lr: float = 1e-3, momentum: float = 0.9,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> dict:
    """Update ``params`` in place.

    SGD:  v <- momentum * v + g;  theta <- theta - lr * v
    Adam: m <- b1 m + (1-b1) g;  s <- b2 s + (1-b2) g^2;
          theta <- theta - lr * (m / (1-b1^t)) / (sqrt(s / (1-b2^t)) + eps)
    Parameters whose gradient is ``None`` are skipped.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if kind == "sgd":
        vel = state.setdefault("velocity", [None] * len(params))
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            v = g.astype(p.dtype) if vel[i] is None else momentum * vel[i] + g
            vel[i] = v
            p -= (lr * v).astype(p.dtype)
    elif kind == "adam":
        b1, b2 = betas
        t = state["t"] = state.get("t", 0) + 1
        m = state.setdefault("m", [None] * len(params))
        s = state.setdefault("s", [None] * len(params))
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if m[i] is None:
                m[i] = np.zeros_like(p)
                s[i] = np.zeros_like(p)
            m[i] = b1 * m[i] + (1 - b1) * g
            s[i] = b2 * s[i] + (1 - b2) * (g * g)
            p -= (lr * (m[i] / c1) / (np.sqrt(s[i] / c2) + eps)).astype(p.dtype)
    else:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    return state


class Optimizer:
    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3, **hyper):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.hyper = hyper
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                       self.kind, self.lr, **self.hyper)


def epoch_lr(config: RunConfig, epoch: int) -> float:
    """Learning rate for one epoch; ``cosine`` decays from lr towards 0."""
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1 + math.cos(math.pi * epoch / config.epochs))


# --------------------------------------------------------------------------
# data


def load_dataset(config: RunConfig) -> tuple[list[Sample], list[str]]:
    if config.data:
        manifest = load_manifest(config.data)
        return load_samples(manifest, config.image_size), manifest.categories
    spec = dict(DEFAULT_SYNTH, **(config.synth or {}))
    spec.setdefault("size", config.image_size)
    samples = synth_fixture(**spec)
    return samples, list(SYNTH_CATEGORIES[: spec["num_classes"]])


def split_dataset(config: RunConfig) -> tuple[list[Sample], list[Sample], list[str]]:
    samples, categories = load_dataset(config)
    train_set, test_set = split(samples, config.split_ratio, config.split_seed)
    return train_set, test_set, categories


def _epoch_batches(samples: list[Sample], config: RunConfig, epoch: int):
    seed = (config.seed, epoch)
    order_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    if config.augment is None:
        yield from batches(samples, config.batch_size, order_seed)
        return
    spec = AugmentSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in config.augment.items()})
    draw = np.random.default_rng([spec.seed, config.seed, epoch])
    order = np.random.default_rng(order_seed).permutation(len(samples))
    for start in range(0, len(order), config.batch_size):
        chunk = [augment(samples[i], spec, draw) for i in order[start : start + config.batch_size]]
        yield (np.stack([s.image for s in chunk]).astype(np.float32),
               np.array([s.label for s in chunk], dtype=np.int64))


def _stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.array([s.label for s in samples], dtype=np.int64))


# --------------------------------------------------------------------------
# generic loop


def _fit(forward: Callable[[np.ndarray, bool], Tensor], params: list[Tensor], set_mode: Callable[[bool], None],
         train_set: list[Sample], test_set: list[Sample], config: RunConfig,
         on_epoch: Callable[[EpochRecord], None] | None = None,
         batch_source: Callable[[int], Any] | None = None) -> list[EpochRecord]:
    opt = Optimizer(params, config.optimizer, config.lr,
                    **({"momentum": config.momentum} if config.optimizer == "sgd" else {}))
    test_x, test_y = _stack(test_set)
    records = []
    for epoch in range(config.epochs):
        opt.lr = epoch_lr(config, epoch)
        set_mode(True)
        total, correct, count = 0.0, 0, 0
        source = batch_source(epoch) if batch_source else _epoch_batches(train_set, config, epoch)
        for x, y in source:
            loss, probs = softmax_cross_entropy(forward(x, True), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += value * len(y)
            correct += int((np.argmax(probs, axis=1) == y).sum())
            count += len(y)
        set_mode(False)
        with no_grad():
            test_loss, test_probs = _eval_loss(forward, test_x, test_y, config.batch_size)
        if not math.isfinite(test_loss):
            raise TrainingDiverged(epoch, test_loss)
        rec = EpochRecord(epoch, total / count, correct / count, test_loss,
                          float((np.argmax(test_probs, axis=1) == test_y).mean()))
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
    return records


def _eval_loss(forward, x, y, batch_size) -> tuple[float, np.ndarray]:
    probs = []
    total = 0.0
    for start in range(0, len(y), batch_size):
        loss, p = softmax_cross_entropy(forward(x[start : start + batch_size], False), y[start : start + batch_size])
        total += float(loss.data) * len(p)
        probs.append(p)
    return total / len(y), np.concatenate(probs)


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    params: EafpParams
    records: list[EpochRecord]
    key: str
    pool: ParamPool


def _temporary_head(config: EafpConfig, num_classes: int, seed: int) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng([seed, 1])
    width = config.in_channels * (1 + len(SCALES))
    w = (rng.standard_normal((num_classes, width)) / np.sqrt(width)).astype(np.float32)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes, np.float32), requires_grad=True)


def pretrain_logits(image: Tensor, params: EafpParams, head: tuple[Tensor, Tensor]) -> Tensor:
    """Temporary head: spatial means of the overlay output and the adapted maps, then linear."""
    acts: dict = {}
    feats = eafp_forward(image, params, acts)
    for scale in SCALES:
        feats = concat_channels(feats, acts[f"eafp.adapted.{scale}"])
    return linear(flatten(global_avg_pool(feats)), *head)


def pretrain(config: RunConfig, train_set: list[Sample] | None = None, test_set: list[Sample] | None = None,
             categories: Sequence[str] | None = None,
             progress: Callable[[EpochRecord], None] | None = None) -> PretrainResult:
    """Train EAFP with a temporary classifier head and store the EAFP parameters.

    The head averages, per image, the overlay output and each of the three
    adapted maps over space and applies one linear layer. Every adaptor thus
    receives a direct training signal. The head is discarded afterwards.
    """
    if not config.prompt:
        raise ValueError("pretraining needs a prompt key")
    if train_set is None:
        train_set, test_set, categories = split_dataset(config)
    num_classes = len(categories) if categories else 1 + max(s.label for s in train_set)
    eafp_config = EafpConfig.from_dict(dict(config.eafp, in_channels=train_set[0].image.shape[0])) \
        if config.eafp else EafpConfig(in_channels=train_set[0].image.shape[0])
    params = EafpParams.initialize(eafp_config, seed=config.seed)
    head = _temporary_head(eafp_config, num_classes, config.seed)

    def forward(x, training):
        return pretrain_logits(Tensor(x), params, head)

    def set_mode(training):
        params.set_mode("training" if training else "inference")

    records = _fit(forward, params.parameters() + list(head), set_mode, train_set, test_set, config, progress)
    params.set_mode("inference")

    pool = ParamPool.load_or_new(config.pool) if config.pool else ParamPool()
    key = normalize_prompt(config.prompt)
    pool.register(key, params, config.aliases)
    if config.pool:
        pool.save(config.pool)
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        write_curves(out, records)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        params.save(out / f"{key}.eafp")
        write_manifest(out)
    return PretrainResult(params, records, key, pool)


# --------------------------------------------------------------------------
# composed training


@dataclass
class TrainResult:
    model: ClassifierModel
    records: list[EpochRecord]
    best_epoch: int
    categories: list[str]
    test_set: list[Sample]


def build_model(config: RunConfig, num_classes: int, in_channels: int, pool: ParamPool | None = None
                ) -> ClassifierModel:
    bb = dict(config.backbone)
    bb.setdefault("num_classes", num_classes)
    bb.setdefault("in_channels", in_channels)
    bb.setdefault("input_size", config.image_size)
    backbone = Backbone(BackboneConfig.from_dict(bb), seed=config.seed)
    model = ClassifierModel(backbone, config.mode)
    if config.mode == EAFP_ON:
        if not config.prompt:
            raise ValueError("eafp-on mode needs a prompt")
        if pool is None:
            if not config.pool:
                raise ValueError("eafp-on mode needs a parameter pool")
            pool = ParamPool.load(config.pool)
        model.pool = pool
        model.bind_prompt(config.prompt, copy=True)
        model.trainable_eafp = not config.freeze_eafp
    return model


def train(config: RunConfig, train_set: list[Sample] | None = None, test_set: list[Sample] | None = None,
          categories: Sequence[str] | None = None, pool: ParamPool | None = None,
          progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    if train_set is None:
        train_set, test_set, categories = split_dataset(config)
    categories = list(categories) if categories else [str(i) for i in range(1 + max(s.label for s in train_set))]
    model = build_model(config, len(categories), train_set[0].image.shape[0], pool)
    out = Path(config.out) if config.out else None

    frozen_eafp = model.mode == EAFP_ON and not model.trainable_eafp
    cached = None
    if frozen_eafp and config.augment is None:
        # frozen preprocessing of un-augmented data: compute it once
        model.eafp.set_mode("inference")
        with no_grad():
            cached = {id(s): eafp_forward(Tensor(s.image[None]), model.eafp).data[0] for s in train_set}

        def source(epoch):
            for x, y, idx in _indexed_batches(train_set, config, epoch):
                yield np.stack([cached[id(train_set[i])] for i in idx]), y
    else:
        source = None

    def forward(x, training):
        t = Tensor(x)
        if training and cached is not None:
            return model.backbone.forward(t)
        if frozen_eafp:
            with no_grad():
                t = Tensor(model.preprocess(t).data)
            return model.backbone.forward(t)
        return model(t)

    def set_mode(training):
        model.train() if training else model.eval()

    best = {"acc": -1.0, "epoch": -1}

    def on_epoch(rec: EpochRecord):
        if rec.test_accuracy > best["acc"]:
            best.update(acc=rec.test_accuracy, epoch=rec.epoch)
            if out:
                model.save(out / "best", {"epoch": rec.epoch, "test_accuracy": rec.test_accuracy,
                                          "categories": categories})
        if progress:
            progress(rec)

    records = _fit(forward, model.parameters(), set_mode, train_set, test_set, config, on_epoch,
                   batch_source=source)
    model.eval()
    if out:
        model.save(out / "final", {"epoch": records[-1].epoch, "test_accuracy": records[-1].test_accuracy,
                                   "categories": categories})
        write_curves(out, records)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(out)
    return TrainResult(model, records, best["epoch"], categories, test_set)


def _indexed_batches(samples, config, epoch):
    order_seed = int(np.random.SeedSequence((config.seed, epoch)).generate_state(1)[0])
    order = np.random.default_rng(order_seed).permutation(len(samples))
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        yield None, np.array([samples[i].label for i in idx], dtype=np.int64), idx


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    report: MetricReport
    probabilities: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray


def evaluate(model: ClassifierModel, samples: Sequence[Sample], categories: Sequence[str],
             out: str | os.PathLike | None = None, emit_roc: bool = True, batch_size: int = 16) -> Evaluation:
    x, y = _stack(samples)
    preds, probs = [], []
    for start in range(0, len(y), batch_size):
        p, pr = predict(model, x[start : start + batch_size])
        preds.append(p)
        probs.append(pr)
    preds = np.concatenate(preds)
    probs = np.concatenate(probs)
    cm = ConfusionMatrix.from_decisions(y.tolist(), preds.tolist(), len(categories), categories)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = MetricReport.from_confusion(cm)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.csv").write_text(cm.to_csv())
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
        if emit_roc:
            for k, cat in enumerate(categories):
                if 0 < int((y == k).sum()) < len(y):
                    (out / f"roc_{k}.csv").write_text(roc_points(probs[:, k], y, k).to_csv())
        write_manifest(out)
    return Evaluation(cm, report, probs, y, preds)


# --------------------------------------------------------------------------
# artifacts


def curves_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy"])
    for r in records:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.train_accuracy), repr(r.test_loss), repr(r.test_accuracy)])
    return buf.getvalue()


_TRAIN_COLOR = (31, 119, 180)
_TEST_COLOR = (214, 39, 40)


def _panel(series: Sequence[Sequence[float]], colors, height: int, width: int, lo: float, hi: float) -> np.ndarray:
    img = np.full((height, width, 3), 255, np.uint8)
    img[[0, -1], :] = 0
    img[:, [0, -1]] = 0
    span = hi - lo if hi > lo else 1.0
    for values, color in zip(series, colors):
        n = len(values)
        xs = np.linspace(2, width - 3, max(n, 2))[:n]
        ys = [height - 3 - (v - lo) / span * (height - 5) for v in values]
        pts = list(zip(xs, ys)) if n > 1 else [(xs[0], ys[0])] * 2
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 2
            for t in np.linspace(0, 1, steps):
                r = int(round(y0 + (y1 - y0) * t))
                c = int(round(x0 + (x1 - x0) * t))
                img[max(r - 1, 0) : r + 1, c : c + 1] = color
    return img


def render_curves(records: Sequence[EpochRecord], height: int = 160, width: int = 320) -> np.ndarray:
    """Accuracy panel above loss panel; train in blue, test in red."""
    if not records:
        raise ValueError("no epoch records to plot")
    acc = _panel([[r.train_accuracy for r in records], [r.test_accuracy for r in records]],
                 (_TRAIN_COLOR, _TEST_COLOR), height, width, 0.0, 1.0)
    losses = [r.train_loss for r in records] + [r.test_loss for r in records]
    loss = _panel([[r.train_loss for r in records], [r.test_loss for r in records]],
                  (_TRAIN_COLOR, _TEST_COLOR), height, width, 0.0, max(losses))
    gap = np.full((6, width, 3), 255, np.uint8)
    return np.concatenate([acc, gap, loss])


def write_curves(out: Path, records: Sequence[EpochRecord]) -> None:
    (out / "curves.csv").write_text(curves_csv(records))
    netpbm.write_u8(out / "curves.ppm", render_curves(records))


def read_curves(path: str | os.PathLike) -> list[EpochRecord]:
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_accuracy"]),
                        float(r["test_loss"]), float(r["test_accuracy"])) for r in rows]


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: str | os.PathLike) -> Path:
    """List every file under ``out`` (except the manifest) with its sha256."""
    out = Path(out)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    doc = {"files": [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size}
                     for p in files]}
    target = out / "manifest.json"
    target.write_text(json.dumps(doc, indent=2) + "\n")
    return target
