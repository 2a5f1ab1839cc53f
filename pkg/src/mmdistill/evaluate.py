"""Downstream evaluation: train fresh classifiers on a small set, test on real data.

Accuracies are fractions in [0, 1]. Aggregation uses the population standard
deviation over exactly the seeds that were run, computed with ``math.fsum`` so
that re-deriving the aggregate from the per-seed CSV gives the same floats.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import Dataset, Split
from .models import ARCHS, Classifier, Params, make_transfer_arch
from .tensor import SGD

log = logging.getLogger(__name__)

BASELINES = ("random_real_ipc", "noise_init", "full_data_ceiling")


class EvalError(RuntimeError):
    pass


@dataclass
class EvalConfig:
    archs: tuple = ("convnet",)
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    num_seeds: int = 5
    seed: int = 0
    use_captions: bool = False
    width: int | None = None
    baselines: tuple = BASELINES
    # the ceiling trains on thousands of images, so it gets its own epoch budget
    ceiling_epochs: int = 5
    ceiling_batch_size: int = 64

    def validate(self) -> None:
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be >= 1")
        if self.epochs < 1 or self.ceiling_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.ceiling_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        bad = [a for a in self.archs if a not in ARCHS]
        if bad or not self.archs:
            raise ValueError(f"unknown architecture(s) {bad}; valid names: {', '.join(ARCHS)}")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ValueError(f"unknown baseline(s) {bad}; valid names: {', '.join(BASELINES)}")

    @property
    def seeds(self) -> list:
        return [self.seed + i for i in range(self.num_seeds)]


@dataclass
class TrainedModel:
    net: Classifier
    params: Params
    losses: list   # mean training loss per epoch


def _arch_stream(seed: int, arch: str, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(arch.encode()), zlib.crc32(tag.encode())])


def train_on_distilled(train_set, arch: str, cfg: EvalConfig, seed: int, *, num_classes: int,
                       epochs: int | None = None, batch_size: int | None = None,
                       tag: str = "eval") -> TrainedModel:
    """Train a fresh ``arch`` on ``train_set`` (anything with images/labels/captions).

    One epoch is one shuffled pass over the whole set in minibatches of
    ``batch_size``. Deterministic for a given (seed, arch, tag).
    """
    images = np.asarray(train_set.images, dtype=np.float64)
    labels = np.asarray(train_set.labels, dtype=np.int64)
    if len(labels) == 0:
        raise EvalError("cannot train on an empty set")
    captions = None
    if cfg.use_captions:
        captions = getattr(train_set, "captions", None)
        if captions is None or len(captions) != len(labels):
            raise EvalError("use_captions is set but the training set has no caption embeddings")
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    cap_dim = captions.shape[1] if captions is not None else 0
    net = make_transfer_arch(arch, images.shape[1:], num_classes, caption_dim=cap_dim, width=cfg.width)
    rng = _arch_stream(seed, arch, tag)
    params = net.init(rng)
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    n = len(labels)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            caps = captions[idx] if captions is not None else None
            loss = T.softmax_cross_entropy(net.classify(params, images[idx], caps), labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise EvalError(f"non-finite training loss for {arch} at epoch {epoch}")
            opt.step(T.backward(loss, params))
            total += value * len(idx)
        losses.append(total / n)
    return TrainedModel(net, params, losses)


def predict(model: TrainedModel, images: np.ndarray, captions=None, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            caps = None if captions is None else captions[s:s + batch_size]
            logits = model.net.classify(model.params, images[s:s + batch_size], caps)
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def test_accuracy(model: TrainedModel, split: Split, use_captions: bool = False) -> float:
    """Argmax accuracy; with captions each test image gets its own embedding."""
    if len(split) == 0:
        raise EvalError("test split is empty")
    pred = predict(model, split.images, split.captions if use_captions else None)
    return float(np.mean(pred == split.labels))


test_accuracy.__test__ = False  # not a pytest test


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class _Set:
    images: np.ndarray
    labels: np.ndarray
    captions: np.ndarray


def random_real_set(dataset: Dataset, ipc: int, seed: int) -> _Set:
    train = dataset.train
    rng = np.random.default_rng([seed, 101])
    idx = np.concatenate([rng.permutation(train.class_indices(c))[:ipc] for c in range(dataset.num_classes)])
    labels = train.labels[idx]
    return _Set(train.images[idx], labels, dataset.class_mean_captions("train")[labels])


def noise_set(dataset: Dataset, ipc: int, seed: int) -> _Set:
    rng = np.random.default_rng([seed, 202])
    labels = np.repeat(np.arange(dataset.num_classes), ipc)
    images = rng.uniform(0.0, 1.0, size=(len(labels),) + tuple(dataset.image_shape))
    return _Set(images, labels, dataset.class_mean_captions("train")[labels])


# ---------------------------------------------------------------------------
# protocol and report
# ---------------------------------------------------------------------------

def mean_std(values) -> tuple[float, float]:
    """Mean and population std via ``math.fsum``."""
    values = [float(v) for v in values]
    n = len(values)
    m = math.fsum(values) / n
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / n)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # dicts with method, arch, seed, accuracy

    def add(self, method: str, arch: str, seed: int, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise EvalError(f"accuracy {accuracy} outside [0, 1]")
        self.rows.append({"method": method, "arch": arch, "seed": int(seed), "accuracy": float(accuracy)})

    def accuracies(self, method: str, arch: str = "convnet") -> list:
        return [r["accuracy"] for r in self.rows if r["method"] == method and r["arch"] == arch]

    def aggregate(self) -> list:
        """One dict per (method, arch) in first-seen order with mean, std, n."""
        keys = list(dict.fromkeys((r["method"], r["arch"]) for r in self.rows))
        out = []
        for method, arch in keys:
            accs = self.accuracies(method, arch)
            m, s = mean_std(accs)
            out.append({"method": method, "arch": arch, "mean": m, "std": s, "n": len(accs)})
        return out

    def mean(self, method: str, arch: str = "convnet") -> float:
        return mean_std(self.accuracies(method, arch))[0]

    def summary(self) -> str:
        agg = self.aggregate()
        w = max([len(a["method"]) for a in agg] + [6])
        lines = [f"{'method':<{w}}  {'arch':<8}  {'mean':>7}  {'std':>6}  n"]
        for a in agg:
            lines.append(f"{a['method']:<{w}}  {a['arch']:<8}  {100 * a['mean']:7.2f}  {100 * a['std']:6.2f}  {a['n']}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "per_seed.csv", ["method", "arch", "seed", "accuracy"],
                  [[r["method"], r["arch"], r["seed"], repr(r["accuracy"])] for r in self.rows])
        write_csv(out / "aggregate.csv", ["method", "arch", "mean", "std"],
                  [[a["method"], a["arch"], repr(a["mean"]), repr(a["std"])] for a in self.aggregate()])
        (out / "summary.txt").write_text(self.summary())
        return out

    @classmethod
    def read(cls, path) -> "EvalReport":
        rep = cls()
        with open(Path(path) / "per_seed.csv", newline="") as fh:
            for r in csv.DictReader(fh):
                rep.add(r["method"], r["arch"], int(r["seed"]), float(r["accuracy"]))
        return rep


def write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_protocol(dataset: Dataset, synthetic, cfg: EvalConfig, method: str = "distilled",
                 report: EvalReport | None = None) -> EvalReport:
    """Evaluate ``synthetic`` on every arch and seed, plus the configured baselines.

    Baselines train a ConvNet; random/noise sets use the same IPC as
    ``synthetic`` and, with captions on, class-mean caption embeddings.
    """
    cfg.validate()
    report = EvalReport() if report is None else report
    C = dataset.num_classes
    ipc = len(synthetic.labels) // C
    test = dataset.test
    for arch in cfg.archs:
        for seed in cfg.seeds:
            model = train_on_distilled(synthetic, arch, cfg, seed, num_classes=C)
            acc = test_accuracy(model, test, cfg.use_captions)
            log.info("%s %s seed %d: %.4f", method, arch, seed, acc)
            report.add(method, arch, seed, acc)
    for name in cfg.baselines:
        for seed in cfg.seeds:
            if name == "random_real_ipc":
                model = train_on_distilled(random_real_set(dataset, ipc, seed), "convnet", cfg, seed,
                                           num_classes=C, tag=name)
            elif name == "noise_init":
                model = train_on_distilled(noise_set(dataset, ipc, seed), "convnet", cfg, seed,
                                           num_classes=C, tag=name)
            else:
                model = train_on_distilled(dataset.train, "convnet", cfg, seed, num_classes=C,
                                           epochs=cfg.ceiling_epochs, batch_size=cfg.ceiling_batch_size,
                                           tag=name)
            report.add(name, "convnet", seed, test_accuracy(model, test, cfg.use_captions))
    return report
