"""Experiment configs, model builders, optimizers, and training loops.

Three architectures share one feature extractor: a softmax classifier head
(baseline), a capsule head on a frozen extractor, and a capsule head with the
trailing extractor layers trainable. Hyperparameters are validated against a
fixed search grid so every run is reproducible from a flat config file.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .capsules import ClassCapsules, PrimaryCapsules, capsule_predict, margin_loss
from .data import batch_iter
from .layers import (
    Dropout,
    Flatten,
    FullyConnected,
    Module,
    ReLU,
    build_extractor,
    freeze_except_last,
    parameterized_layers,
    seed_dropout,
    set_trainable,
)
from .metrics import compute_report, confusion
from .tensor import Tensor, log as tlog, no_grad, softmax

EXPERIMENTS = ("baseline", "frozen_hybrid", "unfrozen_hybrid")

# Search domains for the hyperparameter sweep. Values outside these domains
# are rejected at config construction so logged runs stay comparable.
GRID = {
    "optimizer": ("adam", "rmsprop"),
    "learning_rate": (0.01, 0.0001, 0.00001),
    "dropout_rate": (0.4, 0.6, 0.8),
    "l2_weight": (0.001, 0.0001, 0.00001),
    "batch_size": (50, 100, 150),
    "primary_kernel": (2, 3, 5),
    "primary_stride": (1, 2),
    "unfrozen_layers": (10, 20, 30),
}

SWEPT_FIELDS = tuple(GRID)

CE_EPS = 1e-12


class ConfigError(ValueError):
    """Config validation failure carrying every problem found, not just the first."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def feature_spatial(input_size: int) -> int:
    """Spatial side of the extractor output for a square input."""
    s = (input_size - 1) // 2 + 1  # 7x7 stride-2 stem conv, padding 3
    return (s // 2) // 2  # two transition average-pools


@dataclass
class ExperimentConfig:
    experiment: str
    optimizer: str = "adam"
    learning_rate: float = 0.0001
    dropout_rate: float = 0.4
    l2_weight: float = 0.0001
    batch_size: int = 50
    primary_kernel: int = 3
    primary_stride: int = 1
    unfrozen_layers: int = 20
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    input_size: int = 224
    hidden_units: int = 256
    capsule_channels: int = 8
    primary_dim: int = 8
    class_dim: int = 16
    routing_iters: int = 3
    num_classes: int = 9

    def __post_init__(self):
        if self.experiment == "frozen_hybrid":
            self.unfrozen_layers = 0
        errors = self.validate()
        if errors:
            raise ConfigError(errors)

    @property
    def dropout_keep(self) -> float:
        return 1.0 - self.dropout_rate

    def validate(self) -> list[str]:
        errors = []
        if self.experiment not in EXPERIMENTS:
            errors.append(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        for name in SWEPT_FIELDS:
            if name == "unfrozen_layers" and self.experiment == "frozen_hybrid":
                continue
            value = getattr(self, name)
            if value not in GRID[name]:
                errors.append(f"{name} must be one of {GRID[name]}, got {value!r}")
        for name, minimum in (
            ("max_epochs", 1),
            ("early_stop_patience", 1),
            ("seed", 0),
            ("hidden_units", 1),
            ("capsule_channels", 1),
            ("primary_dim", 1),
            ("class_dim", 1),
            ("routing_iters", 1),
            ("num_classes", 2),
            ("input_size", 8),
        ):
            if getattr(self, name) < minimum:
                errors.append(f"{name} must be >= {minimum}, got {getattr(self, name)}")
        if self.experiment != "baseline" and self.input_size >= 8:
            feat = feature_spatial(self.input_size)
            if feat < self.primary_kernel:
                errors.append(
                    f"input_size {self.input_size} leaves a {feat}x{feat} feature map, "
                    f"smaller than primary_kernel {self.primary_kernel}"
                )
        return errors


_PARSERS = {"str": str, "int": int, "float": float}


def write_config(config: ExperimentConfig, path: str):
    """Write a config as flat ``key = value`` lines."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(ExperimentConfig)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_config(pairs: dict[str, str]) -> ExperimentConfig:
    """Build a validated config from string key-value pairs."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    errors = []
    kwargs = {}
    for key, raw in pairs.items():
        if key not in known:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            kwargs[key] = _PARSERS[known[key]](raw)
        except ValueError:
            errors.append(f"cannot parse {key} value {raw!r} as {known[key]}")
    if "experiment" not in pairs:
        errors.append("missing required key: experiment")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(**kwargs)


def read_config(path: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a flat key-value config file, applying ``overrides`` on top."""
    pairs = {}
    errors = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                errors.append(f"line {lineno}: expected 'key = value', got {line!r}")
                continue
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    if errors:
        raise ConfigError(errors)
    pairs.update(overrides or {})
    return parse_config(pairs)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of one-hot ``targets`` under ``probs``."""
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets))
    return -(t * tlog(probs + CE_EPS)).sum(axis=1).mean()


def _gap(feats: Tensor) -> Tensor:
    """Global average pool: (N, C, H, W) -> (N, C)."""
    n, c, h, w = feats.shape
    return feats.reshape(n, c, h * w).mean(axis=2)


class BaselineModel(Module):
    """Extractor feeding a hidden fully connected layer and a softmax head."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.num_classes = config.num_classes
        self.extractor = build_extractor(rng=rng)
        feat = feature_spatial(config.input_size)
        flat = self.extractor.out_channels * feat * feat
        self.flatten = Flatten()
        self.hidden = FullyConnected(flat, config.hidden_units,
                                     l2_weight=config.l2_weight, rng=rng)
        self.act = ReLU()
        self.dropout = Dropout(config.dropout_keep)
        self.head = FullyConnected(config.hidden_units, config.num_classes,
                                   l2_weight=config.l2_weight, rng=rng)
        total = len(parameterized_layers(self.extractor))
        freeze_except_last(self.extractor, min(config.unfrozen_layers, total))
        seed_dropout(self, config.seed)

    def features(self, x: Tensor) -> Tensor:
        return self.extractor(x)

    def head_forward(self, feats: Tensor) -> Tensor:
        h = self.dropout(self.act(self.hidden(self.flatten(feats))))
        return softmax(self.head(h), axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.head_forward(self.features(x))

    def data_loss(self, probs: Tensor, targets) -> Tensor:
        return cross_entropy(probs, targets)

    def penalty(self) -> Tensor:
        return self.hidden.penalty() + self.head.penalty()

    def predict_from(self, probs: Tensor) -> np.ndarray:
        return probs.data.argmax(axis=1)


class HybridModel(Module):
    """Extractor feeding primary capsules and a routed class-capsule layer.

    The frozen variant keeps every extractor weight fixed and applies no
    dropout; the unfrozen variant trains the trailing extractor layers and
    drops extractor activations before the capsule stack.
    """

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.num_classes = config.num_classes
        self.frozen = config.experiment == "frozen_hybrid"
        self.extractor = build_extractor(rng=rng)
        feat = feature_spatial(config.input_size)
        self.dropout = None if self.frozen else Dropout(config.dropout_keep)
        self.primary = PrimaryCapsules(self.extractor.out_channels,
                                       config.capsule_channels, config.primary_dim,
                                       config.primary_kernel, config.primary_stride,
                                       rng=rng)
        side = (feat - config.primary_kernel) // config.primary_stride + 1
        self.classcaps = ClassCapsules(config.capsule_channels * side * side,
                                       config.primary_dim, config.num_classes,
                                       config.class_dim, config.routing_iters,
                                       rng=rng)
        if self.frozen:
            set_trainable(self.extractor, "all", False)
        else:
            total = len(parameterized_layers(self.extractor))
            freeze_except_last(self.extractor, min(config.unfrozen_layers, total))
        seed_dropout(self, config.seed)

    def features(self, x: Tensor) -> Tensor:
        return self.extractor(x)

    def head_forward(self, feats: Tensor) -> Tensor:
        if self.dropout is not None:
            feats = self.dropout(feats)
        return self.classcaps(self.primary(feats))

    def forward(self, x: Tensor) -> Tensor:
        return self.head_forward(self.features(x))

    def data_loss(self, vectors: Tensor, targets) -> Tensor:
        return margin_loss(vectors, targets)

    def penalty(self) -> Tensor:
        w = self.classcaps.weights
        return (w * w).sum() * self.config.l2_weight

    def predict_from(self, vectors: Tensor) -> np.ndarray:
        return capsule_predict(vectors)


def build_model(config: ExperimentConfig) -> Module:
    """Construct the model for ``config.experiment``, trainability applied."""
    if config.experiment == "baseline":
        return BaselineModel(config)
    if config.experiment in ("frozen_hybrid", "unfrozen_hybrid"):
        return HybridModel(config)
    raise ConfigError([f"experiment must be one of {EXPERIMENTS}, got {config.experiment!r}"])


class Adam:
    """Adam with bias correction over the trainable subset of ``params``."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"trainable parameter {i} has no gradient")
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class RMSprop:
    """RMSprop with decay 0.9 over the trainable subset of ``params``."""

    def __init__(self, params, lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.decay, self.eps = decay, eps
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"trainable parameter {i} has no gradient")
            g = p.grad
            self.v[i] = self.decay * self.v[i] + (1 - self.decay) * g * g
            p.data = p.data - self.lr * g / (np.sqrt(self.v[i]) + self.eps)


def make_optimizer(kind: str, params, lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "rmsprop":
        return RMSprop(params, lr)
    raise ValueError(f"optimizer must be one of {GRID['optimizer']}, got {kind!r}")


class EarlyStopper:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_value = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record epoch ``epoch`` (1-indexed); return True when training should stop."""
        if value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    wall_times: list[float] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss


LOG_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"


def write_training_log(log: TrainingLog, path: str):
    lines = [LOG_HEADER]
    for r in log.records:
        lines.append(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},"
                     f"{r.val_loss:.6f},{r.val_acc:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_training_log(path: str) -> TrainingLog:
    log = TrainingLog()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ValueError(f"unexpected log header {header!r}")
        for line in fh:
            e, tl, ta, vl, va = line.strip().split(",")
            log.records.append(EpochRecord(int(e), float(tl), float(ta),
                                           float(vl), float(va)))
    if log.records:
        log.best_epoch = min(log.records, key=lambda r: r.val_loss).epoch
    return log


@dataclass
class TrainResult:
    model: Module
    log: TrainingLog

    @property
    def best_epoch(self) -> int:
        return self.log.best_epoch

    @property
    def best_val_loss(self) -> float:
        return self.log.best_val_loss


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    x, y = data
    return np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.float32)


def _extract_features(model, x: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(model.features(Tensor(x[start:start + batch_size])).data)
    return np.concatenate(outs, axis=0)


def _eval_pass(model, forward, x: np.ndarray, y: np.ndarray, batch_size: int):
    """Average data loss plus (true, predicted) labels over one split."""
    model.eval()
    total = 0.0
    preds, trues = [], []
    with no_grad():
        for bx, by in batch_iter(x, y, batch_size, shuffle=False):
            out = forward(bx)
            total += model.data_loss(out, by).item() * bx.shape[0]
            preds.append(model.predict_from(out))
            trues.append(by.data.argmax(axis=1))
    model.train()
    preds = np.concatenate(preds)
    trues = np.concatenate(trues)
    return total / len(x), trues, preds


def evaluate(model, x, y, batch_size: int, class_names=None):
    """Run ``model`` over a split; returns (mean data loss, EvalReport)."""
    x, y = _as_xy((x, y))
    loss, trues, preds = _eval_pass(model, model.forward, x, y, batch_size)
    model.eval()
    cm = confusion(trues, preds, model.num_classes, class_names)
    return loss, compute_report(cm)


def train(config: ExperimentConfig, train_data, val_data,
          extractor_state: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Train a model per ``config``; early-stops on validation loss and
    restores the best-epoch weights before returning.

    When the extractor is fully frozen its features are computed once per
    split and the capsule head trains on the cached features.
    """
    xt, yt = _as_xy(train_data)
    xv, yv = _as_xy(val_data)
    model = build_model(config)
    if extractor_state is not None:
        model.extractor.load_state_dict(extractor_state)
    opt = make_optimizer(config.optimizer, model.parameters(), config.learning_rate)

    cached = isinstance(model, HybridModel) and model.frozen
    if cached:
        xt = _extract_features(model, xt, config.batch_size)
        xv = _extract_features(model, xv, config.batch_size)
        forward = model.head_forward
    else:
        forward = model.forward

    log = TrainingLog()
    stopper = EarlyStopper(config.early_stop_patience)
    best_state = None
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        model.train()
        loss_sum = 0.0
        correct = 0
        for bi, (bx, by) in enumerate(batch_iter(xt, yt, config.batch_size,
                                                 shuffle=True, seed=config.seed,
                                                 epoch=epoch)):
            out = forward(bx)
            data_loss = model.data_loss(out, by)
            value = data_loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite training loss {value} at epoch {epoch}, batch {bi}")
            loss = data_loss + model.penalty()
            model.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * bx.shape[0]
            correct += int((model.predict_from(out) == by.data.argmax(axis=1)).sum())
        val_loss, trues, preds = _eval_pass(model, forward, xv, yv, config.batch_size)
        log.records.append(EpochRecord(
            epoch, loss_sum / len(xt), correct / len(xt),
            val_loss, float((trues == preds).mean())))
        log.wall_times.append(time.perf_counter() - start)
        improved = val_loss < stopper.best_value
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = model.state_dict()
        if stop:
            break
    log.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, log=log)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]


def pretrain_extractor(extractor, train_data, epochs: int,
                       learning_rate: float = 0.001, batch_size: int = 100,
                       seed: int = 0, num_classes: int = 9):
    """Train ``extractor`` end to end on a labeled synthetic task.

    A softmax head over the flattened feature map is attached for the
    duration of training and discarded. Supervising the full map rather
    than its spatial average gives the convolutions a strong gradient from
    the first step, where a pooled head would idle on a long plateau while
    it hunts for signal in the averaged features. Returns (extractor state
    dict, per-epoch history rows of (epoch, loss, accuracy)).
    """
    x, y = train_data
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if y.ndim == 1:
        y = _one_hot(y, num_classes)
    set_trainable(extractor, "all", True)
    side = feature_spatial(x.shape[-1])
    head = FullyConnected(extractor.out_channels * side * side, num_classes,
                          rng=np.random.default_rng((seed, 101)))
    opt = Adam(extractor.parameters() + head.parameters(), learning_rate)
    history = []
    for epoch in range(1, epochs + 1):
        extractor.train()
        loss_sum = 0.0
        correct = 0
        for bi, (bx, by) in enumerate(batch_iter(x, y, batch_size, shuffle=True,
                                                 seed=seed, epoch=epoch)):
            feats = extractor(bx)
            probs = softmax(head(feats.reshape(feats.shape[0], -1)), axis=1)
            loss = cross_entropy(probs, by)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"pretraining diverged: loss {value} at epoch {epoch}, batch {bi}")
            extractor.zero_grad()
            head.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * bx.shape[0]
            correct += int((probs.data.argmax(axis=1) == by.data.argmax(axis=1)).sum())
        history.append((epoch, loss_sum / len(x), correct / len(x)))
    extractor.eval()
    return extractor.state_dict(), history


def extract_gap_features(extractor, x, batch_size: int = 100) -> np.ndarray:
    """Pooled extractor features for probing: (N, C, H, W) images -> (N, C)."""
    x = np.asarray(x, dtype=np.float32)
    extractor.eval()
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(_gap(extractor(Tensor(x[start:start + batch_size]))).data)
    return np.concatenate(outs, axis=0)


def linear_probe(train_feats, train_labels, eval_feats, eval_labels,
                 num_classes: int = 9, steps: int = 300,
                 learning_rate: float = 0.01, seed: int = 0) -> float:
    """Fit a softmax regression on frozen features; returns eval accuracy."""
    xt = Tensor(np.asarray(train_feats, dtype=np.float32))
    tt = Tensor(_one_hot(train_labels, num_classes))
    head = FullyConnected(xt.shape[1], num_classes, rng=np.random.default_rng((seed, 7)))
    opt = Adam(head.parameters(), learning_rate)
    for _ in range(steps):
        loss = cross_entropy(softmax(head(xt), axis=1), tt)
        head.zero_grad()
        loss.backward()
        opt.step()
    with no_grad():
        preds = head(Tensor(np.asarray(eval_feats, dtype=np.float32))).data.argmax(axis=1)
    return float((preds == np.asarray(eval_labels)).mean())


@dataclass
class SweepEntry:
    config: ExperimentConfig
    val_macro_f1: float
    best_val_loss: float
    log: TrainingLog


def sweep(base: ExperimentConfig, train_data, val_data, budget: int = 20,
          seed: int = 0, extractor_state: dict[str, np.ndarray] | None = None
          ) -> list[SweepEntry]:
    """Random search over the hyperparameter grid, ranked by validation macro F1.

    Evaluates the full grid when it fits in ``budget``, otherwise a seeded
    sample without replacement. Ties keep enumeration order.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    combos = list(itertools.product(*(GRID[f] for f in SWEPT_FIELDS)))
    if budget < len(combos):
        picks = np.random.default_rng((seed, 4242)).choice(
            len(combos), size=budget, replace=False)
        picks = sorted(int(i) for i in picks)
    else:
        picks = range(len(combos))
    entries = []
    for i in picks:
        cfg = replace(base, **dict(zip(SWEPT_FIELDS, combos[i])))
        result = train(cfg, train_data, val_data, extractor_state)
        xv, yv = _as_xy(val_data)
        _, report = evaluate(result.model, xv, yv, cfg.batch_size)
        entries.append(SweepEntry(cfg, report.macro_f1, result.best_val_loss, result.log))
    entries.sort(key=lambda e: -e.val_macro_f1)
    return entries


def render_ranking(entries: list[SweepEntry]) -> str:
    """Ranked sweep results as CSV, best first."""
    lines = ["rank,val_macro_f1," + ",".join(SWEPT_FIELDS)]
    for rank, e in enumerate(entries, 1):
        values = ",".join(str(getattr(e.config, f)) for f in SWEPT_FIELDS)
        lines.append(f"{rank},{e.val_macro_f1:.6f},{values}")
    return "\n".join(lines) + "\n"
