"""Training-set assembly and training for the five experiment systems.

=================  ===============  =====================
strategy           training rows    domain labels
=================  ===============  =====================
multi-dann         all sites        one class per site
single-dann        all sites        sources vs. target
source-baseline    all but target   none
target-baseline    target only      none
combined-baseline  all sites        none
=================  ===============  =====================

DANN models share one feature extractor ``g_f`` between a label head
``g_y`` and a domain head ``g_d``. A single backward pass per mini-batch
computes both losses; the gradient leaving ``g_d`` towards ``g_f`` is
passed through :func:`~msdann.nn.grad_reverse`, so ``g_f`` and ``g_y``
descend ``L_y - lambda * L_d`` while ``g_d`` descends ``L_d``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, EncodedBatch, assign_domains, encode, one_hot
from .errors import (
    ConfigurationError,
    NumericInputError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedOperationError,
)

CHECKPOINT_FORMAT = "msdann-checkpoint/1"


class StrategyKind(str, enum.Enum):
    MULTI_DANN = "multi-dann"
    SINGLE_DANN = "single-dann"
    SOURCE_BASELINE = "source-baseline"
    TARGET_BASELINE = "target-baseline"
    COMBINED_BASELINE = "combined-baseline"

    @property
    def is_dann(self) -> bool:
        return self in (StrategyKind.MULTI_DANN, StrategyKind.SINGLE_DANN)

    @classmethod
    def parse(cls, value) -> "StrategyKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"multi": "multi-dann", "single": "single-dann", "source": "source-baseline",
                   "target": "target-baseline", "combined": "combined-baseline"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown strategy {value!r}") from None


@dataclass
class TrainConfig:
    lam: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    optim: nn.OptimConfig = field(default_factory=nn.OptimConfig)
    seed: int = 0
    use_target_labels: bool = True
    hidden_width: int = 256
    depth: int = 2
    # "constant" or "warmup" (lambda * (2 / (1 + exp(-10 p)) - 1), p = training progress)
    lambda_schedule: str = "constant"
    stratify_domains: bool = False
    pos_weight: float = 1.0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = nn.OptimConfig(**self.optim)
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.hidden_width < 1 or self.depth < 1:
            raise ConfigurationError("hidden_width and depth must be positive")
        if self.lambda_schedule not in ("constant", "warmup"):
            raise ConfigurationError(f"unknown lambda_schedule {self.lambda_schedule!r}")
        if self.pos_weight <= 0:
            raise ConfigurationError("pos_weight must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        optim_keys = set(nn.OptimConfig.__dataclass_fields__)
        optim = dict(obj.pop("optim", {}) or {})
        for key in list(obj):
            if key in optim_keys:
                optim[key] = obj.pop(key)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config field(s): {sorted(unknown)}")
        try:
            return cls(optim=nn.OptimConfig(**optim), **obj)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def lambda_at(self, progress: float) -> float:
        if self.lambda_schedule == "warmup":
            return self.lam * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
        return self.lam


@dataclass
class TrainedModel:
    g_f: nn.Mlp
    g_y: nn.Mlp
    g_d: nn.Mlp | None
    strategy: StrategyKind
    target_er: str
    train_manifest: list[str]
    config: TrainConfig
    vocabulary: tuple[str, ...] = ()
    domain_names: tuple[str, ...] = ()

    @property
    def input_dim(self) -> int:
        return self.g_f.input_dim


@dataclass
class TrainLog:
    l_y: list[float] = field(default_factory=list)
    l_d: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    domain_acc: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.l_y)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "l_y", "l_d", "total", "domain_acc"])
            for k in range(len(self)):
                w.writerow([k + 1, repr(self.l_y[k]), repr(self.l_d[k]), repr(self.total[k]),
                            repr(self.domain_acc[k])])
        return path


_DOMAIN_MODE = {
    StrategyKind.MULTI_DANN: "multi",
    StrategyKind.SINGLE_DANN: "single",
}


def domain_names(train_ds: Dataset, target_er: str, kind: StrategyKind) -> tuple[str, ...]:
    kind = StrategyKind.parse(kind)
    if kind is StrategyKind.MULTI_DANN:
        return tuple(s for s in train_ds.site_registry if s != target_er) + (target_er,)
    if kind is StrategyKind.SINGLE_DANN:
        return ("sources", target_er)
    return ()


def assemble(train_ds: Dataset, target_er: str, kind) -> EncodedBatch:
    """Select and encode the training rows for ``kind`` (see module table)."""
    kind = StrategyKind.parse(kind)
    if target_er not in train_ds.site_registry:
        raise ConfigurationError(f"unknown target site {target_er!r}")
    if kind is StrategyKind.SOURCE_BASELINE:
        records = [r for r in train_ds.records if r.er_id != target_er]
    elif kind is StrategyKind.TARGET_BASELINE:
        records = [r for r in train_ds.records if r.er_id == target_er]
    else:
        records = list(train_ds.records)
    batch = encode(records, train_ds.vocabulary)
    if kind.is_dann:
        idx, n_domains = assign_domains(train_ds.subset(records), target_er, _DOMAIN_MODE[kind])
        batch.d = one_hot(idx, n_domains)
    return batch


def _build_nets(input_dim: int, n_domains: int, cfg: TrainConfig, dann: bool):
    # independent streams so g_f/g_y/shuffling do not depend on whether g_d exists
    ss_f, ss_y, ss_d, ss_shuffle = np.random.SeedSequence(cfg.seed).spawn(4)
    width, hidden = cfg.hidden_width, [cfg.hidden_width] * (cfg.depth - 1)
    g_f = nn.init_mlp(input_dim, hidden, width, np.random.default_rng(ss_f), output_activation="relu")
    g_y = nn.init_mlp(width, hidden, 2, np.random.default_rng(ss_y))
    g_d = nn.init_mlp(width, hidden, n_domains, np.random.default_rng(ss_d)) if dann else None
    return g_f, g_y, g_d, np.random.default_rng(ss_shuffle)


def _epoch_order(rng: np.random.Generator, n: int, domains: np.ndarray | None, stratify: bool):
    if not stratify or domains is None:
        return rng.permutation(n)
    # round-robin over domains so every mini-batch mixes sites
    pools = [rng.permutation(np.flatnonzero(domains == k)) for k in np.unique(domains)]
    longest = max(len(p) for p in pools)
    order = [p[i] for i in range(longest) for p in pools if i < len(p)]
    return np.asarray(order)


@dataclass
class StepResult:
    l_y: float
    l_d: float
    n_labeled: int
    domain_correct: int
    grad_f: nn.GradTape
    grad_y: nn.GradTape | None
    grad_d: nn.GradTape | None


def joint_gradients(g_f, g_y, g_d, x, y, d, lam: float, label_mask=None, pos_weight: float = 1.0,
                    reverse: bool = True) -> StepResult:
    """Forward both heads and backpropagate ``L_y - lam * L_d`` in one pass.

    Losses are means over the rows they cover (``label_mask`` selects rows
    for the label loss; the domain loss covers every row). With
    ``reverse=False`` the reversal layer is replaced by identity, i.e. the
    extractor is pushed to help the domain classifier; used by tests.
    """
    h, cache_f = nn.forward(g_f, x)
    upstream_h = np.zeros_like(h)

    n_labeled = len(y) if label_mask is None else int(label_mask.sum())
    l_y, grad_y = 0.0, None
    if n_labeled:
        rows = slice(None) if label_mask is None else label_mask
        probs_y, cache_y = nn.forward(g_y, h[rows])
        l_y = nn.bce_loss(probs_y[:, 1], y[rows], "mean", pos_weight)
        grad_y = nn.backward(g_y, cache_y, nn.label_head_grad(probs_y, y[rows], "mean", pos_weight))
        upstream_h[rows] += grad_y.input_grad

    l_d, grad_d, correct = float("nan"), None, 0
    if g_d is not None:
        probs_d, cache_d = nn.forward(g_d, h)
        l_d = nn.domain_ce_loss(probs_d, d, "mean")
        grad_d = nn.backward(g_d, cache_d, nn.domain_ce_grad(probs_d, d, "mean"))
        upstream_h += nn.grad_reverse(grad_d.input_grad, lam) if reverse else lam * grad_d.input_grad
        correct = int((probs_d.argmax(axis=1) == d.argmax(axis=1)).sum())

    grad_f = nn.backward(g_f, cache_f, upstream_h)
    return StepResult(l_y, l_d, n_labeled, correct, grad_f, grad_y, grad_d)


def train(batch: EncodedBatch, kind, cfg: TrainConfig, target_er: str | None = None,
          vocabulary=(), names=()) -> tuple[TrainedModel, TrainLog]:
    """Train the networks for ``kind`` on an assembled batch.

    Raises :class:`TrainingDivergedError` if a loss or a parameter becomes
    non-finite.
    """
    kind = StrategyKind.parse(kind)
    n = len(batch)
    if n == 0:
        raise ConfigurationError("cannot train on an empty batch")
    if cfg.batch_size > n:
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds training-set size {n}")
    if kind.is_dann and batch.d is None:
        raise ConfigurationError(f"{kind.value} needs domain labels in the batch")
    if target_er is None:
        if batch.d is not None and names:
            target_er = names[-1]
        else:
            raise ConfigurationError("target_er is required")

    dann = kind.is_dann
    g_f, g_y, g_d, rng = _build_nets(batch.x.shape[1], batch.n_domains, cfg, dann)
    states = [nn.OptimState(m) for m in (g_f, g_y, g_d) if m is not None]
    domains = batch.d.argmax(axis=1) if batch.d is not None else None

    label_mask = None
    if not cfg.use_target_labels:
        if batch.sites is None:
            raise ConfigurationError("use_target_labels=False needs per-row site ids")
        label_mask = batch.sites != target_er

    log = TrainLog()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(rng, n, domains, cfg.stratify_domains)
        sum_y = sum_d = 0.0
        n_y = correct = 0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            lam = cfg.lambda_at(step / total_steps)
            try:
                res = joint_gradients(
                    g_f, g_y, g_d, batch.x[rows], batch.y[rows],
                    None if batch.d is None else batch.d[rows], lam,
                    None if label_mask is None else label_mask[rows], cfg.pos_weight,
                )
            except NumericInputError as exc:
                # hidden activations overflowed after a bad step
                raise TrainingDivergedError(epoch + 1, "non-finite activations") from exc
            if not (math.isfinite(res.l_y) and (not dann or math.isfinite(res.l_d))):
                raise TrainingDivergedError(epoch + 1)
            nn.optim_step(g_f, res.grad_f, cfg.optim, states[0])
            if res.grad_y is not None:
                nn.optim_step(g_y, res.grad_y, cfg.optim, states[1])
            if dann:
                nn.optim_step(g_d, res.grad_d, cfg.optim, states[2])
            sum_y += res.l_y * res.n_labeled
            n_y += res.n_labeled
            if dann:
                sum_d += res.l_d * len(rows)
                correct += res.domain_correct
            step += 1
        if not all(m.is_finite() for m in (g_f, g_y, g_d) if m is not None):
            raise TrainingDivergedError(epoch + 1, "non-finite parameters")
        l_y = sum_y / n_y if n_y else 0.0
        l_d = sum_d / n if dann else float("nan")
        log.l_y.append(l_y)
        log.l_d.append(l_d)
        log.total.append(nn.total_objective(l_y, l_d, cfg.lam) if dann else l_y)
        log.domain_acc.append(correct / n if dann else float("nan"))

    model = TrainedModel(g_f, g_y, g_d, kind, target_er, list(batch.row_meta), cfg,
                         tuple(vocabulary), tuple(names))
    return model, log


def train_strategy(train_ds: Dataset, target_er: str, kind, cfg: TrainConfig):
    """Assemble and train in one call."""
    kind = StrategyKind.parse(kind)
    batch = assemble(train_ds, target_er, kind)
    return train(batch, kind, cfg, target_er, train_ds.vocabulary,
                 domain_names(train_ds, target_er, kind))


def _check_input(model: TrainedModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected features of shape (n, {model.input_dim}), got {x.shape}")
    return x


def predict_proba(model: TrainedModel, x) -> np.ndarray:
    """Positive-class probability (second softmax component of ``g_y``)."""
    x = _check_input(model, x)
    return nn.predict(model.g_y, nn.predict(model.g_f, x))[:, 1]


def domain_predict(model: TrainedModel, x) -> np.ndarray:
    if model.g_d is None:
        raise UnsupportedOperationError(f"{model.strategy.value} has no domain classifier")
    x = _check_input(model, x)
    return nn.predict(model.g_d, nn.predict(model.g_f, x))


# -- checkpoints ------------------------------------------------------------------

def checkpoint_dict(model: TrainedModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "strategy": model.strategy.value,
        "target_er": model.target_er,
        "lambda": model.config.lam,
        "seed": model.config.seed,
        "optimizer": asdict(model.config.optim),
        "train_config": model.config.to_dict(),
        "vocabulary": list(model.vocabulary),
        "domain_names": list(model.domain_names),
        "train_manifest": list(model.train_manifest),
        "g_f": nn.mlp_to_dict(model.g_f),
        "g_y": nn.mlp_to_dict(model.g_y),
        "g_d": None if model.g_d is None else nn.mlp_to_dict(model.g_d),
    }


def save_checkpoint(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model), indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> TrainedModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    return TrainedModel(
        g_f=nn.mlp_from_dict(obj["g_f"]),
        g_y=nn.mlp_from_dict(obj["g_y"]),
        g_d=None if obj["g_d"] is None else nn.mlp_from_dict(obj["g_d"]),
        strategy=StrategyKind.parse(obj["strategy"]),
        target_er=obj["target_er"],
        train_manifest=list(obj["train_manifest"]),
        config=TrainConfig.from_dict(obj["train_config"]),
        vocabulary=tuple(obj["vocabulary"]),
        domain_names=tuple(obj["domain_names"]),
    )
