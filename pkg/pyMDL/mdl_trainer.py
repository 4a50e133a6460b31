"""
Joint training of a multi-domain model.

Domains take turns in a fixed round-robin order. Each turn draws one batch of
a domain, computes the cross-entropy of that domain's logits and applies one
optimizer step restricted to ``trainable_params(model, domain)``: the live
shared filters plus the domain's own overlay. A round is one turn per domain;
the learning-rate schedule advances once per round, so a domain sees the same
sequence of updates whether it is trained alone or with others.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import pandas as pd
import torch
import torch.nn.functional as F
from safetensors.torch import load_file
from tqdm import tqdm

from pyMDL.mdl_checkpoint import save_checkpoint
from pyMDL.mdl_data import DomainDataset
from pyMDL.mdl_eval import evaluate
from pyMDL.mdl_net import (
    INIT_SCHEMES,
    MultiDomainModel,
    ParamRef,
    copy_shared_to_specific,
    init_head_random,
    init_shared_random,
    reset_bn,
    trainable_params,
)

__all__ = [
    "ShapeMismatchError",
    "DivergenceError",
    "TrainConfig",
    "InitSpec",
    "MetricRow",
    "MetricsHistory",
    "initialize",
    "train_joint",
]

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
LR_SCHEDULES = ("constant", "step", "cosine")


class ShapeMismatchError(ValueError):
    """A weight file does not fit the architecture; the message names the tensor."""


class DivergenceError(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


def _from_dict(cls, document: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(document) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**document)


@dataclass
class TrainConfig:
    """
    Optimization settings.

    ``steps`` counts rounds (one batch per domain). ``lr_schedule`` is
    ``{"type": "constant"}``, ``{"type": "step", "step_size": int, "gamma":
    float}`` or ``{"type": "cosine"}``. ``domain_order`` fixes the
    round-robin order (default: the model's domain order).
    """

    steps: int = 200
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: dict = field(
        default_factory=lambda: {"type": "step", "step_size": 100, "gamma": 0.1}
    )
    seed: int = 0
    eval_every: int = 50
    eval_batch_size: int = 256
    domain_order: list | None = None

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> TrainConfig:
        return _from_dict(cls, document)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def validate(self) -> TrainConfig:
        for name in ("steps", "batch_size", "eval_every", "eval_batch_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f'Invalid value for "optimizer": {self.optimizer}')
        kind = self.lr_schedule.get("type")
        if kind not in LR_SCHEDULES:
            raise ValueError(f'Invalid value for "lr_schedule.type": {kind}')
        if kind == "step":
            if int(self.lr_schedule.get("step_size", 0)) < 1:
                raise ValueError("lr_schedule.step_size must be a positive integer")
            if not 0 < float(self.lr_schedule.get("gamma", 0)) <= 1:
                raise ValueError("lr_schedule.gamma must lie in (0, 1]")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        return self


@dataclass
class InitSpec:
    """
    Initialization of a model.

    ``backbone_weights`` is a ``.safetensors`` or torch file with tensors
    ``L{layer}.weight`` (and ``L{layer}.bias`` for layers with bias);
    ``head_weights`` maps a domain id to a file with ``weight`` and ``bias``.
    Whatever is not given is drawn from ``seed`` with ``scheme``.
    """

    backbone_weights: str | None = None
    head_weights: dict = field(default_factory=dict)
    seed: int = 0
    scheme: str = "kaiming_normal"

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> InitSpec:
        return _from_dict(cls, document)

    def validate(self) -> InitSpec:
        if self.scheme not in INIT_SCHEMES:
            raise ValueError(f'Invalid value for "scheme": {self.scheme}')
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        return self


@dataclass(frozen=True)
class MetricRow:
    step: int
    domain_id: str
    split: str
    metric: str
    value: float


class MetricsHistory:
    """Metric rows ``(step, domain_id, split, metric, value)``."""

    columns = ("step", "domain_id", "split", "metric", "value")

    def __init__(self, rows=None):
        self.rows: list[MetricRow] = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricsHistory) and self.rows == other.rows

    def append(self, step, domain_id, split, metric, value) -> None:
        self.rows.append(MetricRow(int(step), domain_id, split, metric, float(value)))

    def series(self, domain_id, split, metric) -> list[tuple[int, float]]:
        return [
            (row.step, row.value)
            for row in self.rows
            if row.domain_id == domain_id and row.split == split and row.metric == metric
        ]

    def last(self, domain_id, split, metric) -> float | None:
        values = self.series(domain_id, split, metric)
        return values[-1][1] if values else None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows], columns=list(self.columns))

    def write(self, path: str | Path) -> Path:
        """Write the rows to a CSV file, replacing any earlier run's file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> MetricsHistory:
        frame = pd.read_csv(
            path, dtype={"domain_id": str}, keep_default_na=False, float_precision="round_trip"
        )
        if tuple(frame.columns) != cls.columns:
            raise ValueError(f"{path} is not a metrics history file")
        return cls(
            MetricRow(int(r.step), r.domain_id, r.split, r.metric, float(r.value))
            for r in frame.itertuples(index=False)
        )


################################################################################


def _load_tensors(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if path.suffix == ".safetensors":
        return load_file(str(path))
    tensors = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(tensors, Mapping):
        raise ValueError(f"{path} does not hold a mapping of named tensors")
    return dict(tensors)


def _assign(target: torch.Tensor, tensors, name, path) -> None:
    if name not in tensors:
        raise ShapeMismatchError(f"{path}: missing tensor {name!r}")
    source = tensors[name]
    if tuple(source.shape) != tuple(target.shape):
        raise ShapeMismatchError(
            f"{path}: tensor {name!r} has shape {tuple(source.shape)}, "
            f"expected {tuple(target.shape)}"
        )
    target.copy_(source)


@torch.no_grad()
def initialize(model: MultiDomainModel, init: InitSpec) -> MultiDomainModel:
    """
    Initialize a model for a controlled experiment.

    Shared filters come from ``init.backbone_weights`` when given, else from
    the seeded random scheme. Every domain's specific filters are then copied
    from the shared ones; heads come from ``init.head_weights`` when given,
    else from the seed; BN layers start as the identity with reset statistics.

    Raises
    ------
    ShapeMismatchError
        If a weight file lacks a tensor or a tensor has the wrong shape.
    """
    init.validate()
    unknown = set(init.head_weights) - set(model.domain_ids)
    if unknown:
        raise ValueError(f"Head weights given for unknown domains {sorted(unknown)}")

    if init.backbone_weights:
        tensors = _load_tensors(init.backbone_weights)
        for layer in model.arch.layers:
            key = f"L{layer.layer_id}"
            _assign(
                model.shared_weight[layer.layer_id], tensors, f"{key}.weight", init.backbone_weights
            )
            if key in model.shared_bias:
                _assign(model.shared_bias[key], tensors, f"{key}.bias", init.backbone_weights)
        logger.info("Loaded backbone weights from %s", init.backbone_weights)
    else:
        init_shared_random(model, init.seed, init.scheme)

    copy_shared_to_specific(model)
    reset_bn(model)

    for domain_id in model.domain_ids:
        path = init.head_weights.get(domain_id)
        if path is None:
            init_head_random(model, domain_id, init.seed)
            continue
        tensors = _load_tensors(path)
        head = model.overlays[domain_id].head
        _assign(head.weight, tensors, "weight", path)
        _assign(head.bias, tensors, "bias", path)
    return model


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    # weight decay is applied by _route_gradients on live rows only
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


def _make_scheduler(optimizer, cfg: TrainConfig):
    kind = cfg.lr_schedule["type"]
    if kind == "step":
        return torch.optim.lr_scheduler.StepLR(
            optimizer,
            step_size=int(cfg.lr_schedule["step_size"]),
            gamma=float(cfg.lr_schedule["gamma"]),
        )
    if kind == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.steps)
    return torch.optim.lr_scheduler.ConstantLR(optimizer, factor=1.0, total_iters=0)


def _route_gradients(model: MultiDomainModel, refs: list[ParamRef], weight_decay: float) -> None:
    """Drop gradients outside ``refs``, add weight decay and zero dead rows."""
    allowed = {id(ref.param) for ref in refs}
    for param in model.parameters():
        if param.grad is not None and id(param) not in allowed:
            param.grad = None
    for ref in refs:
        grad = ref.param.grad
        if grad is None:
            continue
        if weight_decay:
            grad.add_(ref.param.detach(), alpha=weight_decay)
        if ref.rows is not None:
            dead = torch.ones(grad.shape[0], dtype=torch.bool, device=grad.device)
            dead[ref.rows] = False
            grad[dead] = 0


def train_joint(
    model: MultiDomainModel,
    datasets: Mapping[str, DomainDataset],
    cfg: TrainConfig,
    progress: bool = False,
    dump_dir: str | Path | None = None,
) -> tuple[MultiDomainModel, MetricsHistory]:
    """
    Train all domains of a model jointly.

    Parameters
    ----------
    model : MultiDomainModel
        Initialized model; trained in place.
    datasets : dict
        ``domain_id -> DomainDataset``, exactly the model's domains.
    cfg : TrainConfig
    progress : bool
        Show a progress bar.
    dump_dir : str or Path, optional
        Where to save the model state if training diverges.

    Returns
    -------
    model : MultiDomainModel
    history : MetricsHistory
        Train loss of every step and validation accuracy every
        ``cfg.eval_every`` rounds and after the last round.

    Raises
    ------
    ValueError
        Domains do not match, a split is empty or a label is out of range.
    DivergenceError
        The loss became non-finite.
    """
    cfg.validate()
    if set(datasets) != set(model.domain_ids):
        raise ValueError(
            f"Datasets cover {sorted(datasets)}, model domains are {sorted(model.domain_ids)}"
        )
    order = list(cfg.domain_order or model.domain_ids)
    if sorted(order) != sorted(model.domain_ids):
        raise ValueError(f"domain_order {order} is not a permutation of {list(model.domain_ids)}")
    for domain_id in order:
        dataset = datasets[domain_id]
        if dataset.n_train == 0 or dataset.n_val == 0:
            raise ValueError(f"Domain {domain_id!r} has an empty split")
        if dataset.num_classes != model.heads[domain_id].num_classes:
            raise ValueError(
                f"Domain {domain_id!r} has {dataset.num_classes} classes, "
                f"its head {model.heads[domain_id].num_classes}"
            )

    optimizer = _make_optimizer(list(model.parameters()), cfg)
    scheduler = _make_scheduler(optimizer, cfg)
    batches = {d: datasets[d].train_batches(cfg.batch_size, cfg.seed) for d in order}
    refs = {d: trainable_params(model, d) for d in order}
    history = MetricsHistory()

    model.train()
    for step in tqdm(range(1, cfg.steps + 1), desc=model.plan.strategy, disable=not progress):
        for domain_id in order:
            batch = next(batches[domain_id])
            batch.check(model.heads[domain_id].num_classes)
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(batch.inputs, domain_id), batch.labels)
            if not math.isfinite(loss.item()):
                dump_path = None
                if dump_dir is not None:
                    dump_path = save_checkpoint(model, Path(dump_dir) / "diverged")
                raise DivergenceError(
                    f"Loss of domain {domain_id!r} became {loss.item()} at round {step}",
                    dump_path,
                )
            loss.backward()
            _route_gradients(model, refs[domain_id], cfg.weight_decay)
            optimizer.step()
            history.append(step, domain_id, "train", "loss", loss.item())
        scheduler.step()

        if step % cfg.eval_every == 0 or step == cfg.steps:
            accuracy = evaluate(model, {d: datasets[d] for d in order}, cfg.eval_batch_size)
            for domain_id, value in accuracy.items():
                history.append(step, domain_id, "val", "accuracy", value)
            logger.info(
                "round %d: %s",
                step,
                ", ".join(f"{d}={v:.4f}" for d, v in accuracy.items()),
            )
    model.eval()
    return model, history
