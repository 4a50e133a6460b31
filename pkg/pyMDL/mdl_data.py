"""
Domain datasets for desk-scale experiments.

A domain is either generated (class prototypes plus noise, with per-domain
input statistics) or taken from a small torchvision dataset, resized and
channel-adapted to the experiment's input shape. Public datasets are cached
under ``$PYMDL_DATA_DIR`` (default ``~/.cache/pyMDL``)::

    $PYMDL_DATA_DIR/
        MNIST/raw/...
        CIFAR10/cifar-10-batches-py/...
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from pyMDL.mdl_archspec import check_identifier
from pyMDL.mdl_net import DomainBatch
from pyMDL.mdl_seeding import torch_generator

__all__ = [
    "DATA_DIR_ENV",
    "TORCHVISION_SOURCES",
    "data_dir",
    "DomainSource",
    "DomainDataset",
    "synthetic_domain",
    "torchvision_domain",
    "build_datasets",
]

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "PYMDL_DATA_DIR"

TORCHVISION_SOURCES = ("MNIST", "FashionMNIST", "KMNIST", "CIFAR10", "SVHN")


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "pyMDL")).expanduser()


@dataclass(frozen=True)
class DomainSource:
    """
    Where a domain's data comes from.

    ``source`` is ``"synthetic"`` or ``"torchvision:<name>"`` with a name in
    ``TORCHVISION_SOURCES``. ``contrast`` and ``offset`` shape the input
    statistics of synthetic domains; left at ``None`` they are drawn from the
    domain seed.
    """

    domain_id: str
    source: str = "synthetic"
    num_classes: int = 10
    n_train: int = 512
    n_val: int = 256
    seed: int = 0
    noise: float = 0.5
    contrast: float | None = None
    offset: float | None = None

    def __post_init__(self):
        check_identifier(self.domain_id, "domain_id")
        if self.source != "synthetic":
            kind, _, name = self.source.partition(":")
            if kind != "torchvision" or name not in TORCHVISION_SOURCES:
                raise ValueError(
                    f"Domain {self.domain_id!r}: unknown source {self.source!r} "
                    f"(use 'synthetic' or 'torchvision:<{'|'.join(TORCHVISION_SOURCES)}>')"
                )
        if self.num_classes < 2:
            raise ValueError(f"Domain {self.domain_id!r} needs at least 2 classes")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError(f"Domain {self.domain_id!r} needs non-empty train and val splits")

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> DomainSource:
        known = {f.name for f in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ValueError(f"Unknown domain fields: {sorted(unknown)}")
        return cls(**document)


@dataclass
class DomainDataset:
    """Labeled train and validation splits of one domain."""

    domain_id: str
    num_classes: int
    train_inputs: torch.Tensor
    train_labels: torch.Tensor
    val_inputs: torch.Tensor
    val_labels: torch.Tensor
    source: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        for split, labels in (("train", self.train_labels), ("val", self.val_labels)):
            if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= self.num_classes):
                raise ValueError(
                    f"Domain {self.domain_id!r}: {split} labels must lie in [0, {self.num_classes})"
                )

    @property
    def n_train(self) -> int:
        return int(self.train_labels.shape[0])

    @property
    def n_val(self) -> int:
        return int(self.val_labels.shape[0])

    def train_batches(self, batch_size: int, seed: int) -> Iterator[DomainBatch]:
        """
        Endless shuffled training batches.

        The order depends only on ``seed`` and the domain id, epoch after
        epoch, so the k-th batch is the same in any run with the same seed.
        """
        if self.n_train == 0:
            raise ValueError(f"Domain {self.domain_id!r} has an empty train split")
        size = min(batch_size, self.n_train)
        loader = DataLoader(
            TensorDataset(self.train_inputs, self.train_labels),
            batch_size=size,
            shuffle=True,
            drop_last=True,
            generator=torch_generator(seed, "batches", self.domain_id),
        )
        while True:
            for inputs, labels in loader:
                yield DomainBatch(self.domain_id, inputs, labels)

    def val_batches(self, batch_size: int) -> Iterator[DomainBatch]:
        for start in range(0, self.n_val, batch_size):
            yield DomainBatch(
                self.domain_id,
                self.val_inputs[start : start + batch_size],
                self.val_labels[start : start + batch_size],
            )


################################################################################


def synthetic_domain(
    source: DomainSource, image_size: int = 16, channels: int = 3
) -> DomainDataset:
    """
    Generate a domain of prototype images plus Gaussian noise.

    Each class has a smooth random prototype (a 4x4 pattern upsampled to
    ``image_size``); samples are prototype plus ``noise`` times white noise,
    then scaled by ``contrast`` and shifted by ``offset``. Classes are
    balanced in both splits.
    """
    generator = torch_generator(source.seed, "synthetic", source.domain_id)
    coarse = torch.randn(source.num_classes, channels, 4, 4, generator=generator)
    prototypes = F.interpolate(
        coarse, size=(image_size, image_size), mode="bilinear", align_corners=False
    )
    prototypes = prototypes / prototypes.flatten(1).std(dim=1).view(-1, 1, 1, 1)

    contrast, offset = torch.rand(2, generator=generator).tolist()
    contrast = 0.5 + 1.5 * contrast if source.contrast is None else source.contrast
    offset = 2.0 * offset - 1.0 if source.offset is None else source.offset

    def draw(n):
        labels = torch.arange(n) % source.num_classes
        labels = labels[torch.randperm(n, generator=generator)]
        noise = torch.randn(n, channels, image_size, image_size, generator=generator)
        images = prototypes[labels] + source.noise * noise
        return contrast * images + offset, labels

    train_inputs, train_labels = draw(source.n_train)
    val_inputs, val_labels = draw(source.n_val)
    return DomainDataset(
        domain_id=source.domain_id,
        num_classes=source.num_classes,
        train_inputs=train_inputs,
        train_labels=train_labels,
        val_inputs=val_inputs,
        val_labels=val_labels,
        source="synthetic",
        seed=source.seed,
    )


def _as_tensors(dataset) -> tuple[torch.Tensor, torch.Tensor]:
    data = dataset.data
    labels = getattr(dataset, "targets", None)
    if labels is None:
        labels = dataset.labels
    data = torch.as_tensor(np.asarray(data))
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if data.dim() == 3:
        data = data.unsqueeze(1)
    elif data.shape[-1] in (1, 3) and data.shape[1] not in (1, 3):
        data = data.permute(0, 3, 1, 2)
    return data.float() / 255.0, labels


def _subset(images, labels, n, generator):
    order = torch.randperm(labels.shape[0], generator=generator)[:n]
    return images[order], labels[order]


def _adapt(images, image_size, channels):
    if images.shape[1] != channels:
        if channels == 1:
            images = images.mean(dim=1, keepdim=True)
        else:
            images = images[:, :1].expand(-1, channels, -1, -1)
    if images.shape[-1] != image_size or images.shape[-2] != image_size:
        images = F.interpolate(
            images, size=(image_size, image_size), mode="bilinear", align_corners=False
        )
    return images.contiguous()


def torchvision_domain(
    source: DomainSource,
    image_size: int = 16,
    channels: int = 3,
    root: str | Path | None = None,
) -> DomainDataset:
    """
    Load a small public dataset as a domain (downloads on first use).

    The train split is subsampled from the dataset's training set and the
    validation split from its test set, so the two are disjoint.
    """
    try:
        import torchvision
    except ImportError as exc:
        raise ImportError(
            "torchvision sources need the 'datasets' extra: pip install pyMDL[datasets]"
        ) from exc

    name = source.source.partition(":")[2]
    root = Path(root) if root is not None else data_dir()
    root.mkdir(parents=True, exist_ok=True)
    factory = getattr(torchvision.datasets, name)
    logger.info("Loading %s for domain %s from %s", name, source.domain_id, root)
    if name == "SVHN":
        train = factory(str(root / name), split="train", download=True)
        test = factory(str(root / name), split="test", download=True)
    else:
        train = factory(str(root), train=True, download=True)
        test = factory(str(root), train=False, download=True)

    generator = torch_generator(source.seed, "subset", source.domain_id)
    train_inputs, train_labels = _subset(*_as_tensors(train), source.n_train, generator)
    val_inputs, val_labels = _subset(*_as_tensors(test), source.n_val, generator)
    train_inputs = _adapt(train_inputs, image_size, channels)
    val_inputs = _adapt(val_inputs, image_size, channels)
    mean, std = train_inputs.mean(), train_inputs.std()
    return DomainDataset(
        domain_id=source.domain_id,
        num_classes=source.num_classes,
        train_inputs=(train_inputs - mean) / std,
        train_labels=train_labels,
        val_inputs=(val_inputs - mean) / std,
        val_labels=val_labels,
        source=source.source,
        seed=source.seed,
    )


def build_datasets(
    sources: Sequence[DomainSource], image_size: int = 16, channels: int = 3
) -> dict[str, DomainDataset]:
    """Materialize domain datasets, keyed and ordered by domain id as given."""
    datasets = {}
    for source in sources:
        if source.domain_id in datasets:
            raise ValueError(f"Duplicate domain {source.domain_id!r}")
        if source.source == "synthetic":
            datasets[source.domain_id] = synthetic_domain(source, image_size, channels)
        else:
            datasets[source.domain_id] = torchvision_domain(source, image_size, channels)
    return datasets
