"""
Declarative descriptions of CNN backbones and exact parameter accounting.

An architecture is plain data: an ordered list of convolution layers, the
batch-normalization sites that follow some of them, and the width of the
classifier input. Nothing here allocates tensors, so plans and budgets can be
computed for full-size backbones as cheaply as for toy ones.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

if TYPE_CHECKING:
    from pyMDL.mdl_planner import SharingPlan

__all__ = [
    "ArchitectureError",
    "PlanMismatchError",
    "ConvLayerSpec",
    "LayerGlue",
    "ArchitectureSpec",
    "HeadSpec",
    "per_filter_params",
    "layer_total_params",
    "count_conv_params",
    "bn_params",
    "head_params",
    "param_breakdown",
    "total_model_params",
    "architecture_from_dict",
    "architecture_to_dict",
    "load_architecture",
    "save_architecture",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ACTIVATIONS = ("relu", "relu6", "none")
POOLINGS = ("none", "max", "avg")

_IDENTIFIER = re.compile(r"^[A-Za-z0-9_\-]+$")


class ArchitectureError(ValueError):
    """Raised when an architecture description violates its invariants."""


class PlanMismatchError(ValueError):
    """Raised when a sharing plan does not belong to an architecture."""


def check_identifier(value: str, what: str) -> str:
    if not isinstance(value, str) or not _IDENTIFIER.match(value):
        raise ValueError(
            f"{what} must be a non-empty string of letters, digits, '_' or '-': {value!r}"
        )
    return value


@dataclass(frozen=True)
class ConvLayerSpec:
    """One convolution layer; each output channel is a filter."""

    layer_id: int
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ArchitectureError(
                    f"Layer {self.layer_id}: {name} must be a positive integer, got {value!r}"
                )
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ArchitectureError(
                f"Layer {self.layer_id}: groups={self.groups} must divide "
                f"in_channels={self.in_channels} and out_channels={self.out_channels}"
            )

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel_h,
            self.kernel_w,
        )


@dataclass(frozen=True)
class LayerGlue:
    """
    Structural annotations applied around a convolution at assembly time.

    The layer computes ``conv -> BN (if a site exists) -> residual additions ->
    activation -> pooling``. ``input_from`` and ``residual_from`` refer to the
    *input* of an earlier layer; ``add_previous`` adds the output of the layer
    just before this one.
    """

    stride: int = 1
    padding: int | None = None
    activation: str = "relu"
    pool: str = "none"
    pool_kernel: int = 2
    pool_stride: int | None = None
    pool_padding: int = 0
    input_from: int | None = None
    residual_from: int | None = None
    add_previous: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ArchitectureError(f'Invalid value for "activation": {self.activation}')
        if self.pool not in POOLINGS:
            raise ArchitectureError(f'Invalid value for "pool": {self.pool}')
        if self.stride < 1:
            raise ArchitectureError(f"stride must be positive, got {self.stride}")

    def padding_for(self, layer: ConvLayerSpec) -> tuple[int, int]:
        if self.padding is not None:
            return (self.padding, self.padding)
        return (layer.kernel_h // 2, layer.kernel_w // 2)


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    Ordered description of a CNN backbone.

    Layer 0 is closest to the input ("bottom"), the last layer closest to the
    classifier ("top").
    """

    name: str
    layers: tuple[ConvLayerSpec, ...]
    bn_sites: tuple[tuple[int, int], ...] = ()
    head_in_features: int = 1
    glue: tuple[LayerGlue, ...] = field(default=())

    def __post_init__(self):
        check_identifier(self.name, "Architecture name")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "bn_sites", tuple((int(i), int(n)) for i, n in self.bn_sites)
        )
        if not self.glue:
            object.__setattr__(self, "glue", tuple(LayerGlue() for _ in self.layers))
        else:
            object.__setattr__(self, "glue", tuple(self.glue))

        for position, layer in enumerate(self.layers):
            if layer.layer_id != position:
                raise ArchitectureError(
                    f"layer_ids must be 0..N-1 in order; position {position} "
                    f"holds layer_id {layer.layer_id}"
                )
        if len(self.glue) != len(self.layers):
            raise ArchitectureError(
                f"{len(self.glue)} glue entries for {len(self.layers)} layers"
            )
        seen = set()
        for layer_id, num_features in self.bn_sites:
            if not 0 <= layer_id < len(self.layers):
                raise ArchitectureError(f"bn_site references unknown layer {layer_id}")
            if layer_id in seen:
                raise ArchitectureError(f"Duplicate bn_site for layer {layer_id}")
            seen.add(layer_id)
            expected = self.layers[layer_id].out_channels
            if num_features != expected:
                raise ArchitectureError(
                    f"bn_site on layer {layer_id} has {num_features} features, "
                    f"layer has {expected} filters"
                )
        for layer_id, glue in enumerate(self.glue):
            for ref in (glue.input_from, glue.residual_from):
                if ref is not None and not 0 <= ref <= layer_id:
                    raise ArchitectureError(
                        f"Layer {layer_id} refers to layer {ref}, which is not at or below it"
                    )
            if glue.add_previous and layer_id == 0:
                raise ArchitectureError("Layer 0 has no previous layer to add")
        if self.head_in_features < 1:
            raise ArchitectureError("head_in_features must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_filters(self) -> int:
        return sum(layer.out_channels for layer in self.layers)


@dataclass(frozen=True)
class HeadSpec:
    """Classifier of one domain."""

    domain_id: str
    num_classes: int

    def __post_init__(self):
        check_identifier(self.domain_id, "domain_id")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ValueError(
                f"Domain {self.domain_id!r} needs at least 2 classes, got {self.num_classes!r}"
            )


################################################################################


def per_filter_params(layer: ConvLayerSpec) -> int:
    """
    Number of parameters owned by a single filter of a layer.

    Parameters
    ----------
    layer : ConvLayerSpec

    Returns
    -------
    n : int
        ``(in_channels / groups) * kernel_h * kernel_w`` plus one for the bias.

    Example
    -------
    ::

        >>> per_filter_params(ConvLayerSpec(0, 2, 4, 3, 3))
        18
        >>> per_filter_params(ConvLayerSpec(0, 8, 8, 3, 3, groups=8, has_bias=True))
        10

    """
    return (layer.in_channels // layer.groups) * layer.kernel_h * layer.kernel_w + int(
        layer.has_bias
    )


def layer_total_params(layer: ConvLayerSpec) -> int:
    return layer.out_channels * per_filter_params(layer)


def count_conv_params(arch: ArchitectureSpec) -> int:
    """
    Total number of convolution parameters of a backbone.

    Conv weights and conv biases are counted; batch-normalization and
    classifier parameters are not.

    Parameters
    ----------
    arch : ArchitectureSpec

    Returns
    -------
    n : int
        Zero for an architecture without layers.

    Example
    -------
    ::

        >>> from pyMDL.mdl_zoo import toy_t
        >>> count_conv_params(toy_t())
        106

    """
    return sum(layer_total_params(layer) for layer in arch.layers)


def bn_params(arch: ArchitectureSpec) -> int:
    """Learned BN parameters (scale and bias) of one domain."""
    return sum(2 * num_features for _, num_features in arch.bn_sites)


def head_params(arch: ArchitectureSpec, head: HeadSpec) -> int:
    return arch.head_in_features * head.num_classes + head.num_classes


def _check_plan(arch: ArchitectureSpec, plan: SharingPlan | None) -> int:
    if plan is None:
        return 0
    if plan.arch_name != arch.name:
        raise PlanMismatchError(
            f"Plan was built for {plan.arch_name!r}, not for {arch.name!r}"
        )
    from pyMDL.mdl_planner import plan_param_count

    return plan_param_count(plan, arch)


def param_breakdown(
    arch: ArchitectureSpec,
    plan: SharingPlan | None,
    heads: Sequence[HeadSpec],
    num_domains: int,
) -> dict[str, int]:
    """
    Split the parameter count of a multi-domain model into its components.

    Returns
    -------
    parts : dict
        ``shared`` (conv parameters used by every domain), ``specific`` (conv
        parameters over all domains), ``bn`` and ``heads`` (over all domains)
        and ``total``.
    """
    if num_domains < 1:
        raise ValueError(f"num_domains must be positive, got {num_domains}")
    if len(heads) != num_domains:
        raise ValueError(f"Expected one head per domain: {len(heads)} heads, {num_domains} domains")
    specific = _check_plan(arch, plan)
    parts = {
        "shared": count_conv_params(arch) - specific,
        "specific": num_domains * specific,
        "bn": num_domains * bn_params(arch),
        "heads": sum(head_params(arch, head) for head in heads),
    }
    parts["total"] = sum(parts.values())
    return parts


def total_model_params(
    arch: ArchitectureSpec,
    plan: SharingPlan | None,
    heads: Sequence[HeadSpec],
    num_domains: int,
) -> int:
    """
    Learned parameters of a multi-domain model.

    Shared conv parameters are counted once; every domain adds its specific
    filters, its BN scales and biases and its classifier. Shared copies of
    replaced filters and BN running statistics are not counted.

    Parameters
    ----------
    arch : ArchitectureSpec
    plan : SharingPlan
        Plan built for ``arch`` (``None`` is read as an empty plan).
    heads : list of HeadSpec
        One head per domain.
    num_domains : int

    Returns
    -------
    n : int

    Example
    -------
    Two domains on the toy architecture with a single BN site of 4 features
    and classifiers of 10 and 5 classes::

        106 + (8 + 50) + (8 + 25) = 197

    """
    return param_breakdown(arch, plan, heads, num_domains)["total"]


################################################################################


def architecture_to_dict(arch: ArchitectureSpec) -> dict[str, Any]:
    layers = []
    for layer, glue in zip(arch.layers, arch.glue):
        entry = asdict(layer)
        entry["glue"] = asdict(glue)
        layers.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "name": arch.name,
        "layers": layers,
        "bn_sites": [list(site) for site in arch.bn_sites],
        "head_in_features": arch.head_in_features,
    }


def architecture_from_dict(document: Mapping[str, Any]) -> ArchitectureSpec:
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArchitectureError(
            f"Unsupported architecture schema_version {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        layers = []
        glue = []
        for entry in document["layers"]:
            entry = dict(entry)
            glue.append(LayerGlue(**entry.pop("glue", {})))
            layers.append(ConvLayerSpec(**entry))
        return ArchitectureSpec(
            name=document["name"],
            layers=tuple(layers),
            bn_sites=tuple(tuple(site) for site in document.get("bn_sites", ())),
            head_in_features=document["head_in_features"],
            glue=tuple(glue),
        )
    except (KeyError, TypeError) as exc:
        raise ArchitectureError(f"Malformed architecture document: {exc}") from exc


def save_architecture(arch: ArchitectureSpec, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(architecture_to_dict(arch), indent=2) + "\n")
    return path


def load_architecture(path: str | Path) -> ArchitectureSpec:
    path = Path(path)
    logger.debug("Loading architecture from %s", path)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArchitectureError(f"{path} is not a valid architecture document: {exc}") from exc
    return architecture_from_dict(document)


def filters_of(arch: ArchitectureSpec) -> Iterable[tuple[int, int]]:
    """All ``(layer_id, filter_index)`` pairs, bottom layer first."""
    for layer in arch.layers:
        for index in range(layer.out_channels):
            yield layer.layer_id, index
