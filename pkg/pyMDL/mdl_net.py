"""
Multi-domain model with filter-level domain-specific parameters.

All domains run the same backbone. For a given domain, the output channels of
the filters selected by the sharing plan are computed with that domain's own
copies of those filters and replace the channels the shared filters would
have produced; every domain also owns its BN layers and its classifier.

The shared store always keeps every filter of the backbone. Shared copies of
replaced filters are never read by any domain (they are "dead") and receive
exactly zero gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from pyMDL.mdl_archspec import (
    ArchitectureError,
    ArchitectureSpec,
    HeadSpec,
)
from pyMDL.mdl_planner import SharingPlan, plan_param_count
from pyMDL.mdl_seeding import torch_generator

__all__ = [
    "UnknownDomainError",
    "DomainBatch",
    "DomainOverlay",
    "MultiDomainModel",
    "ParamRef",
    "assemble",
    "forward",
    "trainable_params",
    "live_filter_mask",
    "merged_weights",
    "init_shared_random",
    "init_head_random",
    "copy_shared_to_specific",
    "reset_bn",
]

logger = logging.getLogger(__name__)

INIT_SCHEMES = ("kaiming_normal", "kaiming_uniform")


class UnknownDomainError(KeyError):
    pass


@dataclass
class DomainBatch:
    """A batch of one domain: ``inputs`` is N x C x H x W, ``labels`` has N class ids."""

    domain_id: str
    inputs: torch.Tensor
    labels: torch.Tensor

    def check(self, num_classes: int) -> None:
        if self.labels.numel() and (
            int(self.labels.min()) < 0 or int(self.labels.max()) >= num_classes
        ):
            raise ValueError(
                f"Domain {self.domain_id!r}: labels must lie in [0, {num_classes}), "
                f"got range [{int(self.labels.min())}, {int(self.labels.max())}]"
            )


@dataclass(eq=False)
class ParamRef:
    """
    A trainable parameter, or the live rows of one.

    ``rows`` is ``None`` when the whole tensor trains, else the indices along
    dimension 0 (filters) that do.
    """

    name: str
    param: nn.Parameter
    rows: torch.Tensor | None = None


def _key(layer_id: int) -> str:
    return f"L{layer_id}"


class DomainOverlay(nn.Module):
    """Parameters owned by a single domain."""

    def __init__(self, arch: ArchitectureSpec, plan: SharingPlan, head: HeadSpec):
        super().__init__()
        self.filters = nn.ParameterDict()
        self.biases = nn.ParameterDict()
        for layer_id, indices in plan.selection.items():
            layer = arch.layers[layer_id]
            shape = (len(indices),) + layer.weight_shape[1:]
            self.filters[_key(layer_id)] = nn.Parameter(torch.zeros(shape))
            if layer.has_bias:
                self.biases[_key(layer_id)] = nn.Parameter(torch.zeros(len(indices)))
        self.bn = nn.ModuleDict(
            {_key(layer_id): nn.BatchNorm2d(n) for layer_id, n in arch.bn_sites}
        )
        self.head = nn.Linear(arch.head_in_features, head.num_classes)


class MultiDomainModel(nn.Module):
    """
    Shared backbone filters plus one overlay per domain.

    Use :func:`assemble` to build an initialized model. Call it as
    ``model(inputs, domain_id)``.
    """

    def __init__(self, arch: ArchitectureSpec, plan: SharingPlan, heads: Sequence[HeadSpec]):
        super().__init__()
        self.arch = arch
        self.plan = plan
        self.heads = {head.domain_id: head for head in heads}
        self.domain_ids = tuple(head.domain_id for head in heads)

        self.shared_weight = nn.ParameterList(
            [nn.Parameter(torch.zeros(layer.weight_shape)) for layer in arch.layers]
        )
        self.shared_bias = nn.ParameterDict(
            {
                _key(layer.layer_id): nn.Parameter(torch.zeros(layer.out_channels))
                for layer in arch.layers
                if layer.has_bias
            }
        )
        self.overlays = nn.ModuleDict(
            {head.domain_id: DomainOverlay(arch, plan, head) for head in heads}
        )
        for layer_id, indices in plan.selection.items():
            self.register_buffer(
                f"selection_{_key(layer_id)}",
                torch.tensor(indices, dtype=torch.long),
                persistent=False,
            )

    def selection_index(self, layer_id: int) -> torch.Tensor | None:
        return getattr(self, f"selection_{_key(layer_id)}", None)

    def overlay(self, domain_id: str) -> DomainOverlay:
        if domain_id not in self.overlays:
            raise UnknownDomainError(
                f"Unknown domain {domain_id!r}; model domains are {list(self.domain_ids)}"
            )
        return self.overlays[domain_id]

    def layer_filters(self, layer_id: int, domain_id: str):
        """Weight and bias of a layer as seen by one domain."""
        overlay = self.overlay(domain_id)
        key = _key(layer_id)
        weight = self.shared_weight[layer_id]
        bias = self.shared_bias[key] if key in self.shared_bias else None
        index = self.selection_index(layer_id)
        if index is not None:
            weight = weight.index_copy(0, index, overlay.filters[key])
            if bias is not None:
                bias = bias.index_copy(0, index, overlay.biases[key])
        return weight, bias

    def forward(self, inputs: torch.Tensor, domain_id: str) -> torch.Tensor:
        overlay = self.overlay(domain_id)
        first = self.arch.layers[0]
        if inputs.dim() != 4 or inputs.shape[1] != first.in_channels:
            raise ValueError(
                f"Expected inputs of shape N x {first.in_channels} x H x W, "
                f"got {tuple(inputs.shape)}"
            )

        layer_inputs = []
        out = inputs
        for layer, glue in zip(self.arch.layers, self.arch.glue):
            x = out if glue.input_from is None else layer_inputs[glue.input_from]
            layer_inputs.append(x)
            weight, bias = self.layer_filters(layer.layer_id, domain_id)
            y = F.conv2d(
                x,
                weight,
                bias,
                stride=glue.stride,
                padding=glue.padding_for(layer),
                groups=layer.groups,
            )
            key = _key(layer.layer_id)
            if key in overlay.bn:
                y = overlay.bn[key](y)
            if glue.residual_from is not None:
                y = y + layer_inputs[glue.residual_from]
            if glue.add_previous:
                y = y + out
            if glue.activation == "relu":
                y = F.relu(y)
            elif glue.activation == "relu6":
                y = F.relu6(y)
            if glue.pool == "max":
                y = F.max_pool2d(y, glue.pool_kernel, glue.pool_stride, glue.pool_padding)
            elif glue.pool == "avg":
                y = F.avg_pool2d(y, glue.pool_kernel, glue.pool_stride, glue.pool_padding)
            out = y

        features = torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)
        return overlay.head(features)


################################################################################


def assemble(
    arch: ArchitectureSpec,
    plan: SharingPlan,
    heads: Sequence[HeadSpec],
    seed: int = 0,
    scheme: str = "kaiming_normal",
) -> MultiDomainModel:
    """
    Build a multi-domain model and initialize it.

    Parameters
    ----------
    arch : ArchitectureSpec
    plan : SharingPlan
        Plan built for ``arch``; the same selection is used by every domain.
    heads : list of HeadSpec
        One classifier per domain, unique ``domain_id``.
    seed : int
        Seed of the random initialization.
    scheme : str
        ``"kaiming_normal"`` (default) or ``"kaiming_uniform"``.

    Returns
    -------
    model : MultiDomainModel
        Shared filters randomly initialized, each domain's specific filters an
        exact copy of the corresponding shared filters, BN layers at identity
        and heads initialized per domain.
    """
    if arch.num_layers == 0:
        raise ArchitectureError(f"Architecture {arch.name!r} has no conv layers")
    plan_param_count(plan, arch)
    if not heads:
        raise ValueError("At least one domain head is needed")
    ids = [head.domain_id for head in heads]
    duplicates = sorted({d for d in ids if ids.count(d) > 1})
    if duplicates:
        raise ValueError(f"Duplicate domain_ids: {duplicates}")
    last = arch.layers[-1].out_channels
    if arch.head_in_features != last:
        raise ArchitectureError(
            f"head_in_features={arch.head_in_features} but the last layer has {last} filters"
        )

    model = MultiDomainModel(arch, plan, heads)
    init_shared_random(model, seed, scheme)
    copy_shared_to_specific(model)
    reset_bn(model)
    for domain_id in model.domain_ids:
        init_head_random(model, domain_id, seed)
    logger.debug(
        "Assembled %s with %d domains and %d specific filters per domain",
        arch.name,
        len(model.domain_ids),
        plan.num_filters,
    )
    return model


def forward(model: MultiDomainModel, domain_id: str, inputs: torch.Tensor) -> torch.Tensor:
    """Logits (N x num_classes of the domain) of ``inputs`` for ``domain_id``."""
    return model(inputs, domain_id)


@torch.no_grad()
def init_shared_random(model: MultiDomainModel, seed: int, scheme: str = "kaiming_normal") -> None:
    if scheme not in INIT_SCHEMES:
        raise ValueError(f'Invalid value for "scheme": {scheme}')
    for layer in model.arch.layers:
        weight = model.shared_weight[layer.layer_id]
        fan_in = (layer.in_channels // layer.groups) * layer.kernel_h * layer.kernel_w
        std = math.sqrt(2.0 / fan_in)
        generator = torch_generator(seed, "shared", layer.layer_id)
        if scheme == "kaiming_normal":
            values = torch.randn(weight.shape, generator=generator) * std
        else:
            bound = math.sqrt(3.0) * std
            values = (torch.rand(weight.shape, generator=generator) * 2 - 1) * bound
        weight.copy_(values)
        key = _key(layer.layer_id)
        if key in model.shared_bias:
            model.shared_bias[key].zero_()


@torch.no_grad()
def init_head_random(model: MultiDomainModel, domain_id: str, seed: int) -> None:
    head = model.overlay(domain_id).head
    bound = 1.0 / math.sqrt(head.in_features)
    generator = torch_generator(seed, "head", domain_id)
    head.weight.copy_((torch.rand(head.weight.shape, generator=generator) * 2 - 1) * bound)
    head.bias.copy_((torch.rand(head.bias.shape, generator=generator) * 2 - 1) * bound)


@torch.no_grad()
def copy_shared_to_specific(model: MultiDomainModel) -> None:
    """Overwrite every domain's specific filters with the shared ones."""
    for layer_id in model.plan.selection:
        index = model.selection_index(layer_id)
        key = _key(layer_id)
        for domain_id in model.domain_ids:
            overlay = model.overlays[domain_id]
            overlay.filters[key].copy_(model.shared_weight[layer_id][index])
            if key in overlay.biases:
                overlay.biases[key].copy_(model.shared_bias[key][index])


@torch.no_grad()
def reset_bn(model: MultiDomainModel) -> None:
    for overlay in model.overlays.values():
        for bn in overlay.bn.values():
            bn.reset_parameters()


def live_filter_mask(model: MultiDomainModel, layer_id: int) -> torch.Tensor:
    """Boolean mask of the shared filters of a layer still used by the domains."""
    layer = model.arch.layers[layer_id]
    mask = torch.ones(layer.out_channels, dtype=torch.bool)
    index = model.selection_index(layer_id)
    if index is not None:
        mask[index.cpu()] = False
    return mask


def trainable_params(model: MultiDomainModel, domain_id: str) -> list[ParamRef]:
    """
    Parameters a loss on ``domain_id`` may update.

    The shared filters the plan does not select, and the domain's specific
    filters, BN parameters and classifier. Shared tensors that are only
    partly live carry the live filter indices in ``rows``.
    """
    overlay = model.overlay(domain_id)
    refs = []
    for layer in model.arch.layers:
        key = _key(layer.layer_id)
        mask = live_filter_mask(model, layer.layer_id)
        if not mask.any():
            continue
        rows = None if mask.all() else torch.nonzero(mask).flatten()
        refs.append(ParamRef(f"shared/{key}/weight", model.shared_weight[layer.layer_id], rows))
        if key in model.shared_bias:
            refs.append(ParamRef(f"shared/{key}/bias", model.shared_bias[key], rows))

    prefix = f"domain/{domain_id}"
    for key, param in overlay.filters.items():
        refs.append(ParamRef(f"{prefix}/{key}/weight", param))
    for key, param in overlay.biases.items():
        refs.append(ParamRef(f"{prefix}/{key}/bias", param))
    for key, bn in overlay.bn.items():
        refs.append(ParamRef(f"{prefix}/bn/{key}/weight", bn.weight))
        refs.append(ParamRef(f"{prefix}/bn/{key}/bias", bn.bias))
    refs.append(ParamRef(f"{prefix}/head/weight", overlay.head.weight))
    refs.append(ParamRef(f"{prefix}/head/bias", overlay.head.bias))
    return refs


@torch.no_grad()
def merged_weights(model: MultiDomainModel, domain_id: str) -> dict[int, tuple]:
    """
    Conv weights of the single network one domain effectively runs.

    Returns
    -------
    weights : dict
        ``layer_id -> (weight, bias or None)``, detached copies with the
        domain's specific filters spliced into the shared ones.
    """
    merged = {}
    for layer in model.arch.layers:
        weight, bias = model.layer_filters(layer.layer_id, domain_id)
        merged[layer.layer_id] = (
            weight.detach().clone(),
            None if bias is None else bias.detach().clone(),
        )
    return merged
