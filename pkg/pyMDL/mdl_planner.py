"""
Sharing plans: which filters of a backbone become domain-specific.

A plan is built by walking the filters of an architecture in a strategy
dependent order and taking filters while each one brings the running count
closer to the targeted fraction of conv parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from pyMDL.mdl_archspec import (
    ArchitectureSpec,
    PlanMismatchError,
    count_conv_params,
    filters_of,
    per_filter_params,
)

__all__ = [
    "STRATEGIES",
    "SharingPlan",
    "build_plan",
    "enumerate_filters",
    "plan_param_count",
    "plan_digest",
    "layer_summary",
    "plan_to_dict",
    "plan_from_dict",
    "save_plan",
    "load_plan",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STRATEGIES = ("top_specific", "bottom_specific", "random")


@dataclass(frozen=True)
class SharingPlan:
    """
    Domain-specific filters of a backbone, applied identically to every domain.

    ``selection`` maps a layer id to the sorted filter indices that each
    domain owns a private copy of; layers without selected filters are absent.
    """

    arch_name: str
    strategy: str
    fraction: float
    seed: int
    selection: Mapping[int, tuple[int, ...]]
    achieved_params: int
    target_params: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f'Invalid value for "strategy": {self.strategy}')
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {self.fraction}")
        normalized = {
            int(layer_id): tuple(sorted(int(i) for i in indices))
            for layer_id, indices in sorted(self.selection.items(), key=lambda kv: int(kv[0]))
            if len(indices)
        }
        object.__setattr__(self, "selection", normalized)

    @property
    def num_filters(self) -> int:
        return sum(len(indices) for indices in self.selection.values())

    def is_empty(self) -> bool:
        return not self.selection

    def selected(self, layer_id: int) -> tuple[int, ...]:
        return self.selection.get(layer_id, ())


def _check_strategy(strategy):
    if strategy not in STRATEGIES:
        raise ValueError(
            f'Invalid value for "strategy": {strategy} (expected one of {", ".join(STRATEGIES)})'
        )


def enumerate_filters(arch: ArchitectureSpec, strategy: str, seed=None) -> list[tuple[int, int]]:
    """
    Order in which a strategy considers filters.

    Parameters
    ----------
    arch : ArchitectureSpec
    strategy : str
        ``"bottom_specific"`` walks layers from the input upwards,
        ``"top_specific"`` from the last layer downwards, both by ascending
        filter index within a layer. ``"random"`` draws a uniform permutation
        of all ``(layer, filter)`` pairs.
    seed : int or np.random.Generator
        Seed (or generator) of the random permutation; ignored otherwise.

    Returns
    -------
    order : list of (layer_id, filter_index)
    """
    _check_strategy(strategy)
    pairs = list(filters_of(arch))
    if strategy == "bottom_specific":
        return pairs
    if strategy == "top_specific":
        return [
            (layer.layer_id, index)
            for layer in reversed(arch.layers)
            for index in range(layer.out_channels)
        ]

    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.default_rng(0 if seed is None else seed)
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def build_plan(arch: ArchitectureSpec, strategy: str, fraction: float, seed: int = 0) -> SharingPlan:
    """
    Select domain-specific filters for a budget.

    Parameters
    ----------
    arch : ArchitectureSpec
        Backbone with at least one conv layer.
    strategy : str
        One of ``"top_specific"``, ``"bottom_specific"`` or ``"random"``.
    fraction : float
        Targeted share of the conv parameters, in [0, 1].
    seed : int
        Seed of the random strategy (recorded for the others).

    Returns
    -------
    plan : SharingPlan

    Notes
    -----
    The target is ``fraction * count_conv_params(arch)``. Filters are visited
    in ``enumerate_filters`` order; a filter is taken if and only if it
    strictly reduces ``|achieved - target|``, and the walk stops at the first
    filter that is not taken. The achieved count is therefore within half a
    filter cost of the target.

    Example
    -------
    On the toy architecture (106 parameters) at 20 %, ``bottom_specific``
    takes both filters of layer 0 (18 parameters) and ``top_specific`` the
    four filters of layer 2 (16 parameters)::

        >>> build_plan(toy_t(), "bottom_specific", 0.2).selection
        {0: (0, 1)}
        >>> build_plan(toy_t(), "top_specific", 0.2).selection
        {2: (0, 1, 2, 3)}

    """
    _check_strategy(strategy)
    fraction = float(fraction)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if arch.num_layers == 0:
        raise ValueError(f"Architecture {arch.name!r} has no conv layers")
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")

    total = count_conv_params(arch)
    target = fraction * total
    costs = [per_filter_params(layer) for layer in arch.layers]

    achieved = 0
    selection: dict[int, list[int]] = {}
    for layer_id, index in enumerate_filters(arch, strategy, seed):
        candidate = achieved + costs[layer_id]
        if abs(candidate - target) >= abs(achieved - target):
            break
        achieved = candidate
        selection.setdefault(layer_id, []).append(index)

    plan = SharingPlan(
        arch_name=arch.name,
        strategy=strategy,
        fraction=fraction,
        seed=seed,
        selection={k: tuple(v) for k, v in selection.items()},
        achieved_params=achieved,
        target_params=target,
    )
    logger.debug(
        "%s plan on %s at %.3f: %d filters, %d / %.1f params",
        strategy,
        arch.name,
        fraction,
        plan.num_filters,
        achieved,
        target,
    )
    return plan


def plan_param_count(plan: SharingPlan, arch: ArchitectureSpec) -> int:
    """
    Recount the parameters of a plan's selection.

    Raises
    ------
    PlanMismatchError
        If a selected filter does not exist in ``arch`` or the count disagrees
        with ``plan.achieved_params`` (a corrupted plan).
    """
    if plan.arch_name != arch.name:
        raise PlanMismatchError(f"Plan was built for {plan.arch_name!r}, not for {arch.name!r}")
    count = 0
    for layer_id, indices in plan.selection.items():
        if not 0 <= layer_id < arch.num_layers:
            raise PlanMismatchError(f"Plan selects filters of unknown layer {layer_id}")
        layer = arch.layers[layer_id]
        if len(set(indices)) != len(indices) or any(
            not 0 <= i < layer.out_channels for i in indices
        ):
            raise PlanMismatchError(
                f"Plan selects invalid filters {list(indices)} of layer {layer_id} "
                f"({layer.out_channels} filters)"
            )
        count += len(indices) * per_filter_params(layer)
    if count != plan.achieved_params:
        raise PlanMismatchError(
            f"Plan records {plan.achieved_params} parameters but its selection holds {count}"
        )
    return count


def layer_summary(plan: SharingPlan, arch: ArchitectureSpec) -> list[dict[str, Any]]:
    """Per-layer selected filters and parameters, for display."""
    rows = []
    for layer in arch.layers:
        chosen = plan.selected(layer.layer_id)
        rows.append(
            {
                "layer_id": layer.layer_id,
                "filters": layer.out_channels,
                "selected": len(chosen),
                "params": len(chosen) * per_filter_params(layer),
            }
        )
    return rows


################################################################################


def plan_to_dict(plan: SharingPlan) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "arch_name": plan.arch_name,
        "strategy": plan.strategy,
        "fraction": plan.fraction,
        "seed": plan.seed,
        "selection": {str(k): list(v) for k, v in plan.selection.items()},
        "achieved_params": plan.achieved_params,
        "target_params": plan.target_params,
    }


def plan_from_dict(document: Mapping[str, Any]) -> SharingPlan:
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise PlanMismatchError(
            f"Unsupported plan schema_version {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        return SharingPlan(
            arch_name=document["arch_name"],
            strategy=document["strategy"],
            fraction=float(document["fraction"]),
            seed=int(document["seed"]),
            selection={int(k): tuple(v) for k, v in document["selection"].items()},
            achieved_params=int(document["achieved_params"]),
            target_params=float(document.get("target_params", 0.0)),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise PlanMismatchError(f"Malformed plan document: {exc}") from exc


def plan_digest(plan: SharingPlan) -> str:
    """SHA-256 of the canonical plan document."""
    canonical = json.dumps(plan_to_dict(plan), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_plan(plan: SharingPlan, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan_to_dict(plan), indent=2) + "\n")
    return path


def load_plan(path: str | Path, arch: ArchitectureSpec | None = None) -> SharingPlan:
    """Read a plan document; with ``arch`` given, also validate it against it."""
    path = Path(path)
    try:
        plan = plan_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise PlanMismatchError(f"{path} is not a valid plan document: {exc}") from exc
    if arch is not None:
        plan_param_count(plan, arch)
    return plan
