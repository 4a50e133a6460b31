"""
Named-tensor checkpoints of multi-domain models.

A checkpoint directory holds ``weights.safetensors`` with one tensor per
filter (``shared/L{layer}/f{filter}``, ``domain/{id}/L{layer}/f{filter}``) and
per BN/head tensor (``domain/{id}/bn/...``, ``domain/{id}/head/...``), the
architecture and plan documents, and ``manifest.json`` tying them together.
Per-filter names let a plan and a checkpoint be cross-checked without
loading either into a model.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from pyMDL.mdl_archspec import (
    ArchitectureSpec,
    HeadSpec,
    PlanMismatchError,
    architecture_from_dict,
    architecture_to_dict,
)
from pyMDL.mdl_net import MultiDomainModel, live_filter_mask
from pyMDL.mdl_planner import SharingPlan, plan_digest, plan_from_dict, plan_to_dict

__all__ = [
    "named_tensors",
    "checkpoint_digest",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WEIGHTS_FILE = "weights.safetensors"
MANIFEST_FILE = "manifest.json"

_BN_TENSORS = ("weight", "bias", "running_mean", "running_var", "num_batches_tracked")


def named_tensors(model: MultiDomainModel, omit_dead: bool = False) -> dict[str, torch.Tensor]:
    """
    Flatten a model into checkpoint names.

    Parameters
    ----------
    model : MultiDomainModel
    omit_dead : bool
        Leave out shared filters that no domain reads (default False).
    """
    tensors = {}
    for layer in model.arch.layers:
        live = live_filter_mask(model, layer.layer_id)
        weight = model.shared_weight[layer.layer_id].detach()
        bias_key = f"L{layer.layer_id}"
        bias = model.shared_bias[bias_key].detach() if bias_key in model.shared_bias else None
        for index in range(layer.out_channels):
            if omit_dead and not live[index]:
                continue
            name = f"shared/L{layer.layer_id}/f{index}"
            tensors[name] = weight[index].clone().contiguous()
            if bias is not None:
                tensors[f"{name}/bias"] = bias[index : index + 1].clone()

    for domain_id in model.domain_ids:
        overlay = model.overlays[domain_id]
        prefix = f"domain/{domain_id}"
        for layer_id, indices in model.plan.selection.items():
            key = f"L{layer_id}"
            for row, index in enumerate(indices):
                name = f"{prefix}/{key}/f{index}"
                tensors[name] = overlay.filters[key][row].detach().clone().contiguous()
                if key in overlay.biases:
                    tensors[f"{name}/bias"] = overlay.biases[key][row : row + 1].detach().clone()
        for key, bn in overlay.bn.items():
            for attr in _BN_TENSORS:
                tensors[f"{prefix}/bn/{key}/{attr}"] = getattr(bn, attr).detach().clone().reshape(-1)
        tensors[f"{prefix}/head/weight"] = overlay.head.weight.detach().clone()
        tensors[f"{prefix}/head/bias"] = overlay.head.bias.detach().clone()
    return tensors


def checkpoint_digest(model: MultiDomainModel) -> str:
    """SHA-256 over every named tensor, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(named_tensors(model).items()):
        digest.update(name.encode())
        digest.update(tensor.cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    model: MultiDomainModel,
    directory: str | Path,
    omit_dead: bool = False,
    extra: dict | None = None,
) -> Path:
    """
    Write a model to a checkpoint directory.

    Returns
    -------
    directory : Path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_file(named_tensors(model, omit_dead), str(directory / WEIGHTS_FILE))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "arch_name": model.arch.name,
        "plan_digest": plan_digest(model.plan),
        "domain_ids": list(model.domain_ids),
        "heads": {d: model.heads[d].num_classes for d in model.domain_ids},
        "omit_dead": omit_dead,
        "architecture": architecture_to_dict(model.arch),
        "plan": plan_to_dict(model.plan),
    }
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("Saved checkpoint of %s to %s", model.arch.name, directory)
    return directory


def load_checkpoint(
    directory: str | Path,
    arch: ArchitectureSpec | None = None,
    plan: SharingPlan | None = None,
) -> MultiDomainModel:
    """
    Rebuild a model from a checkpoint directory.

    ``arch`` and ``plan``, when given, must match the ones recorded in the
    manifest.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise FileNotFoundError(f"No checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise PlanMismatchError(
            f"Unsupported checkpoint schema_version {manifest.get('schema_version')!r}"
        )
    stored_arch = architecture_from_dict(manifest["architecture"])
    stored_plan = plan_from_dict(manifest["plan"])
    if plan_digest(stored_plan) != manifest["plan_digest"]:
        raise PlanMismatchError(f"Plan digest of {directory} does not match its plan")
    if arch is not None and arch != stored_arch:
        raise PlanMismatchError(
            f"Checkpoint holds architecture {stored_arch.name!r}, expected {arch.name!r}"
        )
    if plan is not None and plan_digest(plan) != manifest["plan_digest"]:
        raise PlanMismatchError(f"Checkpoint in {directory} was saved with another plan")

    heads = [HeadSpec(d, int(manifest["heads"][d])) for d in manifest["domain_ids"]]
    model = MultiDomainModel(stored_arch, stored_plan, heads)
    tensors = load_file(str(directory / WEIGHTS_FILE))

    with torch.no_grad():
        for layer in stored_arch.layers:
            key = f"L{layer.layer_id}"
            for index in range(layer.out_channels):
                name = f"shared/{key}/f{index}"
                if name not in tensors:
                    if manifest.get("omit_dead"):
                        continue
                    raise KeyError(f"Checkpoint misses tensor {name}")
                model.shared_weight[layer.layer_id][index].copy_(tensors[name])
                if key in model.shared_bias:
                    model.shared_bias[key][index : index + 1].copy_(tensors[f"{name}/bias"])
        for domain_id in model.domain_ids:
            overlay = model.overlays[domain_id]
            prefix = f"domain/{domain_id}"
            for layer_id, indices in stored_plan.selection.items():
                key = f"L{layer_id}"
                for row, index in enumerate(indices):
                    name = f"{prefix}/{key}/f{index}"
                    overlay.filters[key][row].copy_(tensors[name])
                    if key in overlay.biases:
                        overlay.biases[key][row : row + 1].copy_(tensors[f"{name}/bias"])
            for key, bn in overlay.bn.items():
                for attr in _BN_TENSORS:
                    target = getattr(bn, attr)
                    target.copy_(tensors[f"{prefix}/bn/{key}/{attr}"].reshape(target.shape))
            overlay.head.weight.copy_(tensors[f"{prefix}/head/weight"])
            overlay.head.bias.copy_(tensors[f"{prefix}/head/bias"])
    return model
