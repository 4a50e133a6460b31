"""Top-1 validation accuracy of a multi-domain model."""

from __future__ import annotations

from typing import Mapping

import torch

from pyMDL.mdl_data import DomainDataset
from pyMDL.mdl_net import MultiDomainModel

__all__ = ["evaluate"]


@torch.no_grad()
def evaluate(
    model: MultiDomainModel,
    datasets: Mapping[str, DomainDataset],
    batch_size: int = 256,
) -> dict[str, float]:
    """
    Validation accuracy of every domain of a model.

    BN layers run with their frozen running statistics; the model is put back
    into its previous mode afterwards.

    Parameters
    ----------
    model : MultiDomainModel
    datasets : dict
        ``domain_id -> DomainDataset`` for domains of ``model``.
    batch_size : int

    Returns
    -------
    accuracy : dict
        ``domain_id -> accuracy`` in [0, 1], in the order of ``datasets``.
    """
    was_training = model.training
    model.eval()
    accuracy = {}
    try:
        for domain_id, dataset in datasets.items():
            if dataset.n_val == 0:
                raise ValueError(f"Domain {domain_id!r} has an empty validation split")
            correct = 0
            for batch in dataset.val_batches(batch_size):
                logits = model(batch.inputs, domain_id)
                correct += int((logits.argmax(dim=1) == batch.labels).sum())
            accuracy[domain_id] = correct / dataset.n_val
    finally:
        model.train(was_training)
    return accuracy
