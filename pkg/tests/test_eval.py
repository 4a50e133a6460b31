import unittest

import pytest
import torch

from pyMDL.mdl_archspec import HeadSpec
from pyMDL.mdl_data import DomainDataset, DomainSource, build_datasets
from pyMDL.mdl_eval import evaluate
from pyMDL.mdl_net import assemble
from pyMDL.mdl_planner import build_plan
from pyMDL.mdl_trainer import TrainConfig, train_joint
from pyMDL.mdl_zoo import desk_cnn, toy_t


def constant_model(num_classes=10):
    arch = toy_t()
    model = assemble(arch, build_plan(arch, "random", 0.0), [HeadSpec("a", num_classes)])
    head = model.overlays["a"].head
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
        head.bias[0] = 1.0
    return model


def uniform_domain(num_classes=10, n_val=100):
    inputs = torch.randn(n_val, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    labels = torch.arange(n_val) % num_classes
    return DomainDataset("a", num_classes, inputs, labels, inputs, labels)


class TestEvaluate(unittest.TestCase):
    def test_chance_level(self):
        accuracy = evaluate(constant_model(), {"a": uniform_domain()}, batch_size=32)
        self.assertEqual(accuracy, {"a": 0.1})

    def test_restores_mode(self):
        model = constant_model()
        model.train()
        evaluate(model, {"a": uniform_domain()})
        self.assertTrue(model.training)
        model.eval()
        evaluate(model, {"a": uniform_domain()})
        self.assertFalse(model.training)

    def test_batch_size_does_not_matter(self):
        arch = toy_t()
        model = assemble(arch, build_plan(arch, "top_specific", 0.3), [HeadSpec("a", 10)], seed=4)
        data = {"a": uniform_domain()}
        self.assertEqual(evaluate(model, data, batch_size=7), evaluate(model, data, batch_size=100))

    def test_empty_validation_split(self):
        empty = DomainDataset(
            "a", 10, torch.zeros(4, 1, 8, 8), torch.zeros(4, dtype=torch.long),
            torch.zeros(0, 1, 8, 8), torch.zeros(0, dtype=torch.long),
        )
        with self.assertRaises(ValueError):
            evaluate(constant_model(), {"a": empty})


@pytest.mark.slow
def test_trained_model_separates_synthetic_domains():
    sources = [
        DomainSource(d, num_classes=10, n_train=512, n_val=256, noise=0.3) for d in ("a", "b", "c")
    ]
    arch = desk_cnn()
    heads = [HeadSpec(s.domain_id, s.num_classes) for s in sources]
    model = assemble(arch, build_plan(arch, "bottom_specific", 0.2), heads)
    datasets = build_datasets(sources, image_size=16, channels=3)
    cfg = TrainConfig(steps=300, batch_size=32, eval_every=300, lr_schedule={"type": "constant"})
    train_joint(model, datasets, cfg)
    for domain_id, accuracy in evaluate(model, datasets).items():
        assert accuracy > 0.9, domain_id
