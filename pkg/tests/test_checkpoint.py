import json
import tempfile
import unittest
from pathlib import Path

import torch
from safetensors.torch import load_file

from oracles import randomize
from pyMDL.mdl_archspec import HeadSpec, PlanMismatchError
from pyMDL.mdl_checkpoint import checkpoint_digest, load_checkpoint, named_tensors, save_checkpoint
from pyMDL.mdl_net import assemble
from pyMDL.mdl_planner import build_plan
from pyMDL.mdl_zoo import resnet_tiny, toy_t


def sample_model(arch=None, strategy="random", fraction=0.4, seed=4):
    arch = arch or toy_t()
    heads = [HeadSpec("a", 3), HeadSpec("b", 2)]
    return randomize(assemble(arch, build_plan(arch, strategy, fraction, seed), heads), seed)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip(self):
        model = sample_model(resnet_tiny())
        directory = save_checkpoint(model, self.tmp / "ckpt")
        loaded = load_checkpoint(directory)
        self.assertEqual(checkpoint_digest(loaded), checkpoint_digest(model))
        self.assertEqual(loaded.plan, model.plan)
        self.assertEqual(loaded.domain_ids, model.domain_ids)

        model.eval()
        loaded.eval()
        inputs = torch.randn(2, 3, 16, 16)
        for domain_id in model.domain_ids:
            torch.testing.assert_close(loaded(inputs, domain_id), model(inputs, domain_id), rtol=0, atol=0)

    def test_names_are_per_filter(self):
        model = sample_model(strategy="bottom_specific", fraction=0.2)
        names = set(named_tensors(model))
        self.assertIn("shared/L0/f0", names)
        self.assertIn("domain/a/L0/f1", names)
        self.assertNotIn("domain/a/L1/f0", names)
        self.assertIn("domain/b/head/weight", names)
        self.assertIn("domain/b/bn/L2/running_var", names)

    def test_omit_dead(self):
        model = sample_model(strategy="bottom_specific", fraction=0.2)
        directory = save_checkpoint(model, self.tmp / "ckpt", omit_dead=True)
        stored = load_file(str(directory / "weights.safetensors"))
        self.assertNotIn("shared/L0/f0", stored)
        self.assertIn("shared/L1/f0", stored)

        loaded = load_checkpoint(directory).eval()
        model.eval()
        inputs = torch.randn(2, 1, 8, 8)
        for domain_id in model.domain_ids:
            torch.testing.assert_close(loaded(inputs, domain_id), model(inputs, domain_id), rtol=0, atol=0)

    def test_extra_metadata(self):
        directory = save_checkpoint(sample_model(), self.tmp / "ckpt", extra={"seed": 4})
        manifest = json.loads((directory / "manifest.json").read_text())
        self.assertEqual(manifest["extra"], {"seed": 4})
        self.assertEqual(manifest["heads"], {"a": 3, "b": 2})

    def test_plan_mismatch(self):
        model = sample_model()
        directory = save_checkpoint(model, self.tmp / "ckpt")
        other = build_plan(toy_t(), "top_specific", 0.4)
        with self.assertRaises(PlanMismatchError):
            load_checkpoint(directory, plan=other)
        with self.assertRaises(PlanMismatchError):
            load_checkpoint(directory, arch=resnet_tiny())
        self.assertEqual(load_checkpoint(directory, toy_t(), model.plan).plan, model.plan)

    def test_tampered_plan(self):
        directory = save_checkpoint(sample_model(), self.tmp / "ckpt")
        manifest = json.loads((directory / "manifest.json").read_text())
        manifest["plan"]["seed"] = 99
        (directory / "manifest.json").write_text(json.dumps(manifest))
        with self.assertRaises(PlanMismatchError):
            load_checkpoint(directory)

    def test_missing_directory(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint(self.tmp / "nothing")
