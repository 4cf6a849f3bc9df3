import pytest
import torch
import torch.nn as nn

from mritranslate.dataio import DatasetManifest, preprocess_volumes
from mritranslate.errors import DivergenceError
from mritranslate.objectives import LossWeights, combine, gan_criterion, l1_loss, ms_ssim_loss
from mritranslate.training import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    save_checkpoint,
    xavier_initialize,
)

from conftest import write_patient
from oracles import ref_adam_step


class TestInitialization:
    def test_same_seed_bit_identical(self, tiny_configs):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        a = Trainer(gen_cfg, disc_cfg, train_cfg)
        b = Trainer(gen_cfg, disc_cfg, train_cfg)
        for pa, pb in zip(a.generator.parameters(), b.generator.parameters()):
            assert torch.equal(pa, pb)
        for pa, pb in zip(a.discriminator.parameters(), b.discriminator.parameters()):
            assert torch.equal(pa, pb)

    def test_xavier_variance_on_linear_map(self):
        torch.manual_seed(0)
        layer = nn.Linear(128, 64)
        xavier_initialize(layer)
        target = 2.0 / (128 + 64)
        empirical = layer.weight.detach().var().item()
        assert abs(empirical - target) / target < 0.20

    def test_biases_exactly_zero(self, tiny_configs):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
        for module in (trainer.generator, trainer.discriminator):
            for name, param in module.named_parameters():
                if name.endswith(".bias") and "norm" not in name:
                    assert not param.detach().abs().any(), name

    def test_norm_affine_identity(self, tiny_configs):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
        for module in trainer.generator.modules():
            if isinstance(module, nn.InstanceNorm2d):
                assert torch.equal(module.weight, torch.ones_like(module.weight))
                assert not module.bias.detach().abs().any()


class TestAdamFidelity:
    def test_single_step_matches_closed_form(self):
        theta0 = 3.0
        lr, b1, b2 = 2e-4, 0.5, 0.999
        param = torch.tensor([theta0], dtype=torch.float64, requires_grad=True)
        opt = torch.optim.Adam([param], lr=lr, betas=(b1, b2))
        loss = 0.5 * (param**2).sum()  # gradient = theta
        loss.backward()
        opt.step()
        expected = ref_adam_step(theta0, theta0, lr, b1, b2)
        assert abs(param.item() - expected) < 1e-10


class TestTrainLoop:
    def test_step_count_and_log_rows(self, slab_tree, tiny_configs, tmp_path):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        assert len(manifest.train_ids) == 8
        checkpoint = trainer.train(slab_tree, manifest, tmp_path / "run")
        lines = (tmp_path / "run" / "train_log.csv").read_text().splitlines()
        assert lines[0] == "step,adv,l1,ms_ssim_loss,total,d_loss"
        assert len(lines) == 1 + 3 * 4  # 3 epochs x ceil(8/2) steps
        assert checkpoint.name == "epoch_3.pt"
        assert checkpoint.is_file()
        assert (tmp_path / "run" / "manifest.txt").is_file()

    def test_reruns_reproduce_artifacts_exactly(self, slab_tree, tiny_configs, tmp_path):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        Trainer(gen_cfg, disc_cfg, train_cfg).train(slab_tree, manifest, tmp_path / "a")
        Trainer(gen_cfg, disc_cfg, train_cfg).train(slab_tree, manifest, tmp_path / "b")
        for rel in ("train_log.csv", "manifest.txt", "checkpoints/epoch_3.pt"):
            assert (tmp_path / "a" / rel).read_bytes() == (
                tmp_path / "b" / rel
            ).read_bytes(), rel

    def test_resume_matches_uninterrupted_run(self, slab_tree, tiny_configs, tmp_path):
        gen_cfg, disc_cfg, base_cfg = tiny_configs
        from dataclasses import replace

        train_cfg = replace(base_cfg, checkpoint_every=1)
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        full = Trainer(gen_cfg, disc_cfg, train_cfg)
        full.train(slab_tree, manifest, tmp_path / "full")
        full_rows = (tmp_path / "full" / "train_log.csv").read_text().splitlines()

        resumed = load_checkpoint(tmp_path / "full" / "checkpoints" / "epoch_2.pt")
        assert resumed.epoch == 2
        resumed.train(slab_tree, manifest, tmp_path / "resumed")
        resumed_rows = (tmp_path / "resumed" / "train_log.csv").read_text().splitlines()
        # rows written after the interruption equal the tail of the full log
        assert resumed_rows[1:] == full_rows[-4:]

    def test_test_split_never_read(self, tmp_path, tiny_configs):
        volumes = tmp_path / "v"
        for i in range(4):
            write_patient(volumes, f"p{i}", seed=i)
        result = preprocess_volumes(volumes, tmp_path / "slabs", ratio=0.75, seed=0)
        for png in (tmp_path / "slabs" / "test").glob("*.png"):
            png.unlink()
        gen_cfg, disc_cfg, base_cfg = tiny_configs
        from dataclasses import replace

        trainer = Trainer(gen_cfg, disc_cfg, replace(base_cfg, epochs=1))
        trainer.train(tmp_path / "slabs", result.manifest, tmp_path / "run")
        assert (tmp_path / "run" / "train_log.csv").is_file()

    def test_empty_train_list_rejected(self, slab_tree, tiny_configs, tmp_path):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        empty = DatasetManifest(
            train_ids=[],
            test_ids=manifest.test_ids,
            split_ratio=0.8,
            rng_seed=0,
        )
        with pytest.raises(ValueError):
            Trainer(gen_cfg, disc_cfg, train_cfg).train(slab_tree, empty, tmp_path / "r")

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestTrainStep:
    def test_nan_target_names_component(self, tiny_configs):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
        src = torch.rand(2, 3, 32, 32) * 2 - 1
        tgt = torch.full_like(src, float("nan"))
        with pytest.raises(DivergenceError):
            trainer.train_step(src, tgt)

    def test_identical_state_and_batch_identical_deltas(self, tiny_configs):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        torch.manual_seed(99)
        src = torch.rand(2, 3, 32, 32) * 2 - 1
        tgt = torch.rand(2, 3, 32, 32) * 2 - 1
        results = []
        for _ in range(2):
            trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
            scalars = trainer.train_step(src, tgt)
            results.append((scalars, [p.detach().clone() for p in trainer.generator.parameters()]))
        assert results[0][0] == results[1][0]
        for pa, pb in zip(results[0][1], results[1][1]):
            assert torch.equal(pa, pb)

    def test_zero_weights_isolate_adversarial_gradient(self, tiny_configs):
        gen_cfg, disc_cfg, _ = tiny_configs

        class FrozenDisc(torch.nn.Module):
            def forward(self, source, candidate):
                return (candidate.sum(dim=1, keepdim=True))[:, :, ::4, ::4] * 0.1

        src = torch.rand(1, 3, 32, 32) * 2 - 1
        tgt = torch.rand(1, 3, 32, 32) * 2 - 1

        def grads(use_total):
            torch.manual_seed(5)
            from mritranslate.generator import TranslationGenerator

            gen = TranslationGenerator(gen_cfg)
            xavier_initialize(gen)
            out = gen(src)
            disc = FrozenDisc()
            adv = gan_criterion(disc(src, out), True, "bce")
            if use_total:
                loss = combine(
                    adv,
                    l1_loss(out, tgt),
                    ms_ssim_loss(out, tgt),
                    LossWeights(lambda1=0.0, lambda2=0.0),
                ).total
            else:
                loss = adv
            loss.backward()
            return [p.grad.clone() for p in gen.parameters()]

        for ga, gb in zip(grads(True), grads(False)):
            torch.testing.assert_close(ga, gb)


class TestCheckpointIO:
    def test_roundtrip_restores_everything(self, tiny_configs, tmp_path):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg, task=("T1", "FLAIR"))
        trainer.epoch = 2
        trainer.slab_root = "/data/somewhere"
        path = save_checkpoint(tmp_path / "ckpt" / "epoch_2.pt", trainer)
        back = load_checkpoint(path)
        assert back.epoch == 2
        assert back.task == ("T1", "FLAIR")
        assert back.slab_root == "/data/somewhere"
        assert back.gen_config == gen_cfg
        assert back.config == train_cfg
        for pa, pb in zip(trainer.generator.parameters(), back.generator.parameters()):
            assert torch.equal(pa, pb)
        opt_state = back.opt_g.state_dict()["param_groups"][0]
        assert opt_state["lr"] == train_cfg.lr_g
        assert opt_state["betas"] == (train_cfg.beta1, train_cfg.beta2)

    def test_atomic_write_leaves_no_temp(self, tiny_configs, tmp_path):
        gen_cfg, disc_cfg, train_cfg = tiny_configs
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg)
        save_checkpoint(tmp_path / "c" / "epoch_0.pt", trainer)
        assert [p.name for p in (tmp_path / "c").iterdir()] == ["epoch_0.pt"]
