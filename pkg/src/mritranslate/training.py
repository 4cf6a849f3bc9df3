"""Adversarial training loop: Xavier-initialized networks, twin Adam
optimizers, a 1:1 discriminator-then-generator update per batch, CSV step
logging, and atomic resumable checkpoints.

Reproducibility contract: (seed, manifest, configs) determine the run. The
data order for epoch ``e`` is drawn from a dedicated RNG seeded by
``seed * 1_000_003 + e``, so a resumed run replays exactly the order an
uninterrupted run would have used. All CPU kernels used here are
deterministic; on accelerators whose kernels are not, set
``torch.use_deterministic_algorithms(True)`` before training.
"""

from __future__ import annotations

import csv
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .dataio import DatasetManifest, PairedSlabs
from .discriminator import DiscriminatorConfig, PatchDiscriminator
from .errors import DivergenceError
from .generator import GeneratorConfig, TranslationGenerator
from .metrics import max_feasible_scales
from .objectives import LossWeights, combine, gan_criterion, l1_loss, ms_ssim_loss

LOG_COLUMNS = ("step", "adv", "l1", "ms_ssim_loss", "total", "d_loss")


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 2
    epochs: int = 200
    seed: int = 0
    resolution: int = 256
    checkpoint_every: int = 50
    gan_mode: str = "bce"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def xavier_initialize(module: nn.Module) -> None:
    """Xavier-uniform weights (gain 1) for conv/linear maps, zero biases,
    identity affine parameters for normalization layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Owns the two networks, their optimizers, and the update schedule."""

    def __init__(
        self,
        gen_config: GeneratorConfig = GeneratorConfig(),
        disc_config: DiscriminatorConfig = DiscriminatorConfig(),
        train_config: TrainConfig = TrainConfig(),
        task: tuple[str, str] = ("T1", "T2"),
    ):
        self.gen_config = gen_config
        self.disc_config = disc_config
        self.config = train_config
        self.task = tuple(task)
        torch.manual_seed(train_config.seed)
        self.generator = TranslationGenerator(gen_config)
        self.discriminator = PatchDiscriminator(disc_config)
        xavier_initialize(self.generator)
        xavier_initialize(self.discriminator)
        self.opt_g = torch.optim.Adam(
            self.generator.parameters(),
            lr=train_config.lr_g,
            betas=(train_config.beta1, train_config.beta2),
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(),
            lr=train_config.lr_d,
            betas=(train_config.beta1, train_config.beta2),
        )
        self.epoch = 0
        self.slab_root: Optional[str] = None
        self._scales = min(
            5, max_feasible_scales(train_config.resolution, train_config.resolution)
        )

    def train_step(self, source: torch.Tensor, target: torch.Tensor):
        """One discriminator update, then one generator update.

        Returns the per-step scalars (adv, l1, ms_ssim_loss, total, d_loss).
        """
        mode = self.config.gan_mode
        generated = self.generator(source)

        _set_requires_grad(self.discriminator, True)
        d_real = gan_criterion(self.discriminator(source, target), True, mode)
        d_fake = gan_criterion(
            self.discriminator(source, generated.detach()), False, mode
        )
        d_loss = 0.5 * (d_real + d_fake)
        if not torch.isfinite(d_loss):
            raise DivergenceError("non-finite loss component: d_loss")
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        _set_requires_grad(self.discriminator, False)
        g_adv = gan_criterion(self.discriminator(source, generated), True, mode)
        scales = min(self._scales, max_feasible_scales(*source.shape[-2:]))
        breakdown = combine(
            g_adv,
            l1_loss(generated, target),
            ms_ssim_loss(generated, target, scales=scales),
            self.config.weights,
        )
        self.opt_g.zero_grad()
        breakdown.total.backward()
        self.opt_g.step()
        _set_requires_grad(self.discriminator, True)
        return (*breakdown.floats(), float(d_loss.detach()))

    def train(self, slab_root, manifest: DatasetManifest, run_dir) -> Path:
        """Run the epoch loop over the manifest's train side only.

        Writes ``train_log.csv`` (one row per step), a manifest copy, and
        checkpoints at the configured cadence plus completion. Returns the
        final checkpoint path.
        """
        if not manifest.train_ids:
            raise ValueError("manifest has no training samples")
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        self.slab_root = str(Path(slab_root).resolve())
        manifest.write(run_dir / "manifest.txt")
        pairs = PairedSlabs(
            slab_root, manifest, self.task, "train", self.config.resolution
        )
        log_path = run_dir / "train_log.csv"
        resuming = self.epoch > 0 and log_path.exists()
        steps_per_epoch = -(-len(pairs) // self.config.batch_size)
        step = self.epoch * steps_per_epoch
        mode = "a" if resuming else "w"
        checkpoint_path = None
        with open(log_path, mode, newline="") as log_file:
            writer = csv.writer(log_file)
            if not resuming:
                writer.writerow(LOG_COLUMNS)
            for epoch in range(self.epoch + 1, self.config.epochs + 1):
                order = list(range(len(pairs)))
                random.Random(self.config.seed * 1_000_003 + epoch).shuffle(order)
                for start in range(0, len(order), self.config.batch_size):
                    batch = order[start : start + self.config.batch_size]
                    source, target = pairs.batch(batch)
                    step += 1
                    try:
                        scalars = self.train_step(source, target)
                    except DivergenceError as exc:
                        raise DivergenceError(
                            f"{exc} at step {step} (last finite step {step - 1})"
                        ) from exc
                    writer.writerow(
                        [step] + [f"{v:.8g}" for v in scalars]
                    )
                self.epoch = epoch
                if (
                    epoch % self.config.checkpoint_every == 0
                    or epoch == self.config.epochs
                ):
                    checkpoint_path = save_checkpoint(
                        run_dir / "checkpoints" / f"epoch_{epoch}.pt", self
                    )
        if checkpoint_path is None:  # resumed into an already-complete run
            checkpoint_path = save_checkpoint(
                run_dir / "checkpoints" / f"epoch_{self.epoch}.pt", self
            )
        return checkpoint_path

    def state_dict(self) -> dict:
        return {
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "epoch": self.epoch,
            "torch_rng": torch.get_rng_state(),
            "configs": {
                "generator": asdict(self.gen_config),
                "discriminator": asdict(self.disc_config),
                "train": asdict(self.config),
                "task": list(self.task),
                "slab_root": self.slab_root,
            },
        }


def save_checkpoint(path, trainer: Trainer) -> Path:
    """Atomic checkpoint write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(trainer.state_dict(), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Trainer:
    """Rebuild a Trainer (networks, optimizers, epoch, RNG) from disk."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    configs = payload["configs"]
    train_kwargs = dict(configs["train"])
    train_kwargs["weights"] = LossWeights(**train_kwargs["weights"])
    trainer = Trainer(
        gen_config=GeneratorConfig(**configs["generator"]),
        disc_config=DiscriminatorConfig(**configs["discriminator"]),
        train_config=TrainConfig(**train_kwargs),
        task=tuple(configs.get("task", ("T1", "T2"))),
    )
    trainer.generator.load_state_dict(payload["generator"])
    trainer.discriminator.load_state_dict(payload["discriminator"])
    trainer.opt_g.load_state_dict(payload["opt_g"])
    trainer.opt_d.load_state_dict(payload["opt_d"])
    trainer.epoch = payload["epoch"]
    trainer.slab_root = configs.get("slab_root")
    torch.set_rng_state(payload["torch_rng"])
    return trainer
