"""Two-phase training: MSE pretraining, then adversarial fine-tuning.

Phase 1 updates the generator on pixel MSE only. Phase 2 repeats a cycle of
``g_steps_per_d_step`` generator updates on the weighted perceptual +
adversarial loss followed by one discriminator update. Iterations count
generator updates in both phases.
"""

from __future__ import annotations

import json
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential
from torch import nn

from irsr import metrics
from irsr.checkpoint import SchedulePosition, TrainingState, checkpoint_load, checkpoint_save
from irsr.config import DatasetManifest, TrainConfig, TrainingSchedule
from irsr.data_pipeline import (
    PatchBatch,
    PatchBatchStream,
    build_validation_batch,
    sources_from_manifest,
)
from irsr.discriminator import Discriminator, build_discriminator
from irsr.errors import CheckpointError, ConfigurationError, NumericError
from irsr.generator import Generator, build_generator, to_signed, to_unit
from irsr.losses import (
    FeatureExtractor,
    adv_disc_loss,
    adv_gen_loss,
    build_extractor,
    mse_loss,
    perceptual_loss,
    total_loss,
)

LR_RATIO_TOLERANCE = 1e-12


@dataclass(frozen=True)
class StepEvent:
    """Emitted after every optimizer update."""

    phase: int
    kind: Literal["g", "d"]
    iteration: int
    g_updates: int
    d_updates: int
    lr_g: float
    lr_d: float
    loss: float


class ValidationRecord(BaseModel):
    """Mean metrics of the generator over the validation set."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    phase: int = 0
    iteration: int = 0
    mse: float
    psnr: float
    ssim: float


StepCallback = Callable[[StepEvent], None]


def _generate(gen: nn.Module, batch: PatchBatch) -> torch.Tensor:
    """Signed-range SR output for a unit-range batch."""
    cfg = getattr(gen, "cfg", None)
    masks = batch.masks if cfg is None or cfg.conditional else None
    return gen(to_signed(batch.lr), masks)


def validate(gen: nn.Module, val_batch: PatchBatch | None) -> ValidationRecord:
    """Mean MSE, PSNR and SSIM in unit range, computed in eval mode.

    PSNR is ``inf`` when any pair is reproduced exactly.
    """
    if val_batch is None or len(val_batch) == 0:
        raise ConfigurationError("validation set is empty")

    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            sr = to_unit(_generate(gen, val_batch)).clamp(0.0, 1.0)
    finally:
        gen.train(was_training)

    sr_np = sr[:, 0].double().numpy()
    hr_np = val_batch.hr[:, 0].double().numpy()
    mses = [metrics.mse(s, h) for s, h in zip(sr_np, hr_np, strict=True)]
    psnrs = [metrics.psnr(s, h) for s, h in zip(sr_np, hr_np, strict=True)]
    ssims = [metrics.ssim(s, h) for s, h in zip(sr_np, hr_np, strict=True)]
    return ValidationRecord(
        mse=float(np.mean(mses)),
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
    )


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _append_jsonl(path: Path, row: BaseModel) -> None:
    """Append one JSON line, retrying transient filesystem errors."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as f:
        f.write(row.model_dump_json() + "\n")


def read_metrics_log(path: Path) -> list[ValidationRecord]:
    """Validation history of a run; empty when no log exists yet."""
    if not path.exists():
        return []
    return [ValidationRecord.model_validate(json.loads(line)) for line in path.read_text().splitlines() if line]


class Trainer:
    """Owns the networks, optimizers, schedule position and outputs of a run."""

    def __init__(
        self,
        gen: Generator,
        disc: Discriminator,
        extractor: FeatureExtractor,
        schedule: TrainingSchedule,
        train_stream: PatchBatchStream,
        val_batch: PatchBatch | None = None,
        out_dir: Path | None = None,
        seed: int = 0,
        on_step: StepCallback | None = None,
    ) -> None:
        self.gen = gen
        self.disc = disc
        self.extractor = extractor
        self.schedule = schedule
        self.stream = train_stream
        self.val_batch = val_batch
        self.out_dir = out_dir
        self.seed = seed
        self.on_step = on_step
        self.position = SchedulePosition()
        self.history: list[ValidationRecord] = []
        self._last_fake: torch.Tensor | None = None

        self.g_opt = torch.optim.Adam(
            gen.parameters(), lr=schedule.lr_g, betas=schedule.betas, eps=schedule.eps
        )
        self.d_opt = torch.optim.Adam(
            disc.parameters(), lr=schedule.lr_d, betas=schedule.betas, eps=schedule.eps
        )

    # -- outputs ---------------------------------------------------------

    @property
    def checkpoint_dir(self) -> Path | None:
        """Directory for checkpoints, or None when the run writes no files."""
        return self.out_dir / "checkpoints" if self.out_dir is not None else None

    @property
    def metrics_path(self) -> Path | None:
        """Validation log path."""
        return self.out_dir / "metrics.jsonl" if self.out_dir is not None else None

    def state(self) -> TrainingState:
        """Snapshot of everything needed to resume this run."""
        return TrainingState(
            generator=self.gen,
            discriminator=self.disc,
            g_optimizer=self.g_opt.state_dict(),
            d_optimizer=self.d_opt.state_dict(),
            schedule=self.schedule,
            position=self.position.model_copy(),
            stream=self.stream.position.model_copy(),
            seed=self.seed,
            torch_rng=torch.get_rng_state(),
        )

    def save_checkpoint(self, name: str) -> Path | None:
        """Write the current state as ``checkpoints/<name>``."""
        if self.checkpoint_dir is None:
            return None
        path = checkpoint_save(self.state(), self.checkpoint_dir / name)
        logger.debug(f"Checkpoint {name} at phase {self.position.phase} iteration {self.position.iteration}")
        return path

    def restore(self, state: TrainingState) -> None:
        """Continue from a loaded checkpoint."""
        if state.generator.cfg != self.gen.cfg:
            raise ConfigurationError("checkpoint generator architecture differs from the configured one")
        if state.discriminator is not None and state.discriminator.cfg != self.disc.cfg:
            raise ConfigurationError("checkpoint discriminator architecture differs from the configured one")
        self.gen.load_state_dict(state.generator.state_dict())
        if state.discriminator is not None:
            self.disc.load_state_dict(state.discriminator.state_dict())
        if state.g_optimizer is not None:
            self.g_opt.load_state_dict(state.g_optimizer)
        if state.d_optimizer is not None:
            self.d_opt.load_state_dict(state.d_optimizer)
        self._enforce_lr_schedule()
        self.position = state.position.model_copy()
        if state.stream is not None:
            self.stream.seek(state.stream)
        if state.torch_rng is not None:
            torch.set_rng_state(state.torch_rng)
        logger.info(
            f"Resumed at phase {self.position.phase}, iteration {self.position.iteration} "
            f"({self.position.g_updates} G / {self.position.d_updates} D updates)"
        )

    # -- schedule bookkeeping ---------------------------------------------

    def _enforce_lr_schedule(self) -> None:
        """Reset both optimizers to the coupled learning rates."""
        for group in self.g_opt.param_groups:
            group["lr"] = self.schedule.lr_g
        for group in self.d_opt.param_groups:
            group["lr"] = self.schedule.lr_d

    def _learning_rates(self) -> tuple[float, float]:
        """Current (lr_g, lr_d); raises if their ratio drifted."""
        lr_g = self.g_opt.param_groups[0]["lr"]
        lr_d = self.d_opt.param_groups[0]["lr"]
        if abs(lr_d / lr_g - self.schedule.lr_d_ratio) > LR_RATIO_TOLERANCE:
            raise ConfigurationError(
                f"learning-rate coupling broken: lr_d/lr_g = {lr_d / lr_g}, "
                f"expected {self.schedule.lr_d_ratio}"
            )
        return lr_g, lr_d

    def _emit(self, kind: Literal["g", "d"], loss: torch.Tensor) -> None:
        """Check the learning rates and notify ``on_step``."""
        lr_g, lr_d = self._learning_rates()
        event = StepEvent(
            phase=self.position.phase,
            kind=kind,
            iteration=self.position.iteration,
            g_updates=self.position.g_updates,
            d_updates=self.position.d_updates,
            lr_g=lr_g,
            lr_d=lr_d,
            loss=float(loss.detach()),
        )
        if self.on_step is not None:
            self.on_step(event)

    def _after_g_update(self) -> None:
        """Count one generator update."""
        self.position.iteration += 1
        self.position.g_updates += 1

    def _periodic(self) -> None:
        """Validate and checkpoint on their configured intervals."""
        it = self.position.iteration
        if self.val_batch is not None and it % self.schedule.validate_every == 0:
            self.run_validation()
        if it % self.schedule.checkpoint_every == 0:
            self.save_checkpoint("latest.ckpt")

    def run_validation(self) -> ValidationRecord:
        """Validate now, record the result and append it to the metrics log."""
        record = validate(self.gen, self.val_batch).model_copy(
            update={"phase": self.position.phase, "iteration": self.position.iteration}
        )
        self.history.append(record)
        if self.metrics_path is not None:
            _append_jsonl(self.metrics_path, record)
        logger.info(
            f"[phase {record.phase} it {record.iteration}] val MSE {record.mse:.6f} "
            f"PSNR {record.psnr:.2f} dB SSIM {record.ssim:.4f}"
        )
        return record

    # -- phase 1 -----------------------------------------------------------

    def _mse_step(self, batch: PatchBatch) -> torch.Tensor:
        """One phase-1 generator update on pixel MSE."""
        self.g_opt.zero_grad(set_to_none=True)
        sr = _generate(self.gen, batch)
        loss = mse_loss(to_signed(batch.hr), sr)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite MSE loss at phase 1 iteration {self.position.iteration}: {loss.item()}"
            )
        loss.backward()
        self.g_opt.step()
        return loss

    def pretrain_mse(self, until: int | None = None) -> Generator:
        """Minimize pixel MSE for ``phase1_iters`` generator updates.

        ``until`` stops early at that phase-1 iteration (used to split runs).
        """
        if self.position.phase1_complete:
            logger.info("Phase 1 already complete; skipping")
            return self.gen

        total = self.schedule.phase1_iters
        stop = total if until is None else min(until, total)
        self.gen.train()
        if self.position.iteration < stop:
            logger.info(f"Phase 1: MSE pretraining from iteration {self.position.iteration} to {stop}")
        while self.position.iteration < stop:
            loss = self._mse_step(next(self.stream))
            self._after_g_update()
            self._emit("g", loss)
            self._periodic()

        if self.position.iteration >= total:
            self.position = self.position.model_copy(
                update={"phase": 2, "iteration": 0, "phase1_complete": True}
            )
            self.save_checkpoint("phase1.ckpt")
            self.save_checkpoint("latest.ckpt")
        return self.gen

    # -- phase 2 -----------------------------------------------------------

    def _adversarial_g_step(self, batch: PatchBatch) -> torch.Tensor:
        """One phase-2 generator update; the discriminator stays frozen."""
        self.g_opt.zero_grad(set_to_none=True)
        self.disc.requires_grad_(False)
        try:
            sr = _generate(self.gen, batch)
            loss = total_loss(
                perceptual_loss(to_signed(batch.hr), sr, self.extractor),
                adv_gen_loss(self.disc(sr)),
                self.schedule.weights,
            )
            assert isinstance(loss, torch.Tensor)
            loss.backward()
        finally:
            self.disc.requires_grad_(True)
        self.g_opt.step()
        self._last_fake = sr.detach()
        return loss

    def _d_step(self, batch: PatchBatch) -> torch.Tensor:
        """One discriminator update on real patches and the latest fakes."""
        if self._last_fake is None:
            raise ConfigurationError("discriminator step before any generator step")
        self.d_opt.zero_grad(set_to_none=True)
        loss = adv_disc_loss(self.disc(to_signed(batch.hr)), self.disc(self._last_fake))
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite discriminator loss: {loss.item()}")
        loss.backward()
        self.d_opt.step()
        self.position.d_updates += 1
        return loss

    def train_adversarial(
        self, require_pretrained: bool = True, until: int | None = None
    ) -> tuple[Generator, Discriminator]:
        """Run phase 2 until ``phase2_iters`` generator updates are done.

        Each generator update is followed by a discriminator update whenever
        the phase-2 iteration is a multiple of ``g_steps_per_d_step``.
        """
        if not self.position.phase1_complete:
            if require_pretrained:
                raise ConfigurationError("adversarial training needs an MSE-pretrained generator")
            logger.warning("Starting adversarial training without MSE pretraining")
            self.position = self.position.model_copy(update={"phase": 2, "iteration": 0})

        total = self.schedule.phase2_iters
        stop = total if until is None else min(until, total)
        ratio = self.schedule.g_steps_per_d_step
        self.gen.train()
        self.disc.train()
        if self.position.iteration < stop:
            logger.info(
                f"Phase 2: adversarial training from iteration {self.position.iteration} to {stop} "
                f"({ratio} G steps per D step)"
            )
        while self.position.iteration < stop:
            batch = next(self.stream)
            try:
                g_loss = self._adversarial_g_step(batch)
            except NumericError:
                self.save_checkpoint("last_good.ckpt")
                raise
            self._after_g_update()
            self._emit("g", g_loss)
            if self.position.iteration % ratio == 0:
                try:
                    d_loss = self._d_step(batch)
                except NumericError:
                    self.save_checkpoint("last_good.ckpt")
                    raise
                self._emit("d", d_loss)
            self._periodic()

        if self.position.iteration >= total:
            self.save_checkpoint("final.ckpt")
            self.save_checkpoint("latest.ckpt")
        return self.gen, self.disc

    def run(self, ablation: str = "none") -> list[ValidationRecord]:
        """Both phases, or phase 1 alone for the "mse-only" ablation."""
        self.pretrain_mse()
        if ablation == "mse-only":
            logger.info("MSE-only ablation: skipping adversarial phase")
            self.save_checkpoint("final.ckpt")
        else:
            self.train_adversarial()
        return self.history

    def close(self) -> None:
        """Stop prefetch workers of the training stream."""
        self.stream.close()

    @classmethod
    def from_config(
        cls,
        cfg: TrainConfig,
        resume: Path | None = None,
        on_step: StepCallback | None = None,
    ) -> Trainer:
        """Build models, data and optimizers for a training config."""
        manifest = DatasetManifest.load(cfg.manifest)
        if manifest.classes != cfg.generator.class_names:
            raise ConfigurationError(
                f"manifest classes {manifest.classes} differ from generator classes "
                f"{cfg.generator.class_names}"
            )
        train_sources = sources_from_manifest(manifest, "train")
        val_sources = sources_from_manifest(manifest, "val")
        sched = cfg.schedule

        stream = PatchBatchStream(
            train_sources,
            cfg.degradation,
            cfg.augmentation,
            patch_size=sched.patch_size,
            batch_size=sched.batch_size,
            seed=cfg.seed,
            workers=cfg.prefetch_workers,
        )
        val_batch = None
        if val_sources:
            val_batch = build_validation_batch(val_sources, cfg.degradation, sched.patch_size, cfg.seed)
        else:
            logger.warning("Manifest has no validation items; validation disabled")

        trainer = cls(
            gen=build_generator(cfg.generator, seed=cfg.seed),
            disc=build_discriminator(cfg.discriminator, seed=cfg.seed + 1),
            extractor=build_extractor(cfg.extractor),
            schedule=sched,
            train_stream=stream,
            val_batch=val_batch,
            out_dir=cfg.out_dir,
            seed=cfg.seed,
            on_step=on_step,
        )
        logger.info(
            f"{cfg.generator.mode.value} run: {len(train_sources)} train / {len(val_sources)} val images, "
            f"batch {sched.batch_size}, patch {sched.patch_size}"
        )
        if resume is not None:
            state = checkpoint_load(resume)
            if state.seed != cfg.seed:
                raise CheckpointError(f"checkpoint seed {state.seed} differs from run seed {cfg.seed}")
            trainer.restore(state)
            if trainer.metrics_path is not None:
                trainer.history = read_metrics_log(trainer.metrics_path)
        return trainer
