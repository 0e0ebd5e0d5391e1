#!/usr/bin/env python3
"""Command-line interface for IR super-resolution."""

from __future__ import annotations

import json
import os
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import typer
from loguru import logger
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from irsr.checkpoint import checkpoint_load
from irsr.config import (
    DEFAULT_CLASSES,
    DatasetManifest,
    GeneratorConfig,
    InferOptions,
    NetworkMode,
    SimulateConfig,
    TrainConfig,
    load_config,
    parse_config,
    write_resolved,
)
from irsr.data_pipeline import materialize_dataset, sources_from_manifest
from irsr.errors import InputError, IrsrError
from irsr.imaging import read_masks, read_plane
from irsr.inference import infer as run_inference
from irsr.metrics import class_overlay, comparison_panel, quality_report
from irsr.settings import ENV_DATA_ROOT, ENV_LOG_LEVEL, configure_logging, data_root, setup_environment
from irsr.synthetic import write_synthetic_dataset
from irsr.trainer import StepEvent, Trainer

app = typer.Typer(help="Class-conditioned GAN super-resolution of infrared images")
console = Console()


@app.callback()
def main(
    ctx: typer.Context,
    log_level: Optional[str] = typer.Option(None, help="Log level (default: $IRSR_LOG_LEVEL or INFO)"),
) -> None:
    setup_environment()
    ctx.obj = {"log_level": configure_logging(log_level)}


@contextmanager
def handle_errors() -> Iterator[None]:
    """Map toolkit errors to their exit codes."""
    try:
        yield
    except IrsrError as e:
        logger.error(str(e))
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        raise typer.Exit(e.exit_code) from e


def _with_overrides(cfg: TrainConfig | SimulateConfig, **overrides: object) -> dict:
    data = cfg.model_dump()
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return data


@app.command()
def simulate(
    config: Path = typer.Option(..., "--config", help="Simulation config (JSON)"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed"),
    out: Optional[Path] = typer.Option(None, help="Override the output directory"),
) -> None:
    """Materialize simulated LR/HR pairs for every manifest entry."""
    console.print(Panel.fit("🧪 Simulating paired LR/HR data", title="simulate", border_style="cyan"))
    with handle_errors():
        cfg = parse_config(
            SimulateConfig, _with_overrides(load_config(SimulateConfig, config), seed=seed, out_dir=out)
        )
        manifest = DatasetManifest.load(cfg.manifest)
        sources = sources_from_manifest(manifest, "train") + sources_from_manifest(manifest, "val")
        write_resolved(cfg, cfg.out_dir)
        report = materialize_dataset(sources, cfg.out_dir, cfg.degradation, cfg.augmentation, cfg.seed)

        console.print(f"✅ Wrote {len(report.written)} pairs to {cfg.out_dir}")
        if not report.ok:
            table = Table(title="Failed entries")
            table.add_column("entry")
            table.add_column("error")
            for name, error in report.failed.items():
                table.add_row(name, error)
            console.print(table)
            raise InputError(f"{len(report.failed)} manifest entries failed")


@app.command()
def synth(
    out: Path = typer.Option(..., help="Output directory"),
    count: int = typer.Option(64, help="Number of images"),
    size: int = typer.Option(128, help="Image side length in pixels"),
    seed: int = typer.Option(0, help="Random seed"),
    val_fraction: float = typer.Option(0.25, help="Fraction of images in the validation split"),
) -> None:
    """Generate a procedural tissue dataset with class masks."""
    console.print(Panel.fit("🎨 Generating synthetic tissue", title="synth", border_style="magenta"))
    with handle_errors():
        manifest = write_synthetic_dataset(out, count, size, seed, val_fraction)
        console.print(f"✅ Manifest: {manifest}")


@app.command()
def train(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Training config (JSON)"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed"),
    mode: Optional[NetworkMode] = typer.Option(None, help="Generator normalization variant"),
    resume: Optional[Path] = typer.Option(None, help="Checkpoint to resume from"),
    out: Optional[Path] = typer.Option(None, help="Override the output directory"),
    ablation: Optional[str] = typer.Option(None, help="'mse-only' stops after MSE pretraining"),
) -> None:
    """Run MSE pretraining followed by adversarial training."""
    with handle_errors():
        base = load_config(TrainConfig, config)
        data = _with_overrides(base, seed=seed, out_dir=out, ablation=ablation)
        if mode is not None:
            data["generator"]["mode"] = mode.value
        cfg = parse_config(TrainConfig, data)

        console.print(
            Panel.fit(
                f"🚀 Training {cfg.generator.mode.value.upper()}\n"
                f"Output: {cfg.out_dir}",
                title="train",
                border_style="green",
            )
        )
        configure_logging(ctx.obj["log_level"], log_dir=cfg.out_dir / "logs")
        write_resolved(cfg, cfg.out_dir)

        sched = cfg.schedule
        total = sched.phase1_iters + (0 if cfg.ablation == "mse-only" else sched.phase2_iters)
        with Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("G updates", total=total)

            def on_step(event: StepEvent) -> None:
                if event.kind == "g":
                    done = event.iteration if event.phase == 1 else sched.phase1_iters + event.iteration
                    progress.update(task, completed=done, description=f"phase {event.phase}")

            trainer = Trainer.from_config(cfg, resume=resume, on_step=on_step)
            try:
                history = trainer.run(cfg.ablation)
            finally:
                trainer.close()

        if history:
            last = history[-1]
            console.print(f"📊 Final validation: MSE {last.mse:.6f}, PSNR {last.psnr:.2f} dB, SSIM {last.ssim:.4f}")
        console.print(f"✅ Checkpoints in {cfg.out_dir / 'checkpoints'}")


@app.command()
def infer(
    band: Path = typer.Option(..., help="Single-band absorbance raster"),
    checkpoint: Path = typer.Option(..., help="Trained checkpoint"),
    out: Path = typer.Option(..., help="Output SR raster (.png or .tif)"),
    masks: Optional[Path] = typer.Option(None, help="Class masks (indexed raster or directory)"),
    config: Optional[Path] = typer.Option(None, "--config", help="Inference options (JSON)"),
    tile: Optional[int] = typer.Option(None, help="Tile size"),
    overlap: Optional[int] = typer.Option(None, help="Tile overlap"),
    workers: Optional[int] = typer.Option(None, help="Concurrent tile workers"),
    band_index: Optional[int] = typer.Option(None, help="Plane of a multi-band raster"),
) -> None:
    """Super-resolve one absorbance band."""
    console.print(Panel.fit("🔬 Super-resolving band", title="infer", border_style="blue"))
    with handle_errors():
        options = load_config(InferOptions, config) if config else InferOptions()
        data = options.model_dump()
        for key, value in {"tile": tile, "overlap": overlap, "workers": workers, "band_index": band_index}.items():
            if value is not None:
                data[key] = value
        options = parse_config(InferOptions, data)
        report = run_inference(band, masks, checkpoint, out, options)
        console.print(
            f"✅ {report.height}x{report.width} in {report.elapsed_s:.2f}s "
            f"({report.s_per_mpx:.2f} s/MPx; reference {report.reference_s_per_mpx:.0f} s/MPx)"
        )


def mask_classes(classes: str | None, checkpoint: Path | None) -> tuple[str, ...]:
    """Class order from --classes, else the checkpoint's generator, else the default."""
    if classes is not None:
        names = tuple(name.strip() for name in classes.split(",") if name.strip())
        return parse_config(GeneratorConfig, {"class_names": names}).class_names
    if checkpoint is not None:
        return checkpoint_load(checkpoint).generator.cfg.class_names
    return DEFAULT_CLASSES


@app.command("eval")
def evaluate(
    sr: Path = typer.Option(..., help="Super-resolved image"),
    ref: Path = typer.Option(..., help="Reference HR image"),
    lr: Optional[Path] = typer.Option(None, help="Network input, shown first in the panel"),
    baseline: Optional[Path] = typer.Option(None, help="Second SR image (e.g. U-GAN) to compare"),
    masks: Optional[Path] = typer.Option(None, help="Class masks shown in the panel"),
    classes: Optional[str] = typer.Option(None, help="Comma-separated class order of the masks"),
    checkpoint: Optional[Path] = typer.Option(None, help="Take the class order from this checkpoint"),
    out: Path = typer.Option(Path("eval"), help="Output directory for metrics and panel"),
) -> None:
    """PSNR, SSIM and high-frequency energy against a reference, plus a panel."""
    with handle_errors():
        class_names = mask_classes(classes, checkpoint)
        reference = read_plane(ref).values
        primary = read_plane(sr).values
        reports = {"sr": quality_report(primary, reference)}

        planes, labels = [], []
        if lr is not None:
            planes.append(read_plane(lr).values)
            labels.append("input")
        if masks is not None:
            stack = read_masks(masks, class_names)
            planes.append(class_overlay(stack.index_map(), len(stack.classes)))
            labels.append("masks")
        if baseline is not None:
            other = read_plane(baseline).values
            reports["baseline"] = quality_report(other, reference)
            planes.append(other)
            labels.append("U-GAN")
        planes += [primary, reference]
        labels += ["C-GAN" if baseline is not None else "SR", "reference"]

        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(
            json.dumps({name: r.model_dump() for name, r in reports.items()}, indent=2)
        )
        panel = comparison_panel(planes, labels, out / "panel.png")

        table = Table(title="Image quality")
        for column in ("image", "PSNR (dB)", "SSIM", "MSE", "Laplacian energy"):
            table.add_column(column)
        for name, r in reports.items():
            table.add_row(name, f"{r.psnr:.2f}", f"{r.ssim:.4f}", f"{r.mse:.6f}", f"{r.laplacian_energy:.6f}")
        table.add_row("reference", "", "", "", f"{reports['sr'].reference_laplacian_energy:.6f}")
        console.print(table)
        console.print(f"🖼️  Panel: {panel}")


@app.command()
def info(
    checkpoint: Optional[Path] = typer.Option(None, help="Summarize a checkpoint"),
) -> None:
    """Show environment and, optionally, checkpoint information."""
    console.print(Panel.fit("ℹ️  IR super-resolution toolkit", title="info", border_style="blue"))
    console.print(f"🐍 Python: {sys.version.split()[0]}")
    for module in ("torch", "torchvision", "numpy", "scipy", "pydantic"):
        try:
            version = __import__(module).__version__
        except ImportError:
            version = "not installed"
        console.print(f"📦 {module}: {version}")
    console.print(f"📁 {ENV_DATA_ROOT}: {data_root() or 'not set'}")
    console.print(f"🔧 {ENV_LOG_LEVEL}: {os.getenv(ENV_LOG_LEVEL, 'INFO')}")

    if checkpoint is not None:
        with handle_errors():
            state = checkpoint_load(checkpoint)
            cfg = state.generator.cfg
            console.print(f"\n💾 Checkpoint {checkpoint}")
            console.print(f"   mode: {cfg.mode.value}, widths: {cfg.channel_schedule}, classes: {cfg.class_names}")
            console.print(
                f"   phase {state.position.phase}, iteration {state.position.iteration}, "
                f"{state.position.g_updates} G / {state.position.d_updates} D updates"
            )


if __name__ == "__main__":
    app()
