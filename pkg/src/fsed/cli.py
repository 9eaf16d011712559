"""Command-line surface for the few-shot sound-event-detection pipeline.

Commands: synth (query clips + truth TSV from a source manifest), train,
detect, tune (per-class thresholds), eval (event-based F1), and
bench-synthetic (the end-to-end two-arm synthetic benchmark). Every command
writes a run manifest next to its outputs recording the command, effective
config, seed, and file lists.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import contextlib
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import tomli

from . import __version__
from .bench import BenchConfig, run_bench
from .detector import (
    detect_events,
    distances_from_embeddings,
    embed_windows,
    compute_prototype,
    load_sigmas,
    load_support_manifest,
    save_sigmas,
    tune_threshold,
    write_detections_tsv,
)
from .dsp import extract_features, read_wav, write_wav
from .embedding import load_checkpoint, save_checkpoint
from .errors import (
    EmptyDevSetError,
    FsedError,
    InvalidCollarError,
    InvalidConfigError,
    InvalidDistanceError,
    ManifestError,
    NonFiniteGradientError,
    UnknownClassError,
)
from .evaluator import event_f1, read_events_tsv
from .loss import LossConfig
from .synthesis import generate_eval_clip, load_manifest, write_truth_tsv
from .trainer import TrainConfig, train

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str
    started_utc: str
    finished_utc: str = ""
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        self.finished_utc = _utc_now()
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(command: str, config: dict, seed: int | None,
              inputs: list, outputs: list) -> RunManifest:
    return RunManifest(
        command=command,
        config=config,
        seed=seed,
        version=__version__,
        started_utc=_utc_now(),
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
    )


@contextlib.contextmanager
def _exit_on_error():
    """Map package errors onto the documented exit codes."""
    try:
        yield
    except (NonFiniteGradientError, InvalidDistanceError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    except (InvalidConfigError, InvalidCollarError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    except (FsedError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_DATA)


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise InvalidConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _iter_wavs(directory: Path) -> list[Path]:
    wavs = sorted(directory.glob("*.wav"))
    if not wavs:
        raise ManifestError(f"no .wav files under {directory}")
    return wavs


@click.group()
@click.version_option(version=__version__, prog_name="fsed")
def main() -> None:
    """Few-shot sound event detection: synthesis, training, inference, scoring."""


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command("synth")
@click.argument("manifest_in", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--target-class", required=True, help="Event class to embed in the clips.")
@click.option("--clips", default=500, show_default=True, help="Number of query clips.")
@click.option("--duration", default=30.0, show_default=True, help="Clip length in seconds.")
@click.option("--presence", default=0.5, show_default=True,
              help="Probability that a clip contains the target event.")
@click.option("--ebr", default="-6,0,6", show_default=True,
              help="Comma-separated event-to-background ratios in dB.")
@click.option("--seed", default=0, show_default=True)
def cmd_synth(manifest_in, out_dir, target_class, clips, duration, presence, ebr, seed):
    """Generate query clips plus a ground-truth TSV from a source manifest."""
    with _exit_on_error():
        ebr_set = _parse_float_list(ebr)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        bank = load_manifest(manifest_in)
        class_id = bank.class_id(target_class)
        rng = np.random.default_rng(seed)
        truth_rows = []
        outputs = []
        for i in range(clips):
            clip = generate_eval_clip(rng, bank, class_id, duration_s=duration,
                                      presence_rate=presence, ebr_set_db=ebr_set)
            clip_id = f"clip_{i:05d}"
            wav_path = out / f"{clip_id}.wav"
            write_wav(wav_path, clip)
            outputs.append(wav_path)
            for ann in clip.annotations:
                truth_rows.append((clip_id, ann.onset_s, ann.offset_s, ann.class_name))
        truth_path = out / "truth.tsv"
        write_truth_tsv(truth_path, truth_rows)
        outputs.append(truth_path)
        cfg = {"target_class": target_class, "clips": clips, "duration": duration,
               "presence": presence, "ebr": list(ebr_set)}
        _manifest("synth", cfg, seed, [manifest_in], outputs).write(out / "manifest.json")
        click.echo(f"wrote {clips} clips, {len(truth_rows)} truth events -> {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {
    "batch_size": int, "max_epochs": int, "steps_per_epoch": int, "lr": float,
    "n_verif_pairs": int, "background_class_enabled": bool, "select_final": bool,
    "workers": int, "seed": int, "margin": float, "w_bg": float,
}


def _load_train_toml(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    table = raw.get("train", raw)
    unknown = set(table) - set(_TRAIN_KEYS)
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    return {k: _TRAIN_KEYS[k](v) for k, v in table.items()}


def _build_train_config(config_path: str | None, flag_values: dict) -> TrainConfig:
    merged = _load_train_toml(config_path)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    loss = LossConfig(margin=merged.pop("margin", 1.0), w_bg=merged.pop("w_bg", 2.0))
    return TrainConfig(loss=loss, **merged)


@main.command("train")
@click.argument("manifest_in", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_ckpt", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML config; explicit flags override it.")
@click.option("--holdout", required=True,
              help="Comma-separated class names held out for verification.")
@click.option("--epochs", "max_epochs", type=int, default=None,
              help="Training epochs (default 100).")
@click.option("--batch-size", type=int, default=None)
@click.option("--steps-per-epoch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--no-background-class", "background_off", is_flag=True, default=False,
              help="Ablation: event-only pairs, no background-noise class.")
@click.option("--select-final", is_flag=True, default=False,
              help="Return the final epoch instead of the best-verification one.")
@click.option("--workers", type=int, default=None,
              help="Pair-sampling rng streams; >1 changes sample order.")
@click.option("--seed", type=int, default=None)
def cmd_train(manifest_in, out_ckpt, config_path, holdout, max_epochs, batch_size,
              steps_per_epoch, lr, background_off, select_final, workers, seed):
    """Train the embedding; writes a checkpoint and a history CSV."""
    with _exit_on_error():
        flags = {
            "max_epochs": max_epochs, "batch_size": batch_size,
            "steps_per_epoch": steps_per_epoch, "lr": lr, "workers": workers,
            "seed": seed,
            "background_class_enabled": False if background_off else None,
            "select_final": True if select_final else None,
        }
        cfg = _build_train_config(config_path, flags)
        bank = load_manifest(manifest_in)
        holdout_names = [h.strip() for h in holdout.split(",") if h.strip()]
        if not holdout_names:
            raise InvalidConfigError("--holdout needs at least one class name")
        bank_train, bank_holdout = bank.split_classes(holdout_names)
        rng = np.random.default_rng(cfg.seed)
        params, history = train(bank_train, cfg, rng, bank_holdout)
        out = Path(out_ckpt)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out)
        history_path = out.with_suffix(".history.csv")
        history.write_csv(history_path)
        cfg_dict = {
            "batch_size": cfg.batch_size, "max_epochs": cfg.max_epochs,
            "steps_per_epoch": cfg.steps_per_epoch, "lr": cfg.lr,
            "background_class_enabled": cfg.background_class_enabled,
            "select_final": cfg.select_final, "workers": cfg.workers,
            "holdout": holdout_names, "margin": cfg.loss.margin, "w_bg": cfg.loss.w_bg,
        }
        _manifest("train", cfg_dict, cfg.seed, [manifest_in],
                  [out, history_path]).write(out.with_suffix(".manifest.json"))
        click.echo(
            f"trained {cfg.max_epochs} epochs, best verification epoch "
            f"{history.best_epoch} -> {out}"
        )


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

@main.command("detect")
@click.argument("ckpt", type=click.Path(exists=True, dir_okay=False))
@click.argument("support_manifest", type=click.Path(exists=True, dir_okay=False))
@click.argument("query_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("out_tsv", type=click.Path(dir_okay=False))
@click.option("--sigma", type=float, default=None, help="Detection threshold.")
@click.option("--sigma-file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Per-class threshold JSON from the tune command.")
def cmd_detect(ckpt, support_manifest, query_dir, out_tsv, sigma, sigma_file):
    """Detect the support class in every query clip; writes a detections TSV."""
    with _exit_on_error():
        if (sigma is None) == (sigma_file is None):
            raise InvalidConfigError("pass exactly one of --sigma / --sigma-file")
        params = load_checkpoint(ckpt)
        support = load_support_manifest(support_manifest)
        if sigma is None:
            sigmas = load_sigmas(sigma_file)
            if support.class_name not in sigmas:
                raise UnknownClassError(
                    f"{sigma_file} has no threshold for {support.class_name!r}"
                )
            sigma = sigmas[support.class_name]
        proto = compute_prototype(params, support)
        rows = []
        for wav in _iter_wavs(Path(query_dir)):
            feats = extract_features(read_wav(wav))
            emb = embed_windows(params, feats)
            ds = distances_from_embeddings(emb, proto, feats.frame_hop_s)
            for ev in detect_events(ds, sigma, support.class_name):
                rows.append((wav.stem, ev))
        out = Path(out_tsv)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_detections_tsv(out, rows)
        cfg = {"sigma": sigma, "k": support.k, "class": support.class_name}
        _manifest("detect", cfg, None, [ckpt, support_manifest, query_dir],
                  [out]).write(out.with_suffix(".manifest.json"))
        click.echo(f"{len(rows)} detections -> {out}")


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------

@main.command("tune")
@click.argument("ckpt", type=click.Path(exists=True, dir_okay=False))
@click.argument("support_manifest", type=click.Path(exists=True, dir_okay=False))
@click.argument("dev_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("dev_truth", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_json", type=click.Path(dir_okay=False))
@click.option("--collar", default=0.5, show_default=True, help="Onset collar in seconds.")
def cmd_tune(ckpt, support_manifest, dev_dir, dev_truth, out_json, collar):
    """Pick the per-class threshold maximizing event F1 on the dev set."""
    with _exit_on_error():
        params = load_checkpoint(ckpt)
        support = load_support_manifest(support_manifest)
        proto = compute_prototype(params, support)
        wavs = _iter_wavs(Path(dev_dir))
        if not wavs:
            raise EmptyDevSetError(f"no dev clips under {dev_dir}")
        curves = []
        for wav in wavs:
            feats = extract_features(read_wav(wav))
            emb = embed_windows(params, feats)
            curves.append(
                (wav.stem, distances_from_embeddings(emb, proto, feats.frame_hop_s))
            )
        truth = read_events_tsv(dev_truth)
        sigmas = tune_threshold({support.class_name: curves}, truth, collar_s=collar)
        out = Path(out_json)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_sigmas(out, sigmas)
        cfg = {"collar": collar, "k": support.k, "class": support.class_name}
        _manifest("tune", cfg, None, [ckpt, support_manifest, dev_dir, dev_truth],
                  [out]).write(out.with_suffix(".manifest.json"))
        click.echo(f"sigma[{support.class_name}] = {sigmas[support.class_name]:.6f} -> {out}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@main.command("eval")
@click.argument("detections_tsv", type=click.Path(exists=True, dir_okay=False))
@click.argument("truth_tsv", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_json", type=click.Path(dir_okay=False))
@click.option("--collar", default=0.5, show_default=True, help="Onset collar in seconds.")
def cmd_eval(detections_tsv, truth_tsv, out_json, collar):
    """Score detections against ground truth; writes JSON, prints the table."""
    with _exit_on_error():
        dets = read_events_tsv(detections_tsv)
        refs = read_events_tsv(truth_tsv)
        report = event_f1(refs, dets, collar_s=collar)
        out = Path(out_json)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(report.to_json())
        _manifest("eval", {"collar": collar}, None, [detections_tsv, truth_tsv],
                  [out]).write(out.with_suffix(".manifest.json"))
        click.echo(report.to_table(), nl=False)


# ---------------------------------------------------------------------------
# bench-synthetic
# ---------------------------------------------------------------------------

@main.command("bench-synthetic")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=None, type=int, help="Training epochs per arm.")
@click.option("--steps-per-epoch", default=None, type=int)
@click.option("--dev-clips", default=None, type=int)
@click.option("--eval-clips", default=None, type=int)
@click.option("--k", "k_shots", default=None, type=int, help="Support shots.")
def cmd_bench_synthetic(out_dir, seed, epochs, steps_per_epoch, dev_clips,
                        eval_clips, k_shots):
    """Train proposed and ablation arms on synthetic tones and compare F1."""
    with _exit_on_error():
        overrides = {
            k: v for k, v in {
                "epochs": epochs, "steps_per_epoch": steps_per_epoch,
                "n_dev_clips": dev_clips, "n_eval_clips": eval_clips,
                "k_shots": k_shots,
            }.items() if v is not None
        }
        cfg = BenchConfig(seed=seed, **overrides)
        out = Path(out_dir)
        report = run_bench(cfg, out)
        cfg_dict = {
            "epochs": cfg.epochs, "steps_per_epoch": cfg.steps_per_epoch,
            "n_dev_clips": cfg.n_dev_clips, "n_eval_clips": cfg.n_eval_clips,
            "k_shots": cfg.k_shots, "target_class": cfg.target_class,
        }
        _manifest("bench-synthetic", cfg_dict, seed, [],
                  [out / "report.json"]).write(out / "manifest.json")
        click.echo((out / "report.txt").read_text(), nl=False)
        click.echo(
            f"proposed F1 {report['arms']['proposed']['eval']['f1']:.3f}, "
            f"ablation F1 {report['arms']['ablation']['eval']['f1']:.3f}, "
            f"gap {report['f1_gap']:+.3f}"
        )


if __name__ == "__main__":
    main()
