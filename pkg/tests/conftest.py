"""Shared fixtures: session-scoped synthetic banks and one full bench run.

The bench run is the expensive fixture (a few minutes); everything that
needs a properly trained model shares it instead of retraining.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from fsed.bench import (
    BenchConfig,
    BenchData,
    build_bench_data,
    build_source_bank,
    run_bench,
)
from fsed.dsp import write_wav
from fsed.embedding import NetworkParams, load_checkpoint


@dataclass
class BenchRun:
    cfg: BenchConfig
    out_dir: Path
    report: dict
    elapsed_s: float


@pytest.fixture(scope="session")
def bench_cfg() -> BenchConfig:
    return BenchConfig(seed=0)


@pytest.fixture(scope="session")
def bench_run(tmp_path_factory, bench_cfg) -> BenchRun:
    """One full-scale benchmark run shared by every test that needs it."""
    out = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    report = run_bench(bench_cfg, out)
    return BenchRun(cfg=bench_cfg, out_dir=out, report=report,
                    elapsed_s=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def bench_data(bench_cfg) -> BenchData:
    """The bench's source banks, support pool, and clip sets (seed-exact)."""
    return build_bench_data(bench_cfg)


@pytest.fixture(scope="session")
def proposed_params(bench_run) -> NetworkParams:
    return load_checkpoint(bench_run.out_dir / "ckpt_proposed.bin")


@pytest.fixture(scope="session")
def small_bank():
    """Six tone classes, three noise backgrounds, small and fast to build."""
    cfg = BenchConfig(seed=5, n_events_per_class=5, background_duration_s=15.0,
                      n_backgrounds_per_color=1)
    return build_source_bank(np.random.default_rng(5), cfg)


@pytest.fixture(scope="session")
def source_dataset(tmp_path_factory, small_bank):
    """The small bank written to disk as WAVs plus a JSON-lines manifest."""
    root = tmp_path_factory.mktemp("sources")
    rows = []
    for cid, clips in small_bank.event_sources.items():
        name = small_bank.class_names[cid]
        for i, clip in enumerate(clips):
            wav = root / f"{name}_{i}.wav"
            write_wav(wav, clip)
            rows.append({"path": wav.name, "role": "event", "class": name})
    for i, bg in enumerate(small_bank.background_set):
        wav = root / f"bg_{i}.wav"
        write_wav(wav, bg)
        rows.append({"path": wav.name, "role": "background"})
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log() -> list[str]:
    """Sink for acceptance verdict lines, echoed after the whole run."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance summary")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
