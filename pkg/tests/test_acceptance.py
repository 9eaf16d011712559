"""Release gate: exact math, oracle agreement, and benchmark trends.

Each test prints one [PASS]/[FAIL] verdict line; conftest echoes them all
in an "acceptance summary" section at the end of the run.
"""
from __future__ import annotations

import time
from collections import Counter

import numpy as np
from click.testing import CliRunner

from fsed.bench import shot_scaling_mean_distances
from fsed.cli import main
from fsed.embedding import (
    NetworkConfig,
    NetworkParams,
    backward_batch,
    forward,
    forward_batch,
    init_network,
)
from fsed.evaluator import Event, brute_force_max_matching, match_events
from fsed.loss import LossConfig, batch_loss_and_grads, weighted_contrastive_loss
from fsed.synthesis import PairCategory, SamplerConfig, sample_pair


def _verdict(log: list[str], ok: bool, text: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {text}"
    log.append(line)
    print(line)
    assert ok, line


def _reference_loss(distance: float, label: int, margin: float, weight: float) -> float:
    """Straight transcription of the pairwise objective, coded separately."""
    if label == 1:
        return distance ** 2
    return max(weight * margin - distance, 0.0) ** 2


def test_loss_formula_grid(acceptance_log):
    t0 = time.perf_counter()
    cfg = LossConfig()
    worst = 0.0
    n_points = 0
    for d in np.linspace(0.0, 3.0, 250):
        for label in (0, 1):
            for w in (1.0, 2.0):
                got = weighted_contrastive_loss(float(d), label, cfg, w=w)
                ref = _reference_loss(float(d), label, cfg.margin, w)
                worst = max(worst, abs(got - ref))
                n_points += 1
    elapsed = time.perf_counter() - t0
    ok = n_points == 1000 and worst <= 1e-12 and elapsed < 1.0
    _verdict(acceptance_log, ok,
             f"loss formula grid: {n_points} points, max |impl - ref| = "
             f"{worst:.2e} (tol 1e-12), {elapsed:.2f} s")


def _pair_batch_loss(params: NetworkParams, x: np.ndarray, labels: np.ndarray,
                     weights: np.ndarray, lcfg: LossConfig) -> float:
    n = len(labels)
    emb, _ = forward_batch(params, x)
    loss, _, _ = batch_loss_and_grads(emb[:n], emb[n:], labels, weights, lcfg)
    return loss


def _with_coordinate(params: NetworkParams, name: str, idx: int,
                     value: float) -> NetworkParams:
    tensors = {k: (v.copy() if k == name else v) for k, v in params.tensors.items()}
    tensors[name].flat[idx] = value
    return NetworkParams(tensors=tensors, config=params.config)


def test_end_to_end_gradients(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    params = init_network(NetworkConfig(), rng).astype(np.float64)
    n_pairs = 3
    x = rng.standard_normal((2 * n_pairs, 40, 100))
    labels = np.array([1, 0, 0])
    weights = np.array([1.0, 1.0, 2.0])
    # margin above the typical embedding distance keeps every hinge active;
    # the kink-clearance check below makes the finite differences valid
    lcfg = LossConfig(margin=4.0, w_bg=2.0)

    emb, cache = forward_batch(params, x)
    dists = np.linalg.norm(emb[:n_pairs] - emb[n_pairs:], axis=1)
    assert np.all(dists > 0.3)
    assert np.all(weights * lcfg.margin - dists > 0.3)

    loss, g1, g2 = batch_loss_and_grads(emb[:n_pairs], emb[n_pairs:],
                                        labels, weights, lcfg)
    grads = backward_batch(params, cache, np.concatenate([g1, g2]))

    names = list(params.tensors)
    sizes = np.array([params.tensors[k].size for k in names])
    bounds = np.cumsum(sizes)
    flat_ids = rng.choice(int(bounds[-1]), size=200, replace=False)

    h = 1e-5
    worst = 0.0
    for fid in flat_ids:
        t_i = int(np.searchsorted(bounds, fid, side="right"))
        name = names[t_i]
        idx = int(fid - (bounds[t_i] - sizes[t_i]))
        base = float(params.tensors[name].flat[idx])
        up = _pair_batch_loss(_with_coordinate(params, name, idx, base + h),
                              x, labels, weights, lcfg)
        down = _pair_batch_loss(_with_coordinate(params, name, idx, base - h),
                                x, labels, weights, lcfg)
        fd = (up - down) / (2 * h)
        an = float(grads[name].flat[idx])
        scale = max(abs(an), abs(fd))
        if scale < 1e-8:  # dead ReLU path: both sides must agree on zero
            continue
        worst = max(worst, abs(fd - an) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120.0
    _verdict(acceptance_log, ok,
             f"end-to-end gradients: 200 probes, worst rel err = {worst:.2e} "
             f"(tol 1e-4), {elapsed:.1f} s")


def test_pair_category_ratios(acceptance_log, small_bank):
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    scfg = SamplerConfig()
    bg_id = small_bank.background_class_id
    n = 10_000
    counts: Counter = Counter()
    bg_members = 0
    for _ in range(n):
        pair = sample_pair(rng, small_bank, scfg)
        counts[pair.category] += 1
        if bg_id in (pair.first.label, pair.second.label):
            bg_members += 1
    freqs = {c: counts[c] / n for c in PairCategory}
    bg_share = bg_members / n
    elapsed = time.perf_counter() - t0
    ok = (all(abs(f - 0.25) <= 0.02 for f in freqs.values())
          and abs(bg_share - 0.50) <= 0.02
          and elapsed < 30.0)
    detail = ", ".join(f"{c.value} {freqs[c]:.3f}" for c in PairCategory)
    _verdict(acceptance_log, ok,
             f"pair category ratios: {detail}, bg-member share {bg_share:.3f} "
             f"(tol 0.02), {elapsed:.1f} s")


def test_matcher_agrees_with_bipartite_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)

    def draw(count: int, scored: bool) -> list[Event]:
        events = []
        for _ in range(count):
            onset = float(rng.integers(0, 48)) * 0.25  # coarse grid forces ties
            events.append(Event(
                clip_id=f"c{int(rng.integers(1, 3))}",
                onset_s=onset,
                offset_s=onset + 0.3,
                class_name=("a", "b")[int(rng.integers(0, 2))],
                score=0.5 if scored else None,
            ))
        return events

    n_instances = 1000
    disagreements = 0
    for _ in range(n_instances):
        refs = draw(int(rng.integers(0, 9)), scored=False)
        dets = draw(int(rng.integers(0, 9)), scored=True)
        tp, _, _, _ = match_events(refs, dets, collar_s=0.5)
        if tp != brute_force_max_matching(refs, dets, collar_s=0.5):
            disagreements += 1
    elapsed = time.perf_counter() - t0
    ok = disagreements == 0 and elapsed < 30.0
    _verdict(acceptance_log, ok,
             f"matcher vs bipartite oracle: {n_instances - disagreements}/"
             f"{n_instances} instances agree, {elapsed:.1f} s")


def test_parameter_budget(acceptance_log):
    cfg = NetworkConfig()
    params = init_network(cfg)
    emb, _ = forward(params, np.random.default_rng(0)
                     .standard_normal((40, 100)).astype(np.float32))
    ok = (60_000 <= params.total_count <= 80_000
          and cfg.embed_dim == 128
          and emb.shape == (128,))
    _verdict(acceptance_log, ok,
             f"parameter budget: {params.total_count} params in "
             f"[60000, 80000], embedding dim {emb.shape[0]}")


def test_synthetic_benchmark_trend(acceptance_log, bench_run):
    arms = bench_run.report["arms"]
    f1_proposed = arms["proposed"]["eval"]["f1"]
    f1_ablation = arms["ablation"]["eval"]["f1"]
    gap = bench_run.report["f1_gap"]
    ok = (f1_proposed >= 0.80 and gap >= 0.10
          and bench_run.elapsed_s <= 600.0)
    _verdict(acceptance_log, ok,
             f"synthetic trend: proposed F1 {f1_proposed:.3f} >= 0.80, "
             f"ablation F1 {f1_ablation:.3f}, gap {gap:+.3f} >= 0.10, "
             f"{bench_run.elapsed_s:.0f} s <= 600 s")


def test_shot_scaling_distances(acceptance_log, bench_cfg, bench_data,
                                proposed_params):
    t0 = time.perf_counter()
    means = shot_scaling_mean_distances(
        proposed_params, bench_data.pool, bench_data.eval_set, bench_cfg,
        k_values=(1, 10), n_draws=20, rng=np.random.default_rng(7),
    )
    elapsed = time.perf_counter() - t0
    ok = means[10] <= means[1] and elapsed < 120.0
    _verdict(acceptance_log, ok,
             f"shot scaling: mean true-event distance k=10 {means[10]:.4f} "
             f"<= k=1 {means[1]:.4f} (20 draws), {elapsed:.1f} s")


def test_seeded_runs_are_bit_identical(acceptance_log, source_dataset, tmp_path):
    runner = CliRunner()
    toml = tmp_path / "train.toml"
    toml.write_text("[train]\nn_verif_pairs = 8\n")

    ckpts = []
    for tag in ("a", "b"):
        ckpt = tmp_path / f"train_{tag}" / "model.bin"
        ckpt.parent.mkdir()
        result = runner.invoke(main, [
            "train", str(source_dataset), str(ckpt),
            "--config", str(toml), "--holdout", "tone2600",
            "--epochs", "2", "--steps-per-epoch", "2", "--batch-size", "8",
            "--workers", "1", "--seed", "0",
        ])
        assert result.exit_code == 0, result.output
        ckpts.append(ckpt.read_bytes())
    train_ok = ckpts[0] == ckpts[1]

    bench_dirs = []
    for tag in ("a", "b"):
        out = tmp_path / f"bench_{tag}"
        result = runner.invoke(main, [
            "bench-synthetic", str(out), "--seed", "0",
            "--epochs", "2", "--steps-per-epoch", "2",
            "--dev-clips", "6", "--eval-clips", "6", "--k", "2",
        ])
        assert result.exit_code == 0, result.output
        bench_dirs.append(out)
    # manifest.json and history CSVs carry wall-clock fields; everything
    # else (checkpoints, reports, detections, sigmas, curves) must match
    names_a = {p.name for p in bench_dirs[0].iterdir()}
    names_b = {p.name for p in bench_dirs[1].iterdir()}
    assert names_a == names_b
    compared = sorted(
        n for n in names_a
        if n != "manifest.json" and not n.startswith("history_")
    )
    assert "ckpt_proposed.bin" in compared and "report.json" in compared
    mismatched = [
        n for n in compared
        if (bench_dirs[0] / n).read_bytes() != (bench_dirs[1] / n).read_bytes()
    ]
    ok = train_ok and not mismatched
    _verdict(acceptance_log, ok,
             f"seeded determinism: train ckpt identical = {train_ok}, bench "
             f"files identical = {sorted(mismatched) or 'all'} "
             f"({len(compared)} files compared)")
