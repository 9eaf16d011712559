"""Training-sample synthesis: EBR mixing, balanced pairs, query clips."""
from __future__ import annotations

import json

import numpy as np
import pytest

from fsed import dsp
from fsed.dsp import AudioClip
from fsed.errors import (
    InsufficientClassesError,
    InvalidConfigError,
    ManifestError,
    SilentSourceError,
    TooShortError,
    UnknownClassError,
)
from fsed.evaluator import read_events_tsv
from fsed.synthesis import (
    Pair,
    PairCategory,
    SamplerConfig,
    SourceBank,
    ebr_gain,
    feasible_categories,
    generate_eval_clip,
    load_manifest,
    make_background_sample,
    make_event_sample,
    mix_at,
    rms,
    sample_pair,
    write_truth_tsv,
)

SR = 16000


def _tone(freq_hz: float, duration_s: float, amplitude: float = 0.1) -> AudioClip:
    t = np.arange(int(duration_s * SR)) / SR
    return AudioClip(amplitude * np.sin(2 * np.pi * freq_hz * t), SR)


def _noise(rng: np.random.Generator, duration_s: float, amplitude: float = 0.02) -> AudioClip:
    return AudioClip(amplitude * rng.standard_normal(int(duration_s * SR)), SR)


def _mini_bank(n_classes: int = 2, bg_duration_s: float = 8.0) -> SourceBank:
    """Tiny tone bank: one background, two short events per class."""
    rng = np.random.default_rng(7)
    freqs = [500.0, 1500.0, 2500.0, 3500.0][:n_classes]
    events = {f"tone{int(f):04d}": [_tone(f, d) for d in (0.2, 0.4)] for f in freqs}
    return SourceBank.from_named_sources(events, [_noise(rng, bg_duration_s)])


class TestEbrGain:
    def test_equal_rms_at_zero_db_gives_unit_gain(self):
        # both tones span whole periods, so their RMS values match exactly
        a = _tone(500.0, 0.5)
        b = _tone(900.0, 0.5)
        assert ebr_gain(a, b, 0.0) == pytest.approx(1.0, rel=1e-9)

    def test_six_db_gain_on_equal_rms_sources(self):
        a = _tone(500.0, 0.5)
        b = _tone(900.0, 0.5)
        assert ebr_gain(a, b, 6.0) == pytest.approx(1.9952623149688795, rel=1e-9)

    def test_gain_realizes_requested_ratio(self):
        rng = np.random.default_rng(0)
        event = _noise(rng, 0.3, amplitude=0.05)
        background = _noise(rng, 0.3, amplitude=0.02)
        for ebr_db in (-6.0, 0.0, 13.7):
            g = ebr_gain(event, background, ebr_db)
            got = 20 * np.log10(rms(g * event.samples) / rms(background.samples))
            assert got == pytest.approx(ebr_db, abs=1e-9)

    def test_silent_sources_rejected(self):
        silent = AudioClip(np.zeros(1000), SR)
        noise = _noise(np.random.default_rng(1), 0.1)
        with pytest.raises(SilentSourceError):
            ebr_gain(silent, noise, 0.0)
        with pytest.raises(SilentSourceError):
            ebr_gain(noise, silent, 0.0)


class TestMixAt:
    def test_exact_sum_over_event_span(self):
        rng = np.random.default_rng(2)
        bg = rng.standard_normal(1000)
        ev = rng.standard_normal(200)
        out = mix_at(bg, ev, 0.7, 300)
        assert np.array_equal(out[:300], bg[:300])
        assert np.array_equal(out[500:], bg[500:])
        assert np.array_equal(out[300:500], bg[300:500] + 0.7 * ev)

    def test_event_cropped_at_both_edges(self):
        bg = np.zeros(100)
        ev = np.ones(50)
        head = mix_at(bg, ev, 1.0, -20)
        assert head[:30].sum() == 30 and not head[30:].any()
        tail = mix_at(bg, ev, 1.0, 80)
        assert tail[80:].sum() == 20 and not tail[:80].any()
        assert not mix_at(bg, ev, 1.0, 200).any()

    def test_background_not_mutated(self):
        bg = np.zeros(10)
        mix_at(bg, np.ones(5), 1.0, 0)
        assert not bg.any()


class TestMakeEventSample:
    def test_label_and_feature_shape(self):
        sample = make_event_sample(np.random.default_rng(0), _mini_bank(), 1)
        assert sample.label == 1
        assert sample.features.values.shape == (40, 100)

    def test_event_energy_lands_in_central_frames(self):
        """The labeled content must sit mid-window, not at the edges."""
        bank = _mini_bank()
        fb = dsp.mel_filterbank()
        band = int(np.argmax(fb.weights[:, round(500 * 512 / SR)]))
        rng = np.random.default_rng(3)
        for _ in range(5):
            sample = make_event_sample(rng, bank, 1, ebr_range_db=(12.0, 18.0))
            m = sample.features.values
            # frames 0..18 cannot overlap any legal event placement
            assert m[band, 40:60].max() > m[band, :19].max() + 1.0

    def test_same_seed_reproduces_sample(self):
        bank = _mini_bank()
        a = make_event_sample(np.random.default_rng(11), bank, 2, ebr_range_db=(3.0, 9.0))
        b = make_event_sample(np.random.default_rng(11), bank, 2, ebr_range_db=(3.0, 9.0))
        assert np.array_equal(a.features.values, b.features.values)

    def test_unknown_class_rejected(self):
        with pytest.raises(UnknownClassError):
            make_event_sample(np.random.default_rng(0), _mini_bank(), 9)


class TestMakeBackgroundSample:
    def test_label_is_extra_class_after_events(self):
        bank = _mini_bank(n_classes=3)
        sample = make_background_sample(np.random.default_rng(0), bank)
        assert sample.label == bank.background_class_id == 4
        assert sample.features.values.shape == (40, 100)

    def test_offsets_vary_between_draws(self):
        bank = _mini_bank()
        rng = np.random.default_rng(1)
        a = make_background_sample(rng, bank)
        b = make_background_sample(rng, bank)
        assert not np.array_equal(a.features.values, b.features.values)

    def test_too_short_background_rejected(self):
        rng = np.random.default_rng(2)
        bank = SourceBank.from_named_sources(
            {"tone": [_tone(500.0, 0.2)]}, [_noise(rng, 0.5)]
        )
        # a 100-frame window needs 1.02 s of audio
        with pytest.raises(TooShortError):
            make_background_sample(rng, bank)


class TestSamplePair:
    def test_invariants_hold_over_draws(self):
        """Label tracks membership; w is w_bg exactly when background joins."""
        bank = _mini_bank(n_classes=3)
        cfg = SamplerConfig()
        rng = np.random.default_rng(4)
        bg = bank.background_class_id
        seen = set()
        for _ in range(60):
            p = sample_pair(rng, bank, cfg)
            seen.add(p.category)
            labels = (p.first.label, p.second.label)
            assert p.label == int(labels[0] == labels[1])
            assert p.w == (cfg.w_bg if bg in labels else 1.0)
            if p.category is PairCategory.BG_BG:
                assert labels == (bg, bg)
            elif p.category is PairCategory.EVT_EVT_SAME:
                assert labels[0] == labels[1] != bg
            elif p.category is PairCategory.BG_EVT:
                assert (labels[0] == bg) != (labels[1] == bg)
            else:
                assert bg not in labels and labels[0] != labels[1]
        assert seen == set(PairCategory)

    def test_background_disabled_keeps_event_pairs_only(self):
        bank = _mini_bank(n_classes=3)
        cfg = SamplerConfig(background_enabled=False)
        rng = np.random.default_rng(5)
        cats = {sample_pair(rng, bank, cfg).category for _ in range(30)}
        assert cats == {PairCategory.EVT_EVT_SAME, PairCategory.EVT_EVT_DIFF}

    def test_bg_evt_member_order_is_randomized(self):
        bank = _mini_bank()
        rng = np.random.default_rng(6)
        first_is_bg = {
            sample_pair(rng, bank, categories=[PairCategory.BG_EVT],
                        probabilities=[1.0]).first.label == bank.background_class_id
            for _ in range(30)
        }
        assert first_is_bg == {True, False}

    def test_single_class_bank_cannot_draw_diff_pair(self):
        bank = _mini_bank(n_classes=1)
        with pytest.raises(InsufficientClassesError):
            sample_pair(np.random.default_rng(0), bank,
                        categories=[PairCategory.EVT_EVT_DIFF], probabilities=[1.0])

    def test_inconsistent_pair_label_rejected(self):
        bank = _mini_bank()
        rng = np.random.default_rng(7)
        a = make_event_sample(rng, bank, 1)
        b = make_event_sample(rng, bank, 2)
        with pytest.raises(InvalidConfigError):
            Pair(first=a, second=b, label=1, w=1.0, category=PairCategory.EVT_EVT_SAME)


class TestFeasibleCategories:
    def test_full_bank_keeps_balanced_quarters(self):
        cats, probs = feasible_categories(_mini_bank(n_classes=2), SamplerConfig())
        assert len(cats) == 4 and probs == [0.25] * 4

    def test_single_class_drops_diff_and_renormalizes(self):
        cats, probs = feasible_categories(_mini_bank(n_classes=1), SamplerConfig())
        assert PairCategory.EVT_EVT_DIFF not in cats
        assert len(cats) == 3
        np.testing.assert_allclose(probs, [1 / 3] * 3)

    def test_single_class_without_background_leaves_same_only(self):
        cats, probs = feasible_categories(
            _mini_bank(n_classes=1), SamplerConfig(background_enabled=False)
        )
        assert (cats, probs) == ([PairCategory.EVT_EVT_SAME], [1.0])


class TestSamplerConfig:
    def test_rejects_weight_below_one(self):
        with pytest.raises(InvalidConfigError):
            SamplerConfig(w_bg=0.5)

    def test_rejects_bad_center_span(self):
        with pytest.raises(InvalidConfigError):
            SamplerConfig(center_frames=0)
        with pytest.raises(InvalidConfigError):
            SamplerConfig(sample_frames=50, center_frames=60)


class TestSourceBank:
    def test_ids_must_be_contiguous_from_one(self):
        clips = [_tone(500.0, 0.2)]
        bg = [_noise(np.random.default_rng(0), 2.0)]
        with pytest.raises(InvalidConfigError):
            SourceBank(event_sources={1: clips, 3: clips},
                       class_names={1: "a", 3: "b"}, background_set=bg)

    def test_background_set_required(self):
        with pytest.raises(InvalidConfigError):
            SourceBank(event_sources={1: [_tone(500.0, 0.2)]},
                       class_names={1: "a"}, background_set=[])

    def test_named_sources_assigned_ids_in_sorted_order(self):
        bg = [_noise(np.random.default_rng(0), 2.0)]
        bank = SourceBank.from_named_sources(
            {"zebra": [_tone(900.0, 0.2)], "ant": [_tone(500.0, 0.2)]}, bg
        )
        assert bank.class_names == {1: "ant", 2: "zebra"}
        assert bank.class_id("zebra") == 2
        with pytest.raises(UnknownClassError):
            bank.class_id("missing")

    def test_split_classes_partitions_events_and_shares_backgrounds(self):
        bank = _mini_bank(n_classes=3)
        names = sorted(bank.class_names.values())
        train, hold = bank.split_classes([names[-1]])
        assert sorted(train.class_names.values()) == names[:-1]
        assert sorted(hold.class_names.values()) == names[-1:]
        assert train.background_set is bank.background_set

    def test_split_classes_rejects_bad_holdouts(self):
        bank = _mini_bank(n_classes=2)
        with pytest.raises(UnknownClassError):
            bank.split_classes(["nope"])
        with pytest.raises(InvalidConfigError):
            bank.split_classes(sorted(bank.class_names.values()))


class TestGenerateEvalClip:
    def test_absent_target_leaves_pure_background(self):
        clip = generate_eval_clip(np.random.default_rng(0), _mini_bank(), 1,
                                  duration_s=4.0, presence_rate=0.0)
        assert clip.annotations == []
        assert len(clip) == 4 * SR

    def test_present_target_is_annotated_and_audible(self):
        bank = _mini_bank()
        clip = generate_eval_clip(np.random.default_rng(1), bank, 1,
                                  duration_s=6.0, presence_rate=1.0,
                                  ebr_set_db=(6.0,))
        (ann,) = clip.annotations
        assert ann.class_name == bank.class_names[1]
        assert 0.0 <= ann.onset_s < ann.offset_s <= 6.0
        a = int(ann.onset_s * SR)
        b = int(ann.offset_s * SR)
        rest = np.concatenate([clip.samples[:a], clip.samples[b:]])
        # at EBR 6 dB the span RMS is about 2.2x the background RMS
        assert rms(clip.samples[a:b]) > 1.5 * rms(rest)

    def test_presence_rate_statistics(self):
        bank = _mini_bank()
        rng = np.random.default_rng(2)
        positives = sum(
            bool(generate_eval_clip(rng, bank, 1, duration_s=2.0,
                                    presence_rate=0.5).annotations)
            for _ in range(100)
        )
        assert 30 <= positives <= 70

    def test_same_seed_reproduces_clip(self):
        bank = _mini_bank()
        a = generate_eval_clip(np.random.default_rng(3), bank, 2, duration_s=3.0)
        b = generate_eval_clip(np.random.default_rng(3), bank, 2, duration_s=3.0)
        assert np.array_equal(a.samples, b.samples)
        assert a.annotations == b.annotations

    def test_event_longer_than_clip_rejected(self):
        # bank events run 0.2 s and longer; a 0.15 s clip cannot hold any
        with pytest.raises(TooShortError):
            generate_eval_clip(np.random.default_rng(4), _mini_bank(), 1,
                               duration_s=0.15, presence_rate=1.0)

    def test_bad_arguments_rejected(self):
        bank = _mini_bank()
        with pytest.raises(InvalidConfigError):
            generate_eval_clip(np.random.default_rng(5), bank, 1, ebr_set_db=())
        with pytest.raises(UnknownClassError):
            generate_eval_clip(np.random.default_rng(5), bank, 99)


class TestLoadManifest:
    def test_roundtrip_from_disk(self, source_dataset, small_bank):
        bank = load_manifest(source_dataset)
        assert sorted(bank.class_names.values()) == sorted(small_bank.class_names.values())
        assert bank.c_train == small_bank.c_train
        assert len(bank.background_set) == len(small_bank.background_set)
        for cid, name in bank.class_names.items():
            want = small_bank.event_sources[small_bank.class_id(name)]
            assert len(bank.event_sources[cid]) == len(want)

    def test_event_span_cropping(self, tmp_path):
        dsp.write_wav(tmp_path / "t.wav", _tone(500.0, 1.0))
        dsp.write_wav(tmp_path / "b.wav", _noise(np.random.default_rng(0), 1.0))
        manifest = tmp_path / "m.jsonl"
        rows = [
            {"path": "t.wav", "role": "event", "class": "t",
             "onset": 0.25, "offset": 0.75},
            {"path": "b.wav", "role": "background"},
        ]
        manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))
        bank = load_manifest(manifest)
        assert len(bank.event_sources[1]) == 1
        assert len(bank.event_sources[1][0]) == SR // 2

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "none.jsonl")

    def test_malformed_records(self, tmp_path):
        dsp.write_wav(tmp_path / "x.wav", _tone(500.0, 0.3))
        cases = [
            "not json\n",
            json.dumps({"role": "event", "class": "a"}) + "\n",
            json.dumps({"path": "x.wav", "role": "mystery"}) + "\n",
            json.dumps({"path": "x.wav", "role": "event"}) + "\n",
            json.dumps({"path": "gone.wav", "role": "background"}) + "\n",
            json.dumps({"path": "x.wav", "role": "event", "class": "a",
                        "onset": 0.9, "offset": 0.1}) + "\n",
        ]
        for text in cases:
            path = tmp_path / "m.jsonl"
            path.write_text(text)
            with pytest.raises(ManifestError):
                load_manifest(path)

    def test_requires_both_roles(self, tmp_path):
        dsp.write_wav(tmp_path / "x.wav", _tone(500.0, 0.3))
        only_event = tmp_path / "e.jsonl"
        only_event.write_text(
            json.dumps({"path": "x.wav", "role": "event", "class": "a"}) + "\n"
        )
        with pytest.raises(ManifestError):
            load_manifest(only_event)
        only_bg = tmp_path / "b.jsonl"
        only_bg.write_text(json.dumps({"path": "x.wav", "role": "background"}) + "\n")
        with pytest.raises(ManifestError):
            load_manifest(only_bg)


class TestTruthTsv:
    def test_roundtrip_through_reader(self, tmp_path):
        rows = [("clip_00001", 1.25, 2.5, "dog"), ("clip_00002", 0.0, 0.3, "cat")]
        path = tmp_path / "truth.tsv"
        write_truth_tsv(path, rows)
        events = read_events_tsv(path)
        assert [(e.clip_id, e.onset_s, e.offset_s, e.class_name) for e in events] == rows
