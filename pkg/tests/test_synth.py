"""Synthetic HD-EMG generator."""

import numpy as np
import pytest
from scipy import stats

from metricemg.dsp import FilterConfig, preprocess, recording_to_frames
from metricemg.synth import (
    GenerationError,
    SynthConfig,
    default_order,
    make_gesture_templates,
    ramp_mask,
    rng_for,
    sequence_layout,
    synth_dynamic_sequence,
    synth_static_trial,
)

CFG = SynthConfig(trial_seconds=1.0, rest_seconds=1.0)


@pytest.fixture(scope="module")
def templates():
    return make_gesture_templates(CFG)


class TestTemplates:
    def test_two_classes_decorrelated(self):
        t = make_gesture_templates(SynthConfig(num_classes=2))
        assert np.corrcoef(t[0].activation_map.ravel(), t[1].activation_map.ravel())[0, 1] < 0.9

    def test_deterministic(self):
        a = make_gesture_templates(SynthConfig(seed=5))
        b = make_gesture_templates(SynthConfig(seed=5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.activation_map, y.activation_map)
            assert x.amplitude == y.amplitude

    def test_distinct_peaks(self, templates):
        peaks = {int(np.argmax(t.activation_map)) for t in templates}
        assert len(peaks) == 6

    def test_pairwise_correlation_bound(self, templates):
        corr = np.corrcoef([t.activation_map.ravel() for t in templates])
        assert np.all(corr[~np.eye(6, dtype=bool)] < 0.9)

    def test_active_maps_positive(self, templates):
        for t in templates:
            assert t.intensity.max() > 0

    def test_rest_is_faint(self, templates):
        # measure the template contribution, not the shared noise floor
        quiet = SynthConfig(trial_seconds=1.0, snr_db=120.0, powerline_amplitude=0.0)
        rest = templates[CFG.rest_id]
        rms = {}
        for t in templates:
            rec = synth_static_trial(t, quiet, rng_for(0, 9, t.class_id))
            rms[t.class_id] = np.sqrt(np.mean(rec.samples**2))
        active = min(v for c, v in rms.items() if c != rest.class_id)
        assert rms[rest.class_id] <= 0.1 * active

    def test_impossible_bound_raises(self):
        # three classes cannot have distinct peaks on two electrodes
        with pytest.raises(GenerationError):
            make_gesture_templates(SynthConfig(num_classes=3, grid_h=1, grid_w=2, rest_class=0))

    @pytest.mark.parametrize("kwargs", [{"snr_db": float("inf")}, {"transition_ms": -1.0}, {"trials_per_class": 0}, {"num_classes": 1}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


class TestStaticTrials:
    def test_shape_and_labels(self, templates):
        rec = synth_static_trial(templates[1], CFG, rng_for(0, 1))
        assert rec.samples.shape == (64, 1000)
        assert np.all(rec.label_track == 1)

    def test_same_generator_state_same_trial(self, templates):
        cfg = SynthConfig(trial_seconds=1.0, inter_trial_amplitude_jitter=0.0, spatial_jitter=0.0)
        a = synth_static_trial(templates[0], cfg, rng_for(3, 1))
        b = synth_static_trial(templates[0], cfg, rng_for(3, 1))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_frame_peak_matches_template(self, templates):
        cfg = SynthConfig(trial_seconds=1.0, spatial_jitter=0.0)
        for t in templates:
            if t.class_id == cfg.rest_id:
                continue
            rec = synth_static_trial(t, cfg, rng_for(0, 1, t.class_id))
            seq = recording_to_frames(rec, FilterConfig(), 100.0)
            peak = int(np.argmax(seq.frames.mean(axis=0)))
            # MAV estimation noise of a few percent cannot separate near-tied cells
            assert t.activation_map.ravel()[peak] >= 0.95 * t.activation_map.max()

    def test_energy_locality(self, templates):
        for t in templates:
            if t.class_id == CFG.rest_id:
                continue
            rec = synth_static_trial(t, CFG, rng_for(0, 2, t.class_id))
            env = preprocess(rec).samples[:, 100:].mean(axis=1)
            rho = stats.spearmanr(env, t.intensity.ravel()).statistic
            assert rho > 0.9


class TestDynamicSequence:
    def test_duration_arithmetic(self):
        cfg = SynthConfig(trial_seconds=5.0, rest_seconds=5.0, transition_ms=200.0)
        segs = sequence_layout([1], cfg)
        assert segs[-1].stop == 15_000 + 2 * 200
        assert [s.kind for s in segs] == ["hold", "ramp", "hold", "ramp", "hold"]

    def test_labels_switch_at_ramp_midpoint(self, templates):
        cfg = SynthConfig(trial_seconds=1.0, rest_seconds=1.0, transition_ms=200.0)
        rec = synth_dynamic_sequence(templates, [1], cfg, rng_for(0, 2))
        lab = rec.label_track
        rest = cfg.rest_id
        # rest 0-1000, ramp 1000-1200, hold 1200-2200, ramp 2200-2400, rest 2400-3400
        assert np.all(lab[:1100] == rest)
        assert np.all(lab[1100:2300] == 1)
        assert np.all(lab[2300:] == rest)

    def test_no_transition(self, templates):
        cfg = SynthConfig(trial_seconds=1.0, rest_seconds=1.0, transition_ms=0.0)
        rec = synth_dynamic_sequence(templates, [0, 2], cfg, rng_for(0, 2))
        assert rec.num_samples == 5000
        assert not ramp_mask([0, 2], cfg).any()
        np.testing.assert_array_equal(np.unique(rec.label_track[1000:2000]), [0])

    def test_ramp_mask_fraction(self):
        cfg = SynthConfig(trial_seconds=1.0, rest_seconds=1.0, transition_ms=250.0)
        mask = ramp_mask([0, 1], cfg)
        assert mask.sum() == 4 * 250
        assert mask.size == 1000 + 2 * (250 + 1000 + 250 + 1000)

    def test_every_sample_labeled(self, templates):
        rec = synth_dynamic_sequence(templates, default_order(CFG), CFG, rng_for(0, 2))
        assert set(np.unique(rec.label_track)) == set(range(6))

    def test_ramps_are_ambiguous(self, templates):
        cfg = CFG
        order = default_order(cfg)
        rec = synth_dynamic_sequence(templates, order, cfg, rng_for(0, 2))
        seq = recording_to_frames(rec, FilterConfig(), 10.0)
        mask = ramp_mask(order, cfg)[np.round(seq.timestamps_ms).astype(int) - 1]
        maps = np.array([t.intensity.ravel() for t in templates])
        maps = maps / np.linalg.norm(maps, axis=1, keepdims=True)
        flat = seq.frames.reshape(len(seq), -1)
        cos = flat @ maps.T / np.linalg.norm(flat, axis=1, keepdims=True)
        top2 = np.sort(cos, axis=1)[:, -2:]
        margin = top2[:, 1] - top2[:, 0]
        # a smaller gap between the two best templates means more ambiguity
        assert np.median(margin[mask]) < np.median(margin[~mask])

    def test_empty_order(self):
        with pytest.raises(ValueError):
            sequence_layout([], CFG)

    def test_default_order_skips_rest(self):
        assert default_order(SynthConfig()) == [0, 1, 2, 4, 5]
        assert default_order(SynthConfig(num_classes=3)) == [0, 1]
