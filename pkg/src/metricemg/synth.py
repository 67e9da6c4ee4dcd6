"""Seed-deterministic synthetic HD-EMG: gesture templates, static trials, dynamic sequences.

Each channel is a band-limited noise carrier whose amplitude follows a
per-gesture spatial activation map. All randomness flows through numpy's
PCG64 generator seeded from ``SeedSequence`` entropy tuples, so outputs are
reproducible across runs and platforms.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal

from .dsp import EmgRecording


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 6
    trials_per_class: int = 10
    trial_seconds: float = 5.0
    rest_seconds: float = 5.0
    sample_rate_hz: float = 1000.0
    grid_h: int = 4
    grid_w: int = 16
    noise_band_hz: tuple[float, float] = (20.0, 300.0)
    snr_db: float = 30.0
    inter_trial_amplitude_jitter: float = 0.1
    spatial_jitter: float = 0.15
    powerline_amplitude: float = 0.02
    transition_ms: float = 500.0
    rest_class: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.trials_per_class < 1:
            raise ValueError("trials_per_class must be >= 1")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.trial_seconds <= 0 or self.rest_seconds <= 0:
            raise ValueError("hold durations must be positive")
        if self.transition_ms < 0:
            raise ValueError("transition_ms must be >= 0")
        lo, hi = self.noise_band_hz
        if not 0 < lo < hi < self.sample_rate_hz / 2:
            raise ValueError("noise band must lie inside (0, Nyquist)")

    @property
    def rest_id(self) -> int:
        return min(self.rest_class, self.num_classes - 1)

    @property
    def channels(self) -> int:
        return self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_band_hz"] = list(self.noise_band_hz)
        return d


@dataclass
class GestureTemplate:
    class_id: int
    activation_map: np.ndarray
    amplitude: float

    @property
    def intensity(self) -> np.ndarray:
        """Per-channel carrier amplitude, row-major over the grid."""
        return self.amplitude * self.activation_map.ravel()


def rng_for(*key: int) -> np.random.Generator:
    """Independent generator for an integer key such as (seed, class, trial)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _blob_map(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    out = np.zeros((h, w))
    for _ in range(rng.integers(1, 4)):
        r0, c0 = rng.uniform(0, h - 1), rng.uniform(0, w)
        sr, sc = rng.uniform(0.8, 1.6), rng.uniform(1.5, 3.5)
        # columns wrap around the forearm
        dc = np.abs(cols - c0)
        dc = np.minimum(dc, w - dc)
        out += rng.uniform(0.5, 1.0) * np.exp(-0.5 * (((rows - r0) / sr) ** 2 + (dc / sc) ** 2))
    return out / out.max()


def _pairwise_corr(maps: list[np.ndarray]) -> np.ndarray:
    return np.corrcoef(np.array([m.ravel() for m in maps]))


def make_gesture_templates(cfg: SynthConfig, rng: np.random.Generator | None = None) -> list[GestureTemplate]:
    """One template per class; the rest class is a faint diffuse map."""
    rng = rng_for(cfg.seed, 0) if rng is None else rng
    h, w = cfg.grid_h, cfg.grid_w
    for _ in range(100):
        maps, amps = [], []
        for c in range(cfg.num_classes):
            if c == cfg.rest_id:
                maps.append(rng.uniform(0.3, 1.0, (h, w)))
                amps.append(None)
            else:
                maps.append(_blob_map(rng, h, w))
                amps.append(rng.uniform(0.8, 1.2))
        corr = _pairwise_corr(maps)
        off_diag = corr[~np.eye(len(maps), dtype=bool)]
        peaks = {int(np.argmax(m)) for m in maps}
        if np.all(off_diag < 0.9) and len(peaks) == len(maps):
            break
    else:
        raise GenerationError("could not draw templates with pairwise correlation < 0.9 in 100 attempts")
    active = [a for a in amps if a is not None]
    rest_amp = 0.03 * min(active)
    return [
        GestureTemplate(c, maps[c], rest_amp if amps[c] is None else float(amps[c]))
        for c in range(cfg.num_classes)
    ]


def _carrier(rng: np.random.Generator, channels: int, n: int, cfg: SynthConfig) -> np.ndarray:
    warmup = int(cfg.sample_rate_hz // 5)
    sos = signal.butter(4, cfg.noise_band_hz, btype="bandpass", fs=cfg.sample_rate_hz, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal((channels, n + warmup)), axis=1)[:, warmup:]
    return noise / np.sqrt(np.mean(noise**2, axis=1, keepdims=True))


def _measurement_noise(rng: np.random.Generator, channels: int, n: int, cfg: SynthConfig, t0: int = 0) -> np.ndarray:
    # noise floor is relative to a unit active-gesture carrier amplitude
    floor = 10.0 ** (-cfg.snr_db / 20.0) * rng.standard_normal((channels, n))
    if cfg.powerline_amplitude:
        t = (t0 + np.arange(n)) / cfg.sample_rate_hz
        phase = rng.uniform(0, 2 * np.pi, (channels, 1))
        floor += cfg.powerline_amplitude * np.sin(2 * np.pi * 60.0 * t + phase)
    return floor


def _jittered_intensity(template: GestureTemplate, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    gain = 1.0 + cfg.inter_trial_amplitude_jitter * rng.standard_normal()
    spatial = 1.0 + cfg.spatial_jitter * rng.standard_normal(cfg.channels)
    return np.clip(template.intensity * gain * spatial, 0.0, None)


def synth_static_trial(template: GestureTemplate, cfg: SynthConfig, rng: np.random.Generator) -> EmgRecording:
    n = int(round(cfg.trial_seconds * cfg.sample_rate_hz))
    intensity = _jittered_intensity(template, cfg, rng)
    samples = _carrier(rng, cfg.channels, n, cfg) * intensity[:, None]
    samples += _measurement_noise(rng, cfg.channels, n, cfg)
    return EmgRecording(cfg.sample_rate_hz, samples, np.full(n, template.class_id, dtype=np.int64))


@dataclass(frozen=True)
class Segment:
    kind: str  # "hold" or "ramp"
    start: int
    stop: int
    label: int  # hold class; for ramps, the class being left
    next_label: int = -1


def sequence_layout(order: list[int], cfg: SynthConfig) -> list[Segment]:
    """Rest, then (ramp, hold, ramp, rest) per gesture in ``order``; sample indices."""
    if not order:
        raise ValueError("order must be nonempty")
    fs = cfg.sample_rate_hz
    hold = int(round(cfg.trial_seconds * fs))
    rest = int(round(cfg.rest_seconds * fs))
    ramp = int(round(cfg.transition_ms * fs / 1000.0))
    rest_id = cfg.rest_id
    segments: list[Segment] = []
    pos = 0

    def push(kind, length, label, next_label=-1):
        nonlocal pos
        if length > 0:
            segments.append(Segment(kind, pos, pos + length, label, next_label))
        pos += length

    push("hold", rest, rest_id)
    for c in order:
        push("ramp", ramp, rest_id, c)
        push("hold", hold, c)
        push("ramp", ramp, c, rest_id)
        push("hold", rest, rest_id)
    return segments


def ramp_mask(order: list[int], cfg: SynthConfig) -> np.ndarray:
    segments = sequence_layout(order, cfg)
    mask = np.zeros(segments[-1].stop, dtype=bool)
    for seg in segments:
        if seg.kind == "ramp":
            mask[seg.start : seg.stop] = True
    return mask


def synth_dynamic_sequence(
    templates: list[GestureTemplate], order: list[int], cfg: SynthConfig, rng: np.random.Generator
) -> EmgRecording:
    """Continuous recording cycling rest -> gesture -> rest with linear cross-fades.

    Labels switch at each ramp's midpoint.
    """
    segments = sequence_layout(order, cfg)
    n = segments[-1].stop
    intensity = np.empty((cfg.channels, n))
    labels = np.empty(n, dtype=np.int64)
    hold_levels = {}
    for i, seg in enumerate(segments):
        if seg.kind == "hold":
            hold_levels[i] = _jittered_intensity(templates[seg.label], cfg, rng)
    for i, seg in enumerate(segments):
        length = seg.stop - seg.start
        if seg.kind == "hold":
            intensity[:, seg.start : seg.stop] = hold_levels[i][:, None]
            labels[seg.start : seg.stop] = seg.label
        else:
            # ramps always sit between two holds
            before, after = hold_levels[i - 1], hold_levels[i + 1]
            frac = (np.arange(length) + 0.5) / length
            intensity[:, seg.start : seg.stop] = before[:, None] * (1 - frac) + after[:, None] * frac
            half = length // 2
            labels[seg.start : seg.start + half] = seg.label
            labels[seg.start + half : seg.stop] = seg.next_label
    samples = _carrier(rng, cfg.channels, n, cfg) * intensity
    samples += _measurement_noise(rng, cfg.channels, n, cfg)
    return EmgRecording(cfg.sample_rate_hz, samples, labels)


def default_order(cfg: SynthConfig) -> list[int]:
    return [c for c in range(cfg.num_classes) if c != cfg.rest_id]
