"""EMG preprocessing: band-pass, notch, DC removal, MAV envelope and framing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal


class ConfigError(ValueError):
    """Invalid filter or framing configuration."""


@dataclass
class EmgRecording:
    """Multichannel EMG: ``samples`` is (channels, T)."""

    sample_rate_hz: float
    samples: np.ndarray
    label_track: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.label_track is not None:
            self.label_track = np.asarray(self.label_track, dtype=np.int64)
            if self.label_track.shape != (self.num_samples,):
                raise ConfigError("label_track must have one entry per sample")
            if self.label_track.size and self.label_track.min() < 0:
                raise ConfigError("label ids must be nonnegative")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.num_samples / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> EmgRecording:
        return replace(self, samples=samples)


@dataclass(frozen=True)
class FilterConfig:
    hp_cutoff_hz: float = 20.0
    hp_order: int = 1
    lp_cutoff_hz: float = 300.0
    lp_order: int = 3
    notch_hz: float = 60.0
    notch_q: float = 30.0
    dc_window_ms: float = 100.0
    mav_window_ms: float = 100.0

    def validate(self, sample_rate_hz: float) -> None:
        nyquist = sample_rate_hz / 2.0
        if not 0.0 < self.hp_cutoff_hz < self.lp_cutoff_hz < nyquist:
            raise ConfigError(
                f"need 0 < hp ({self.hp_cutoff_hz}) < lp ({self.lp_cutoff_hz}) < Nyquist ({nyquist})"
            )
        if not 0.0 < self.notch_hz < nyquist:
            raise ConfigError(f"notch frequency {self.notch_hz} Hz must lie below Nyquist ({nyquist})")
        if self.notch_q <= 0:
            raise ConfigError("notch_q must be positive")
        if self.dc_window_ms <= 0 or self.mav_window_ms <= 0:
            raise ConfigError("window lengths must be positive")
        if self.hp_order < 1 or self.lp_order < 1:
            raise ConfigError("filter orders must be >= 1")


@dataclass
class FrameSequence:
    """Time-ordered (N, H, W) muscle-activity maps with one label per frame."""

    frames: np.ndarray
    timestamps_ms: np.ndarray
    labels: np.ndarray
    increment_ms: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def subset(self, mask) -> FrameSequence:
        return FrameSequence(self.frames[mask], self.timestamps_ms[mask], self.labels[mask], self.increment_ms, dict(self.meta))


def _window_samples(window_ms: float, fs: float) -> int:
    n = int(round(window_ms * fs / 1000.0))
    if n < 1:
        raise ConfigError(f"a {window_ms} ms window spans no samples at {fs} Hz")
    return n


def bandpass_coefficients(cfg: FilterConfig, fs: float) -> np.ndarray:
    """Second-order sections: high-pass then Butterworth low-pass (bilinear, pre-warped)."""
    cfg.validate(fs)
    hp = signal.butter(cfg.hp_order, cfg.hp_cutoff_hz, btype="highpass", fs=fs, output="sos")
    lp = signal.butter(cfg.lp_order, cfg.lp_cutoff_hz, btype="lowpass", fs=fs, output="sos")
    return np.vstack([hp, lp])


def apply_bandpass(rec: EmgRecording, cfg: FilterConfig = FilterConfig()) -> EmgRecording:
    sos = bandpass_coefficients(cfg, rec.sample_rate_hz)
    return rec.with_samples(signal.sosfilt(sos, rec.samples, axis=1))


def apply_notch(rec: EmgRecording, cfg: FilterConfig = FilterConfig()) -> EmgRecording:
    cfg.validate(rec.sample_rate_hz)
    b, a = signal.iirnotch(cfg.notch_hz, cfg.notch_q, fs=rec.sample_rate_hz)
    return rec.with_samples(signal.lfilter(b, a, rec.samples, axis=1))


def _trailing_mean(x: np.ndarray, n: int) -> np.ndarray:
    # causal moving average; the first n-1 outputs average over what exists so far
    csum = np.cumsum(x, axis=1)
    out = csum.copy()
    out[:, n:] -= csum[:, :-n]
    counts = np.minimum(np.arange(1, x.shape[1] + 1), n)
    return out / counts


def remove_dc(rec: EmgRecording, cfg: FilterConfig = FilterConfig()) -> EmgRecording:
    n = _window_samples(cfg.dc_window_ms, rec.sample_rate_hz)
    return rec.with_samples(rec.samples - _trailing_mean(rec.samples, n))


def mav_envelope(rec: EmgRecording, cfg: FilterConfig = FilterConfig()) -> EmgRecording:
    n = _window_samples(cfg.mav_window_ms, rec.sample_rate_hz)
    return rec.with_samples(np.maximum(_trailing_mean(np.abs(rec.samples), n), 0.0))


def to_frames(
    rec: EmgRecording,
    increment_ms: float,
    grid_h: int = 4,
    grid_w: int = 16,
    mav_window_ms: float = 100.0,
    full_window: bool = True,
) -> FrameSequence:
    """Sample an MAV-processed recording into (N, grid_h, grid_w) frames.

    Channel ``c`` lands at row ``c // grid_w``, column ``c % grid_w``. Each
    frame takes the envelope value at its window end. With ``full_window``
    the first frame waits for one complete MAV window, giving
    ``N = 1 + floor((T_ms - mav_window_ms) / increment_ms)``; otherwise frames
    end at every increment from the first, giving ``floor(T_ms / increment_ms)``.
    """
    if rec.channels != grid_h * grid_w:
        raise ConfigError(f"{rec.channels} channels cannot fill a {grid_h}x{grid_w} grid")
    fs = rec.sample_rate_hz
    step = _window_samples(increment_ms, fs)
    first = _window_samples(mav_window_ms, fs) - 1 if full_window else step - 1
    ends = np.arange(first, rec.num_samples, step)
    frames = rec.samples[:, ends].T.reshape(len(ends), grid_h, grid_w)
    if rec.label_track is not None:
        labels = rec.label_track[ends]
    else:
        labels = np.full(len(ends), -1, dtype=np.int64)
    timestamps = 1000.0 * (ends + 1) / fs
    return FrameSequence(np.ascontiguousarray(frames), timestamps, labels, float(increment_ms))


def preprocess(rec: EmgRecording, cfg: FilterConfig = FilterConfig()) -> EmgRecording:
    """Band-pass, notch, DC removal and MAV envelope, in that order."""
    return mav_envelope(remove_dc(apply_notch(apply_bandpass(rec, cfg), cfg), cfg), cfg)


def recording_to_frames(
    rec: EmgRecording, cfg: FilterConfig, increment_ms: float, grid_h: int = 4, grid_w: int = 16
) -> FrameSequence:
    return to_frames(preprocess(rec, cfg), increment_ms, grid_h, grid_w, mav_window_ms=cfg.mav_window_ms)
