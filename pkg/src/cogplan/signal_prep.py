"""EEG preprocessing: re-reference, zero-phase filtering, polyphase
resampling, amplitude scaling, epoching and seeded dataset splits."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputError

SUBJECT_CLASSES = ("expert", "novice")
AMPLITUDE_UNIT_MV = 0.1
CORRUPT_THRESHOLD = 10.0


@dataclass
class EegClip:
    """Multichannel EEG segment; ``samples`` is channels x T in millivolts
    (or unitless once ``processed`` is set)."""

    samples: np.ndarray
    sample_rate_hz: float
    subject_class: str = "expert"
    condition_id: int = 1
    clip_id: str = ""
    processed: bool = False

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.subject_class not in SUBJECT_CLASSES:
            raise InputError(f"subject_class must be one of {SUBJECT_CLASSES}")
        if not 1 <= int(self.condition_id) <= 14:
            raise InputError(f"condition_id must lie in 1..14, got {self.condition_id}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def header(self) -> dict:
        return {
            "channels": self.channels,
            "n_samples": self.n_samples,
            "sample_rate_hz": self.sample_rate_hz,
            "subject_class": self.subject_class,
            "condition_id": int(self.condition_id),
            "clip_id": self.clip_id,
            "processed": self.processed,
        }


def _with(clip: EegClip, samples: np.ndarray, **changes) -> EegClip:
    return dataclasses.replace(clip, samples=samples, **changes)


def rereference(x: EegClip, ref_channels: tuple[int, int] = (6, 7)) -> EegClip:
    """Subtract the mean of the two reference channels from every channel."""
    a, b = ref_channels
    n = x.channels
    if a == b or not (0 <= a < n and 0 <= b < n):
        raise InputError(f"reference channels {ref_channels} invalid for {n} channels")
    ref = 0.5 * (x.samples[a] + x.samples[b])
    return _with(x, x.samples - ref[None, :])


def _padlen(order: int, n: int) -> int:
    # reflective padding of 3x the filter order, bounded by what the signal allows
    return min(3 * order, n - 1)


def bandpass(x: EegClip, low_hz: float = 0.1, high_hz: float = 50.0, order: int = 4) -> EegClip:
    """Zero-phase Butterworth band-pass applied per channel."""
    nyq = x.sample_rate_hz / 2
    if not 0 < low_hz < high_hz < nyq:
        raise InputError(f"band {low_hz}-{high_hz} Hz invalid for Nyquist {nyq} Hz")
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=x.sample_rate_hz, output="sos")
    # a band-pass of prototype order N has overall order 2N
    y = sps.sosfiltfilt(sos, x.samples, axis=-1, padtype="even",
                        padlen=_padlen(2 * order, x.n_samples))
    return _with(x, y)


def notch(x: EegClip, freq_hz: float = 50.0, q: float = 30.0) -> EegClip:
    """Zero-phase second-order IIR notch."""
    nyq = x.sample_rate_hz / 2
    if not 0 < freq_hz < nyq:
        raise InputError(f"notch at {freq_hz} Hz invalid for Nyquist {nyq} Hz")
    b, a = sps.iirnotch(freq_hz, q, fs=x.sample_rate_hz)
    y = sps.filtfilt(b, a, x.samples, axis=-1, padtype="even", padlen=_padlen(2, x.n_samples))
    return _with(x, y)


def resample(x: EegClip, target_hz: float = 200.0) -> EegClip:
    """Anti-aliased polyphase downsampling to ``round(T * target / current)`` samples."""
    if target_hz <= 0:
        raise InputError(f"target rate must be positive, got {target_hz}")
    if target_hz > x.sample_rate_hz:
        raise InputError(f"upsampling {x.sample_rate_hz} -> {target_hz} Hz is not supported")
    n_out = int(round(x.n_samples * target_hz / x.sample_rate_hz))
    if target_hz == x.sample_rate_hz:
        return _with(x, x.samples.copy())
    ratio = Fraction(target_hz / x.sample_rate_hz).limit_denominator(10_000)
    y = sps.resample_poly(x.samples, ratio.numerator, ratio.denominator, axis=-1, padtype="line")
    if y.shape[1] >= n_out:
        y = y[:, :n_out]
    else:
        y = np.pad(y, ((0, 0), (0, n_out - y.shape[1])), mode="edge")
    return _with(x, y, sample_rate_hz=float(target_hz))


def normalize_amplitude(x: EegClip, max_abs: float = CORRUPT_THRESHOLD) -> EegClip:
    """Divide by 0.1 mV; typical EEG then lies in [-1, 1]."""
    y = x.samples / AMPLITUDE_UNIT_MV
    peak = float(np.max(np.abs(y))) if y.size else 0.0
    if not math.isfinite(peak) or peak > max_abs:
        raise InputError(
            f"clip {x.clip_id!r}: normalized amplitude {peak:.3g} exceeds {max_abs}; corrupt input?")
    return _with(x, y)


def epoch(x: EegClip, window_s: float = 2.0) -> list[EegClip]:
    """Cut into consecutive non-overlapping windows; a shorter tail is kept."""
    if window_s <= 0:
        raise InputError(f"window must be positive, got {window_s}")
    width = int(round(window_s * x.sample_rate_hz))
    out = []
    for k, start in enumerate(range(0, x.n_samples, width)):
        piece = x.samples[:, start:start + width]
        out.append(_with(x, piece.copy(), clip_id=f"{x.clip_id}_{k}" if x.clip_id else str(k)))
    return out


@dataclass
class SplitManifest:
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    processed: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "ratios": list(self.ratios), "processed": self.processed,
            "train": self.train, "val": self.val, "test": self.test, "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(d["seed"], list(d["train"]), list(d["val"]), list(d["test"]),
                   tuple(d["ratios"]), d.get("processed", False), d.get("extra", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def split(ids: Sequence[str], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Seeded shuffle; floor allocation for train and val, remainder to test."""
    ids = list(ids)
    if not ids:
        raise InputError("cannot split an empty id list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios must be three non-negative reals summing to 1, got {ratios}")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    return SplitManifest(
        seed=seed,
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        ratios=tuple(float(r) for r in ratios),
    )


class EegPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless preprocessing chain as a transformer over lists of clips.

    Order is fixed: rereference, band-pass, notch, resample, normalize, epoch.
    ``transform`` returns the flat list of processed epochs.
    """

    def __init__(self, ref_channels=(6, 7), low_hz=0.1, high_hz=50.0, filter_order=4,
                 notch_hz=50.0, notch_q=30.0, target_hz=200.0, window_s=2.0):
        self.ref_channels = ref_channels
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.filter_order = filter_order
        self.notch_hz = notch_hz
        self.notch_q = notch_q
        self.target_hz = target_hz
        self.window_s = window_s

    def fit(self, X, y=None):
        self.n_clips_seen_ = len(_check_clips(X))
        return self

    def process_clip(self, clip: EegClip) -> list[EegClip]:
        if clip.processed:
            raise InputError(f"clip {clip.clip_id!r} is already processed; refusing to re-apply")
        x = rereference(clip, tuple(self.ref_channels))
        x = bandpass(x, self.low_hz, self.high_hz, self.filter_order)
        x = notch(x, self.notch_hz, self.notch_q)
        x = resample(x, self.target_hz)
        x = normalize_amplitude(x)
        x = dataclasses.replace(x, processed=True)
        return epoch(x, self.window_s)

    def transform(self, X) -> list[EegClip]:
        out = []
        for clip in _check_clips(X):
            out.extend(self.process_clip(clip))
        return out


def _check_clips(X) -> list[EegClip]:
    if isinstance(X, EegClip):
        X = [X]
    X = list(X)
    for c in X:
        if not isinstance(c, EegClip):
            raise InputError(f"expected EegClip, got {type(c).__name__}")
    return X
