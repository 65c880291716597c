"""Synthetic multichannel dataset generator and the on-disk trial-stream format.

Trials carry class (or regression-target) information in band-limited
oscillations projected through fixed spatial patterns, on top of mixed
autoregressive background activity. Distinct "subjects" differ by a linear
channel-mixing perturbation and an optional spectral tilt of the background,
which creates exactly the kind of marginal shift covariance alignment is
meant to remove.

On disk a stream is a directory of one-trial ``.npy`` files plus an
``index.json`` naming the order, labels, and sampling rate.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .transforms import Trial

CLASSIFICATION = "classification"
REGRESSION = "regression"

STREAM_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    task: str = CLASSIFICATION
    channels: int = 8
    rate_hz: float = 128.0
    trial_seconds: float = 3.0
    n_classes: int = 2
    n_subjects: int = 5
    trials_per_subject: int = 120
    mixing_strength: float = 0.4
    spectral_tilt: float = 0.0
    class_freqs_hz: tuple = (10.0, 12.0)
    signal_amp: float = 1.0
    background_amp: float = 1.0
    sensor_noise: float = 0.05
    burst_fraction: float = 1.0   # <1: oscillation active only in a random sub-window
    target_freq_hz: float = 10.0
    amp_range: tuple = (0.4, 1.6)

    def __post_init__(self):
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == CLASSIFICATION and len(self.class_freqs_hz) != self.n_classes:
            raise ConfigError("need one class frequency per class")
        if self.channels < 2 or self.n_subjects < 1 or self.trials_per_subject < 1:
            raise ConfigError("invalid dataset geometry")
        if not (self.rate_hz > 0 and self.trial_seconds > 0):
            raise ConfigError("invalid sampling geometry")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        coerced = dict(raw)
        for key in ("class_freqs_hz", "amp_range"):
            if key in coerced and coerced[key] is not None:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)


@dataclass
class SubjectData:
    trials: list
    labels: np.ndarray


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    seed: int
    subjects: list
    patterns: np.ndarray      # (n_classes or 1, channels) source spatial patterns
    mixings: list             # per-subject channel-mixing matrices


def _orthonormal_patterns(rng: np.random.Generator, n: int, channels: int) -> np.ndarray:
    raw = rng.standard_normal((channels, max(n, 1)))
    q, _ = np.linalg.qr(raw)
    return q[:, :n].T.copy()


def _ar1_background(rng: np.random.Generator, pole: float, channels: int, samples: int) -> np.ndarray:
    eps = rng.standard_normal((channels, samples))
    out = np.empty_like(eps)
    out[:, 0] = eps[:, 0]
    gain = np.sqrt(max(1.0 - pole * pole, 1e-6))
    for t in range(1, samples):
        out[:, t] = pole * out[:, t - 1] + gain * eps[:, t]
    return out


def gen_synthetic_dataset(spec: SynthSpec, seed: int = 0) -> SyntheticDataset:
    """Deterministic synthetic dataset; identical bytes for identical (spec, seed)."""
    root = np.random.SeedSequence(seed)
    global_rng = np.random.default_rng(root.spawn(1)[0])
    samples = int(round(spec.rate_hz * spec.trial_seconds))
    t = np.arange(samples) / spec.rate_hz

    n_patterns = spec.n_classes if spec.task == CLASSIFICATION else 1
    patterns = _orthonormal_patterns(global_rng, n_patterns, spec.channels)
    # orthogonal background mixing keeps the background spatially well-conditioned,
    # so whitening has no runaway gain directions
    background_mix, _ = np.linalg.qr(global_rng.standard_normal((spec.channels, spec.channels)))

    def make_envelope(rng_env):
        """Smooth on/off envelope; a random sub-window when burst_fraction < 1."""
        width = max(4, int(round(np.clip(spec.burst_fraction, 0.0, 1.0) * samples)))
        ramp = max(2, int(round(0.15 * width)))
        env = np.zeros(samples)
        start = 0 if width >= samples else int(rng_env.integers(0, samples - width + 1))
        env[start : start + width] = 1.0
        rise = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[start : start + ramp] *= rise
        env[start + width - ramp : start + width] *= rise[::-1]
        return env

    subject_seeds = root.spawn(spec.n_subjects)
    subjects = []
    mixings = []
    for s in range(spec.n_subjects):
        rng = np.random.default_rng(subject_seeds[s])
        mixing = np.eye(spec.channels) + spec.mixing_strength * rng.standard_normal(
            (spec.channels, spec.channels)) / np.sqrt(spec.channels)
        mixings.append(mixing)
        pole = float(np.clip(0.5 + spec.spectral_tilt * rng.uniform(-1.0, 1.0), 0.0, 0.95))

        n = spec.trials_per_subject
        if spec.task == CLASSIFICATION:
            labels = np.tile(np.arange(spec.n_classes), n // spec.n_classes + 1)[:n]
            rng.shuffle(labels)
        else:
            labels = rng.uniform(0.0, 1.0, n)
        trials = []
        for i in range(n):
            if spec.task == CLASSIFICATION:
                freq = spec.class_freqs_hz[int(labels[i])]
                amp = spec.signal_amp
                pattern = patterns[int(labels[i])]
            else:
                freq = spec.target_freq_hz
                lo, hi = spec.amp_range
                amp = spec.signal_amp * (lo + float(labels[i]) * (hi - lo))
                pattern = patterns[0]
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = amp * np.sin(2.0 * np.pi * freq * t + phase) * make_envelope(rng)
            background = spec.background_amp * (background_mix @ _ar1_background(
                rng, pole, spec.channels, samples))
            sensor = spec.sensor_noise * rng.standard_normal((spec.channels, samples))
            latent = np.outer(pattern, wave) + background + sensor
            trials.append(Trial(mixing @ latent, spec.rate_hz))
        subjects.append(SubjectData(trials=trials, labels=np.asarray(labels)))
    return SyntheticDataset(spec=spec, seed=seed, subjects=subjects,
                            patterns=patterns, mixings=mixings)


# --- stream directory format ---------------------------------------------------


def write_stream_dir(path, trials: list, labels, rate_hz: float, task: str) -> None:
    """Write one subject's ordered trial stream: .npy trial files plus index.json."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, trial in enumerate(trials):
        fname = f"trial_{i:05d}.npy"
        np.save(os.path.join(path, fname), trial.data.astype(np.float64), allow_pickle=False)
        label = labels[i]
        entries.append({"file": fname, "label": int(label) if task == CLASSIFICATION else float(label)})
    index = {
        "format_version": STREAM_FORMAT_VERSION,
        "rate_hz": float(rate_hz),
        "task": task,
        "trials": entries,
    }
    with open(os.path.join(path, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def read_stream_dir(path) -> tuple[list, np.ndarray, dict]:
    """Read an ordered trial stream; returns (trials, labels, index metadata)."""
    index_path = os.path.join(path, "index.json")
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read stream index {index_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"stream index {index_path} is not valid JSON: {exc}") from exc
    if index.get("format_version") != STREAM_FORMAT_VERSION:
        raise DataError(f"unsupported stream format version in {index_path}")
    rate = float(index["rate_hz"])
    trials = []
    labels = []
    for entry in index["trials"]:
        fpath = os.path.join(path, entry["file"])
        try:
            data = np.load(fpath, allow_pickle=False)
        except OSError as exc:
            raise DataError(f"cannot read trial file {fpath}: {exc}") from exc
        trials.append(Trial(np.asarray(data, dtype=np.float64), rate))
        labels.append(entry["label"])
    task = index.get("task", CLASSIFICATION)
    labels_arr = np.asarray(labels, dtype=np.int64 if task == CLASSIFICATION else np.float64)
    return trials, labels_arr, index


def write_dataset(dataset: SyntheticDataset, out_dir) -> None:
    """Write a whole dataset: one stream directory per subject plus dataset.json."""
    os.makedirs(out_dir, exist_ok=True)
    subject_dirs = []
    for s, subject in enumerate(dataset.subjects):
        sub = f"subject_{s:02d}"
        write_stream_dir(os.path.join(out_dir, sub), subject.trials, subject.labels,
                         dataset.spec.rate_hz, dataset.spec.task)
        subject_dirs.append(sub)
    info = {
        "format_version": STREAM_FORMAT_VERSION,
        "seed": dataset.seed,
        "spec": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in dataset.spec.__dict__.items()},
        "subjects": subject_dirs,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
