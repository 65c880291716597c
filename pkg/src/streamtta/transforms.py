"""Test-time transformation bank: input-space augmentations and feature-space partition masks.

Two families live here. Input augmentations (identity, amplitude scaling,
seeded channel-proportional noise, frequency shift via the analytic signal,
sliding windows) produce alternative views of one trial, all cropped to the
model input length of one second less than the raw trial. Partition masks
deterministically drop disjoint feature blocks and rescale the survivors so
the expected feature vector is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)
from .numerics import analytic_signal

IDENTITY = "identity"
SCALE = "scale"
NOISE = "noise"
FREQ_SHIFT = "freq_shift"
SLIDE = "slide"

KINDS = (IDENTITY, SCALE, NOISE, FREQ_SHIFT, SLIDE)


@dataclass
class Trial:
    """One multichannel time-series sample, channel-major (channels x samples)."""

    data: np.ndarray
    rate_hz: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ContractError(f"trial data must be 2-D channels x samples, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("trial contains non-finite samples")
        if not (self.rate_hz > 0):
            raise ContractError("sampling rate must be positive")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.samples / self.rate_hz


@dataclass(frozen=True)
class TransformSpec:
    """One entry of the transformation bank.

    kind-specific parameters: `factor` (scale), `ratio` + `seed` (noise),
    `shift_hz` (freq_shift), `start_s` (slide).
    """

    kind: str
    factor: float = 1.0
    ratio: float = 0.0
    seed: int = 0
    shift_hz: float = 0.0
    start_s: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if self.kind == SCALE and not (self.factor > 0):
            raise ConfigError("scale factor must be positive")
        if self.kind == NOISE and self.ratio < 0:
            raise ConfigError("noise ratio must be non-negative")
        if self.kind == SLIDE and self.start_s < 0:
            raise ConfigError("slide start must be non-negative")

    def with_seed(self, seed: int) -> "TransformSpec":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class DropoutMask:
    """Deterministic feature mask: `kept` flags with drop rate `rate`."""

    kept: np.ndarray
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "kept", np.asarray(self.kept, dtype=bool))
        if self.kept.ndim != 1 or self.kept.size < 1:
            raise ContractError("mask must be a non-empty 1-D boolean vector")
        if not (0.0 < self.rate < 1.0):
            raise ContractError("drop rate must lie in (0, 1)")
        dropped = int(np.sum(~self.kept))
        if abs(dropped - self.rate * self.dim) >= 1.0:
            raise ContractError(
                f"dropped count {dropped} inconsistent with rate {self.rate} over dim {self.dim}"
            )

    @property
    def dim(self) -> int:
        return self.kept.size


def model_input_samples(trial: Trial) -> int:
    """Model input length: one second fewer than the raw trial."""
    out = trial.samples - int(round(trial.rate_hz))
    if out < 1:
        raise DegenerateInputError(
            f"trial of {trial.samples} samples at {trial.rate_hz} Hz is too short "
            "to crop one second"
        )
    return out


def apply_transform(trial: Trial, spec: TransformSpec) -> Trial:
    """Apply one bank entry to a raw trial, producing a model-input-length trial.

    Non-slide kinds operate on the leading crop; slide crops its own window
    from the full trial.
    """
    out_samples = model_input_samples(trial)
    if spec.kind == SLIDE:
        start = int(round(spec.start_s * trial.rate_hz))
        if start + out_samples > trial.samples:
            raise ContractError(
                f"slide window [{spec.start_s}s, +{out_samples} samples] exceeds trial length"
            )
        return Trial(trial.data[:, start : start + out_samples].copy(), trial.rate_hz)

    head = trial.data[:, :out_samples]
    if spec.kind == IDENTITY:
        out = head.copy()
    elif spec.kind == SCALE:
        out = head * spec.factor
    elif spec.kind == NOISE:
        rng = np.random.default_rng(spec.seed)
        per_channel_std = head.std(axis=1)
        noise = rng.standard_normal(head.shape) * (spec.ratio * per_channel_std)[:, None]
        out = head + noise
    elif spec.kind == FREQ_SHIFT:
        t = np.arange(out_samples) / trial.rate_hz
        phase = np.exp(2j * np.pi * spec.shift_hz * t)
        out = np.empty_like(head)
        for c in range(head.shape[0]):
            out[c] = (analytic_signal(head[c]) * phase).real
    else:
        raise ConfigError(f"unknown transform kind {spec.kind!r}")
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{spec.kind} transform produced non-finite samples")
    return Trial(out, trial.rate_hz)


@dataclass(frozen=True)
class BankConfig:
    """Configuration of the input-augmentation bank.

    The default bank has 12 entries: identity, three amplitude scales, one
    seeded noise, a low/high frequency-shift pair, and five sliding windows.
    """

    include_identity: bool = True
    scale_factors: tuple = (0.9, 1.1, 1.2)
    noise_ratios: tuple = (0.05,)
    noise_seed: int = 0
    freq_shifts_hz: tuple = (0.2, -0.2)
    slide_starts_s: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)

    @classmethod
    def from_dict(cls, raw: dict) -> "BankConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown bank config keys: {sorted(unknown)}")
        coerced = dict(raw)
        for key in ("scale_factors", "noise_ratios", "freq_shifts_hz", "slide_starts_s"):
            if key in coerced and coerced[key] is not None:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)


def build_bank(config: BankConfig | None = None) -> list[TransformSpec]:
    """Materialize the transformation bank in a fixed, stable order."""
    cfg = config if config is not None else BankConfig()
    bank: list[TransformSpec] = []
    if cfg.include_identity:
        bank.append(TransformSpec(IDENTITY))
    for factor in cfg.scale_factors:
        bank.append(TransformSpec(SCALE, factor=float(factor)))
    for ratio in cfg.noise_ratios:
        bank.append(TransformSpec(NOISE, ratio=float(ratio), seed=int(cfg.noise_seed)))
    for shift in cfg.freq_shifts_hz:
        bank.append(TransformSpec(FREQ_SHIFT, shift_hz=float(shift)))
    for start in cfg.slide_starts_s:
        bank.append(TransformSpec(SLIDE, start_s=float(start)))
    if not bank:
        raise ConfigError("transformation bank must contain at least one entry")
    return bank


def build_masks(k: int, d: int, contiguous: bool = True) -> list[DropoutMask]:
    """K partition masks over d features, each dropping a disjoint block at rate 1/K.

    Contiguous blocks by default; `contiguous=False` drops strided index
    classes instead. Either way every feature is dropped by exactly one mask.
    """
    if k < 2:
        raise ContractError("need at least two masks for a partition")
    if d < k:
        raise ContractError(f"cannot partition {d} features into {k} non-empty blocks")
    rate = 1.0 / k
    masks = []
    if contiguous:
        base, rem = divmod(d, k)
        start = 0
        for b in range(k):
            size = base + (1 if b < rem else 0)
            kept = np.ones(d, dtype=bool)
            kept[start : start + size] = False
            masks.append(DropoutMask(kept, rate))
            start += size
    else:
        idx = np.arange(d)
        for b in range(k):
            kept = (idx % k) != b
            masks.append(DropoutMask(kept, rate))
    return masks


def apply_mask(features: np.ndarray, mask: DropoutMask) -> np.ndarray:
    """Mask a feature vector and rescale survivors by 1/(1-rate)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionError(f"expected a 1-D feature vector, got shape {f.shape}")
    if f.shape[0] != mask.dim:
        raise DimensionError(f"feature dim {f.shape[0]} != mask dim {mask.dim}")
    return np.where(mask.kept, f, 0.0) / (1.0 - mask.rate)
