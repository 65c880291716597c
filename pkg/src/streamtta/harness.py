"""Deployable surface: streaming evaluation loop, noise-injection protocol, metrics.

The loop is strictly prequential: each trial is predicted using only the
model, the rank head, and state accumulated from earlier trials, then the
alignment/normalization state is advanced. Per-trial wall time is decomposed
into align / transform / forward / rank / aggregate stages.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .aggregate import PredictionSet, classify, regress
from .alignment import EaState, ea_align, ea_update
from .container import read_container_file
from .datagen import CLASSIFICATION, REGRESSION, read_stream_dir
from .errors import ConfigError, DataError, DimensionError, EngineError, NumericalError
from .model import (
    ModelBundle,
    bn_adapt,
    bundle_from_section,
    features_batch,
    head_batch,
)
from .quant import QuantModel, features_q, forward_q, head_q, quantize
from .rank import (
    ARCH_MLP,
    MappingModel,
    RankingModel,
    RankTrainConfig,
    VARIANT_FULL,
    VARIANT_LOSS,
    mapping_from_section,
    ranking_from_section,
    task_rank_labels,
    train_mapping,
    train_ranking,
    gen_synthetic,
)
from .transforms import (
    IDENTITY,
    NOISE,
    BankConfig,
    Trial,
    TransformSpec,
    apply_transform,
    apply_mask,
    build_bank,
    build_masks,
)
from .util import rankdata_average, stable_softmax

REPORT_VERSION = 1

MODE_BASELINE = "baseline"
MODE_AUGMENT = "bft-a"
MODE_MASKS = "bft-d"
MODE_AUG_MEAN = "aug-mean"
MODE_MC_DROPOUT = "mc-dropout"
MODE_ABLATION_V1 = "ablation-v1"
MODE_ABLATION_V2 = "ablation-v2"

MODES = (MODE_BASELINE, MODE_AUGMENT, MODE_MASKS, MODE_AUG_MEAN, MODE_MC_DROPOUT,
         MODE_ABLATION_V1, MODE_ABLATION_V2)

_UNIFORM_MODES = (MODE_AUG_MEAN, MODE_MC_DROPOUT)
_MASK_MODES = (MODE_MASKS, MODE_MC_DROPOUT)

UPDATE_THEN_ALIGN = "update-then-align"
ALIGN_THEN_UPDATE = "align-then-update"


@dataclass(frozen=True)
class NoiseSpec:
    """Test-time corruption: temporal burst or a single bad channel."""

    kind: str = "none"            # none | temporal | spatial
    window_s: tuple = (1.5, 2.0)
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "temporal", "spatial"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.kind == "temporal" and not (0.0 <= self.window_s[0] < self.window_s[1]):
            raise ConfigError("noise window must satisfy 0 <= start < end")
        if self.ratio < 0:
            raise ConfigError("noise ratio must be non-negative")

    @classmethod
    def from_dict(cls, raw: dict) -> "NoiseSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown noise spec keys: {sorted(unknown)}")
        coerced = dict(raw)
        if "window_s" in coerced and coerced["window_s"] is not None:
            coerced["window_s"] = tuple(coerced["window_s"])
        return cls(**coerced)


def inject_noise(trial: Trial, spec: NoiseSpec) -> Trial:
    """Seeded corruption with per-channel-proportional magnitude; `none` is a no-op."""
    if spec.kind == "none" or spec.ratio == 0.0:
        return trial
    rng = np.random.default_rng(spec.seed)
    std = trial.data.std(axis=1)
    data = trial.data.copy()
    if spec.kind == "temporal":
        start = int(round(spec.window_s[0] * trial.rate_hz))
        end = int(round(spec.window_s[1] * trial.rate_hz))
        if end > trial.samples:
            raise ConfigError(
                f"noise window {spec.window_s} exceeds trial duration {trial.duration_s:.2f}s")
        width = end - start
        data[:, start:end] += rng.standard_normal((trial.channels, width)) * (spec.ratio * std)[:, None]
    else:
        channel = int(rng.integers(0, trial.channels))
        data[channel] += rng.standard_normal(trial.samples) * spec.ratio * std[channel]
    return Trial(data, trial.rate_hz)


@dataclass
class StreamConfig:
    """Everything the streaming loop needs; every default is overridable from YAML."""

    mode: str = MODE_AUGMENT
    task: str = CLASSIFICATION
    model_path: str | None = None
    rank_path: str | None = None
    stream_path: str | None = None
    calib_path: str | None = None
    bank: BankConfig = field(default_factory=BankConfig)
    tau: float | None = None          # None resolves per mode
    k_masks: int = 10
    mask_contiguous: bool = True
    ea_enabled: bool | None = None    # None: off for baseline, on otherwise
    ea_update_order: str = UPDATE_THEN_ALIGN
    bn_enabled: bool = False
    bn_window: int = 8
    bn_momentum: float = 0.1
    quantized: bool = False
    noise: NoiseSpec | None = None
    seed: int = 0
    force_uniform_weights: bool = False
    record_branch_outputs: bool = False
    ndcg_k: int = 6
    report_path: str | None = None
    csv_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.ea_update_order not in (UPDATE_THEN_ALIGN, ALIGN_THEN_UPDATE):
            raise ConfigError(f"unknown ea update order {self.ea_update_order!r}")
        if self.tau is not None and not (self.tau > 0):
            raise ConfigError("tau must be positive")
        if self.quantized and self.bn_enabled:
            raise ConfigError("quantized inference is incompatible with batch-norm adaptation")
        if not (0.0 < self.bn_momentum <= 1.0):
            raise ConfigError("bn momentum must lie in (0, 1]")

    @property
    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        if self.mode in (MODE_BASELINE, MODE_AUG_MEAN, MODE_MC_DROPOUT):
            return 1.0
        return 0.5

    @property
    def resolved_ea(self) -> bool:
        if self.ea_enabled is not None:
            return self.ea_enabled
        return self.mode != MODE_BASELINE

    @property
    def uses_masks(self) -> bool:
        return self.mode in _MASK_MODES

    @property
    def needs_rank_head(self) -> bool:
        return self.mode in (MODE_AUGMENT, MODE_MASKS, MODE_ABLATION_V1, MODE_ABLATION_V2) \
            and not self.force_uniform_weights

    @classmethod
    def from_dict(cls, raw: dict) -> "StreamConfig":
        raw = dict(raw)
        mapped = {}
        rename = {"model": "model_path", "rank_head": "rank_path", "stream": "stream_path",
                  "calibration": "calib_path", "report": "report_path", "csv": "csv_path"}
        for key, value in raw.items():
            mapped[rename.get(key, key)] = value
        if "bank" in mapped and isinstance(mapped["bank"], dict):
            mapped["bank"] = BankConfig.from_dict(mapped["bank"])
        if "masks" in mapped:
            masks = mapped.pop("masks") or {}
            if "k" in masks:
                mapped["k_masks"] = int(masks["k"])
            if "contiguous" in masks:
                mapped["mask_contiguous"] = bool(masks["contiguous"])
        if "ea" in mapped:
            ea = mapped.pop("ea") or {}
            if "enabled" in ea:
                mapped["ea_enabled"] = bool(ea["enabled"])
            if "update_order" in ea:
                mapped["ea_update_order"] = ea["update_order"]
        if "bn" in mapped:
            bn = mapped.pop("bn") or {}
            if "enabled" in bn:
                mapped["bn_enabled"] = bool(bn["enabled"])
            if "window" in bn:
                mapped["bn_window"] = int(bn["window"])
            if "momentum" in bn:
                mapped["bn_momentum"] = float(bn["momentum"])
        if "noise" in mapped and isinstance(mapped["noise"], dict):
            mapped["noise"] = NoiseSpec.from_dict(mapped["noise"])
        known = set(cls.__dataclass_fields__)
        unknown = set(mapped) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**mapped)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def from_yaml(cls, path) -> "StreamConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a key/value mapping")
        return cls.from_dict(raw)

    def describe(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if isinstance(value, BankConfig):
                out[key] = value.__dict__ | {
                    k: list(v) for k, v in value.__dict__.items() if isinstance(v, tuple)}
            elif isinstance(value, NoiseSpec):
                out[key] = {**value.__dict__, "window_s": list(value.window_s)}
            else:
                out[key] = value
        out["resolved_tau"] = self.resolved_tau
        out["resolved_ea"] = self.resolved_ea
        return out


STAGES = ("align", "transform", "forward", "rank", "aggregate")


@dataclass
class TrialRecord:
    index: int
    label: float
    prediction: float
    weights: list
    scores: list
    branch_losses: list | None
    latency: dict
    fused: list | None = None
    branch_outputs: list | None = None


@dataclass
class EvalReport:
    version: int
    config: dict
    metrics: dict
    timing_ms: dict
    records: list

    def to_json(self) -> str:
        payload = {
            "report_version": self.version,
            "config": self.config,
            "metrics": self.metrics,
            "timing_ms": self.timing_ms,
            "records": [r.__dict__ for r in self.records],
        }
        return json.dumps(payload, indent=1, sort_keys=True, default=_json_default)

    def write(self, json_path=None, csv_path=None) -> None:
        if json_path:
            with open(json_path, "w") as fh:
                fh.write(self.to_json())
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["report_version", self.version])
                writer.writerow(["index", "label", "prediction"] + [f"t_{s}_ms" for s in STAGES])
                for r in self.records:
                    writer.writerow([r.index, r.label, r.prediction]
                                    + [f"{r.latency[s] * 1e3:.4f}" for s in STAGES])


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def pearson_cc(a: np.ndarray, b: np.ndarray):
    """Pearson correlation; returns None when either series has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def ndcg_at_k(scores: np.ndarray, losses: np.ndarray, k: int) -> float:
    """Gain-discounted ranking quality of the reliability ordering vs task losses.

    Relevance of a branch is linear in its true quality: K - rank + 1, where
    rank 1 is the lowest-loss branch. Standard log2 positional discount.
    """
    scores = np.asarray(scores, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    n = scores.size
    k = min(k, n)
    true_ranks = task_rank_labels(losses)
    relevance = n - true_ranks + 1.0
    order = np.argsort(-scores, kind="stable")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.sum(relevance[order[:k]] * discounts))
    ideal = float(np.sum(np.sort(relevance)[::-1][:k] * discounts))
    return dcg / ideal


def compute_metrics(preds, labels, task: str, rank_data=None, ndcg_k: int = 6) -> dict:
    """Accuracy (classification) or CC + RMSE (regression), plus rank-head NDCG."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape[0] != labels.shape[0]:
        raise DimensionError("predictions and labels differ in length")
    if not np.all(np.isfinite(labels.astype(np.float64))):
        raise NumericalError("labels must be finite")
    metrics: dict = {"n_trials": int(preds.shape[0])}
    if task == CLASSIFICATION:
        metrics["accuracy"] = float(np.mean(preds.astype(int) == labels.astype(int)))
    else:
        err = preds.astype(np.float64) - labels.astype(np.float64)
        metrics["rmse"] = float(np.sqrt(np.mean(err ** 2)))
        cc = pearson_cc(preds, labels)
        metrics["cc"] = cc
        metrics["cc_defined"] = cc is not None
    if rank_data:
        ndcgs = [ndcg_at_k(scores, losses, ndcg_k)
                 for scores, losses in rank_data if scores is not None]
        if ndcgs:
            metrics[f"ndcg@{ndcg_k}_median"] = float(np.median(ndcgs))
            metrics[f"ndcg@{ndcg_k}_mean"] = float(np.mean(ndcgs))
    return metrics


# --- rank-head fitting on a trained backbone ------------------------------------


def branch_inputs(trial: Trial, cfg: StreamConfig, trial_index: int = 0) -> list:
    """The branch input trials of one (already aligned) trial.

    Mask modes forward a single identity-cropped input; augmentation modes
    apply every bank entry, reseeding stochastic entries per trial so repeat
    runs are reproducible.
    """
    if cfg.uses_masks or cfg.mode == MODE_BASELINE:
        return [apply_transform(trial, TransformSpec(IDENTITY))]
    out = []
    for spec in build_bank(cfg.bank):
        if spec.kind == NOISE:
            spec = spec.with_seed(spec.seed + trial_index)
        out.append(apply_transform(trial, spec))
    return out


def branch_features(bundle: ModelBundle, trial: Trial, cfg: StreamConfig,
                    trial_index: int = 0, qm: QuantModel | None = None) -> np.ndarray:
    """The K branch feature vectors of one (already aligned) trial."""
    inputs = branch_inputs(trial, cfg, trial_index)
    if qm is not None:
        base = np.stack([features_q(qm, bt) for bt in inputs])
    else:
        base = features_batch(bundle, np.stack([bt.data for bt in inputs]))
    if cfg.uses_masks:
        masks = build_masks(cfg.k_masks, base.shape[1], contiguous=cfg.mask_contiguous)
        return np.stack([apply_mask(base[0], m) for m in masks])
    return base


def task_losses_from_outputs(outputs: np.ndarray, label, task: str) -> np.ndarray:
    """Per-branch task loss: cross-entropy for classification, squared error for regression."""
    if task == CLASSIFICATION:
        probs = stable_softmax(outputs, axis=1)
        return -np.log(np.maximum(probs[:, int(label)], 1e-300))
    return (outputs[:, 0] - float(label)) ** 2


def branch_task_losses(bundle: ModelBundle, feats: np.ndarray, label, task: str) -> np.ndarray:
    return task_losses_from_outputs(head_batch(bundle, feats), label, task)


@dataclass
class RankFitConfig:
    """Configuration for fitting the mapping + ranking heads on training data."""

    synthetic_samples: int = 8000
    rank_input: str = "weights"    # mapping input during ranking training; or "losses"
    variant: str = VARIANT_FULL
    mapping: RankTrainConfig = field(default_factory=RankTrainConfig)
    ranking: RankTrainConfig = field(default_factory=lambda: RankTrainConfig(epochs=60))


def fit_rank_head(bundle: ModelBundle, trials: list, labels, cfg: StreamConfig,
                  fit: RankFitConfig | None = None, mapping: MappingModel | None = None):
    """Train the mapping network on synthetic ranks, then the scoring layer on real branches.

    A pre-trained `mapping` may be passed in (it only depends on the branch
    count, so one per K can be reused across backbones). Returns
    (mapping, ranking); the loss-regression variant returns the mapping
    untouched but unused by the scoring layer.
    """
    fit = fit or RankFitConfig()
    if fit.rank_input not in ("weights", "losses"):
        raise ConfigError(f"unknown rank input {fit.rank_input!r}")
    k = cfg.k_masks if cfg.uses_masks else len(build_bank(cfg.bank))
    if mapping is None:
        samples = gen_synthetic(fit.synthetic_samples, k, seed=fit.mapping.seed)
        mapping = train_mapping(samples, fit.mapping)
    elif mapping.arch == ARCH_MLP and mapping.k != k:
        raise ConfigError(f"mapping is fixed to K={mapping.k}, bank has K={k}")

    feats = []
    losses = []
    for i, trial in enumerate(trials):
        z = branch_features(bundle, trial, cfg, trial_index=i)
        feats.append(z)
        losses.append(branch_task_losses(bundle, z, labels[i], cfg.task))
    z = np.stack(feats)
    loss_arr = np.stack(losses)
    if fit.variant == VARIANT_LOSS:
        ranking = train_ranking(z, loss_arr, None, fit.ranking, variant=VARIANT_LOSS)
        return mapping, ranking
    if fit.rank_input == "losses":
        targets = np.stack([stable_softmax(-row) for row in loss_arr])
        rank_labels = np.stack([task_rank_labels(row) for row in loss_arr])
        # feed softmax-normalized losses through the mapping by training the
        # scorer against rank labels computed from them
        labels_arr = rank_labels
    else:
        labels_arr = np.stack([task_rank_labels(row) for row in loss_arr])
    ranking = train_ranking(z, labels_arr, mapping, fit.ranking, variant=VARIANT_FULL)
    return mapping, ranking


def load_rank_head(path):
    sections, tensors, _ = read_container_file(path)
    if "ranking" not in sections:
        raise DataError(f"{path} has no ranking section")
    ranking = ranking_from_section(sections["ranking"], tensors)
    mapping = None
    if "mapping" in sections:
        mapping = mapping_from_section(sections["mapping"], tensors)
    return mapping, ranking


# --- the streaming loop ----------------------------------------------------------


def _branch_weights(cfg: StreamConfig, ranking: RankingModel | None,
                    feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reliability scores and simplex weights for the K branches of one trial."""
    k = feats.shape[0]
    if cfg.mode == MODE_BASELINE or k == 1:
        return np.zeros(k), np.ones(k) / k
    if cfg.force_uniform_weights or cfg.mode in _UNIFORM_MODES:
        return np.zeros(k), np.ones(k) / k
    if cfg.mode in (MODE_AUGMENT, MODE_MASKS):
        scores = ranking.scores(feats)
        if ranking.variant == VARIANT_LOSS:
            scores = -scores
        return scores, stable_softmax(scores)
    if cfg.mode == MODE_ABLATION_V1:
        scores = -ranking.scores(feats)   # the layer predicts loss; invert
        return scores, stable_softmax(scores)
    if cfg.mode == MODE_ABLATION_V2:
        predicted_loss = ranking.scores(feats)
        ranks = rankdata_average(predicted_loss)       # 1 = lowest predicted loss
        scores = k + 1.0 - ranks                       # best branch gets K
        return scores, scores / scores.sum()
    raise ConfigError(f"mode {cfg.mode!r} has no weighting rule")


def run_stream(cfg: StreamConfig, bundle: ModelBundle | None = None,
               rank_head=None, stream=None) -> EvalReport:
    """Run the online evaluation loop over an ordered trial stream.

    `bundle`, `rank_head` (mapping, ranking) and `stream` (trials, labels)
    may be passed directly; otherwise they are loaded from the configured
    paths. Predictions for trial t use nothing from trials after t.
    """
    from .model import load_model_file  # local import to keep module import light

    if bundle is None:
        if not cfg.model_path:
            raise ConfigError("config needs a model path")
        bundle = load_model_file(cfg.model_path)
    mapping = ranking = None
    if cfg.needs_rank_head:
        if rank_head is not None:
            mapping, ranking = rank_head
        elif cfg.rank_path:
            mapping, ranking = load_rank_head(cfg.rank_path)
        else:
            raise ConfigError(f"mode {cfg.mode!r} needs a rank head")
    if stream is not None:
        trials, labels = stream
    else:
        if not cfg.stream_path:
            raise ConfigError("config needs a stream path")
        trials, labels, _ = read_stream_dir(cfg.stream_path)

    qm = None
    if cfg.quantized:
        if not cfg.calib_path:
            raise ConfigError("quantized mode needs a calibration stream")
        calib_trials, _, _ = read_stream_dir(cfg.calib_path)
        headroom = 1.0
        if cfg.uses_masks:
            headroom = 1.0 / (1.0 - 1.0 / cfg.k_masks)
        calib_inputs = [apply_transform(t, TransformSpec(IDENTITY)) for t in calib_trials]
        qm = quantize(bundle, calib_inputs, feature_headroom=headroom)

    tau = cfg.resolved_tau
    ea_state = EaState()
    bn_bundle = bundle
    bn_buffer: list = []
    masks = None
    records: list[TrialRecord] = []
    rank_data = []
    for t_idx, trial in enumerate(trials):
        label = labels[t_idx]
        try:
            if cfg.noise is not None and cfg.noise.kind != "none":
                per_trial = NoiseSpec(kind=cfg.noise.kind, window_s=cfg.noise.window_s,
                                      ratio=cfg.noise.ratio, seed=cfg.noise.seed + t_idx)
                trial = inject_noise(trial, per_trial)

            # align: covariance alignment plus batch-norm adaptation
            tic = time.perf_counter()
            if cfg.resolved_ea:
                if cfg.ea_update_order == UPDATE_THEN_ALIGN or ea_state.count == 0:
                    ea_state = ea_update(ea_state, trial)
                    aligned = ea_align(ea_state, trial)
                else:
                    aligned = ea_align(ea_state, trial)
                    ea_state = ea_update(ea_state, trial)
            else:
                aligned = trial
            if cfg.bn_enabled:
                model_input = apply_transform(aligned, TransformSpec(IDENTITY))
                bn_buffer.append(model_input)
                if len(bn_buffer) > cfg.bn_window:
                    bn_buffer.pop(0)
                bn_bundle = bn_adapt(bn_bundle, bn_buffer, cfg.bn_momentum)
            model_now = bn_bundle
            t_align = time.perf_counter() - tic

            # transform: build branch inputs
            tic = time.perf_counter()
            inputs = branch_inputs(aligned, cfg, trial_index=t_idx)
            t_transform = time.perf_counter() - tic

            # forward: feature extractor on every branch input
            tic = time.perf_counter()
            if qm is not None:
                base = np.stack([features_q(qm, bt) for bt in inputs])
            else:
                base = features_batch(model_now, np.stack([bt.data for bt in inputs]))
            t_forward = time.perf_counter() - tic

            # mask modes expand the single base feature into K masked branches
            tic = time.perf_counter()
            if cfg.uses_masks:
                if masks is None:
                    masks = build_masks(cfg.k_masks, base.shape[1],
                                        contiguous=cfg.mask_contiguous)
                feats = np.stack([apply_mask(base[0], m) for m in masks])
            else:
                feats = base
            t_transform += time.perf_counter() - tic

            tic = time.perf_counter()
            if qm is not None:
                outputs = np.stack([np.atleast_1d(head_q(qm, f)) for f in feats])
            else:
                outputs = head_batch(model_now, feats)
            t_forward += time.perf_counter() - tic

            tic = time.perf_counter()
            scores, weights = _branch_weights(cfg, ranking, feats)
            t_rank = time.perf_counter() - tic

            tic = time.perf_counter()
            fused = None
            if cfg.task == CLASSIFICATION:
                ps = PredictionSet(weights=weights, tau=tau, logits=outputs)
                pred, fused_vec = classify(ps)
                fused = fused_vec.tolist()
                prediction: float = int(pred)
            else:
                scalars = outputs[:, 0]
                if cfg.mode in _UNIFORM_MODES or cfg.force_uniform_weights or cfg.mode == MODE_BASELINE:
                    # unweighted aggregation: plain mean over all branches
                    prediction = float(scalars.mean())
                else:
                    ps = PredictionSet(weights=weights, tau=tau, scalars=scalars)
                    prediction = regress(ps, scores)
            t_aggregate = time.perf_counter() - tic

            losses = task_losses_from_outputs(outputs, label, cfg.task)
            rank_data.append((scores if cfg.needs_rank_head else None, losses))
            record = TrialRecord(
                index=t_idx,
                label=float(label),
                prediction=prediction,
                weights=weights.tolist(),
                scores=scores.tolist(),
                branch_losses=losses.tolist(),
                latency={
                    "align": t_align,
                    "transform": t_transform,
                    "forward": t_forward,
                    "rank": t_rank,
                    "aggregate": t_aggregate,
                },
                fused=fused,
                branch_outputs=outputs.tolist() if cfg.record_branch_outputs else None,
            )
            records.append(record)
        except EngineError as exc:
            raise type(exc)(f"trial {t_idx}: {exc}") from exc

    preds = np.asarray([r.prediction for r in records])
    metrics = compute_metrics(preds, labels, cfg.task,
                              rank_data=rank_data, ndcg_k=cfg.ndcg_k)
    timing = {stage: float(np.mean([r.latency[stage] for r in records]) * 1e3)
              for stage in STAGES}
    timing["total"] = float(sum(timing[s] for s in STAGES))
    report = EvalReport(
        version=REPORT_VERSION,
        config=cfg.describe(),
        metrics=metrics,
        timing_ms=timing,
        records=records,
    )
    if cfg.report_path or cfg.csv_path:
        report.write(cfg.report_path, cfg.csv_path)
    return report
