"""Post-training static quantization: int8 twin of the float model.

Batch-norm layers are folded into the preceding convolution, weights get
per-tensor symmetric int8 scales, and activations get affine int8 ranges
calibrated on representative trials. The integer forward path accumulates
in wide integers and requantizes between layers; ELU runs through a 256-entry
lookup table. The final dense layer dequantizes to float logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateInputError, DimensionError
from .model import (
    AVGPOOL,
    BATCHNORM,
    CLASSIFIER,
    CONV_TEMPORAL,
    DENSE,
    DEPTHWISE,
    ELU,
    FLATTEN,
    REGRESSOR,
    SEPARABLE,
    Layer,
    ModelBundle,
    _apply_layer,
    _check_input,
    _same_pad,
)
from .transforms import Trial

QMIN, QMAX = -128, 127


@dataclass
class QParams:
    """Affine int8 quantization parameters for one tensor."""

    scale: float
    zero_point: int

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = np.rint(x / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int64)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (q.astype(np.float64) - self.zero_point) * self.scale


@dataclass
class QStage:
    """One integer-path stage: op kind, quantized tensors, and output qparams."""

    kind: str
    params: dict = field(default_factory=dict)
    weight_q: np.ndarray | None = None
    weight_scale: float = 1.0
    bias_q: np.ndarray | None = None
    out_q: QParams | None = None
    lut: np.ndarray | None = None


@dataclass
class QuantModel:
    stages: list
    input_q: QParams
    in_channels: int
    in_samples: int
    rate_hz: float
    head_kind: str
    feature_dim: int
    num_classes: int
    feature_stage: int  # index of the stage that emits the flattened features


def _affine_qparams(lo: float, hi: float) -> QParams:
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    if hi - lo < 1e-12:
        return QParams(scale=1.0, zero_point=0)
    scale = (hi - lo) / (QMAX - QMIN)
    zero_point = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return QParams(scale=scale, zero_point=zero_point)


def _symmetric_weight_scale(w: np.ndarray) -> float:
    peak = float(np.abs(w).max())
    return peak / QMAX if peak > 0 else 1.0


def quantize_weight(w: np.ndarray) -> tuple[np.ndarray, float]:
    scale = _symmetric_weight_scale(w)
    q = np.clip(np.rint(w / scale), -QMAX, QMAX).astype(np.int64)
    return q, scale


def fold_batchnorms(bundle: ModelBundle) -> ModelBundle:
    """Fold every batch-norm into the preceding convolution; returns a new bundle."""
    out = bundle.copy()
    layers = out.layers
    folded: list[Layer] = []
    for layer in layers:
        if layer.kind != BATCHNORM:
            folded.append(layer)
            continue
        if not folded:
            raise ContractError("batchnorm with no preceding layer cannot be folded")
        prev = folded[-1]
        eps = layer.params.get("eps", 1e-5)
        scale = layer.tensors["gamma"] / np.sqrt(layer.tensors["running_var"] + eps)
        shift = layer.tensors["beta"] - layer.tensors["running_mean"] * scale
        if prev.kind == CONV_TEMPORAL:
            prev.tensors["weight"] = prev.tensors["weight"] * scale[:, None, None, None]
        elif prev.kind == DEPTHWISE:
            w = prev.tensors["weight"]
            c, m = w.shape[0], w.shape[1]
            prev.tensors["weight"] = w * scale.reshape(c, m)[:, :, None, None]
        elif prev.kind == SEPARABLE:
            prev.tensors["pointwise"] = prev.tensors["pointwise"] * scale[:, None, None, None]
        else:
            raise ContractError(f"cannot fold batchnorm into layer kind {prev.kind!r}")
        bias = prev.tensors.get("bias")
        prev.tensors["bias"] = shift if bias is None else bias * scale + shift
    out.layers = folded
    return out


def _calibration_ranges(values: np.ndarray, percentile: float | None) -> tuple[float, float]:
    flat = values.ravel()
    if percentile is None:
        return float(flat.min()), float(flat.max())
    lo = float(np.percentile(flat, 100.0 - percentile))
    hi = float(np.percentile(flat, percentile))
    return lo, hi


def quantize(bundle: ModelBundle, calib: list[Trial], percentile: float | None = None,
             feature_headroom: float = 1.0) -> QuantModel:
    """Quantize a float bundle using calibration trials for activation ranges.

    `percentile` (e.g. 99.9) clips activation ranges; None keeps pure min/max.
    `feature_headroom` widens the flattened-feature range so rescaled masked
    features stay representable.
    """
    if not calib:
        raise DegenerateInputError("calibration set must be non-empty")
    folded = fold_batchnorms(bundle)
    x = np.stack([t.data for t in calib]).astype(np.float64)
    _check_input(folded, x)

    input_q = _affine_qparams(*_calibration_ranges(x, percentile))
    stages: list[QStage] = []
    feature_stage = -1
    act = x[:, None, :, :]
    for layer in folded.layers:
        out = _apply_layer(act, layer)
        if layer.kind in (CONV_TEMPORAL, DEPTHWISE):
            wq, ws = quantize_weight(layer.tensors["weight"])
            stage = QStage(layer.kind, dict(layer.params), weight_q=wq, weight_scale=ws)
            if layer.tensors.get("bias") is not None:
                stage.params["has_bias"] = True
                stage.params["bias_float"] = layer.tensors["bias"]
            stage.out_q = _affine_qparams(*_calibration_ranges(out, percentile))
        elif layer.kind == SEPARABLE:
            # split into two integer stages: depthwise (same padding) then pointwise
            stage_dw = QStage("separable_depthwise", {"kernel": layer.tensors["depthwise"].shape[3]})
            stage_dw.weight_q, stage_dw.weight_scale = quantize_weight(layer.tensors["depthwise"])
            kernel = layer.tensors["depthwise"].shape[3]
            left, right = _same_pad(act.shape[3], kernel)
            xp = np.pad(act, ((0, 0), (0, 0), (0, 0), (left, right)))
            win = sliding_window_view(xp, kernel, axis=3)
            mid = np.einsum("bchwl,cl->bchw", win, layer.tensors["depthwise"][:, 0, 0, :], optimize=True)
            stage_dw.out_q = _affine_qparams(*_calibration_ranges(mid, percentile))
            stages.append(stage_dw)
            stage = QStage("separable_pointwise", {})
            stage.weight_q, stage.weight_scale = quantize_weight(layer.tensors["pointwise"])
            if layer.tensors.get("bias") is not None:
                stage.params["has_bias"] = True
                stage.params["bias_float"] = layer.tensors["bias"]
            stage.out_q = _affine_qparams(*_calibration_ranges(out, percentile))
        elif layer.kind == ELU:
            stage = QStage(ELU)
            stage.out_q = _affine_qparams(*_calibration_ranges(out, percentile))
        elif layer.kind == AVGPOOL:
            stage = QStage(AVGPOOL, dict(layer.params))
            stage.out_q = _affine_qparams(*_calibration_ranges(out, percentile))
        elif layer.kind == FLATTEN:
            lo, hi = _calibration_ranges(out, percentile)
            stage = QStage(FLATTEN)
            stage.out_q = _affine_qparams(lo * feature_headroom, hi * feature_headroom)
            feature_stage = len(stages)
        elif layer.kind == DENSE:
            stage = QStage(DENSE, dict(layer.params))
            stage.weight_q, stage.weight_scale = quantize_weight(layer.tensors["weight"])
            if layer.tensors.get("bias") is not None:
                stage.params["has_bias"] = True
                stage.params["bias_float"] = layer.tensors["bias"]
            stage.out_q = None  # final stage dequantizes
        else:
            raise ContractError(f"cannot quantize layer kind {layer.kind!r}")
        stages.append(stage)
        act = out

    qm = QuantModel(
        stages=stages,
        input_q=input_q,
        in_channels=bundle.in_channels,
        in_samples=bundle.in_samples,
        rate_hz=bundle.rate_hz,
        head_kind=bundle.head_kind,
        feature_dim=bundle.feature_dim,
        num_classes=bundle.num_classes,
        feature_stage=feature_stage,
    )
    _bake_biases_and_luts(qm)
    return qm


def _bake_biases_and_luts(qm: QuantModel) -> None:
    """Precompute integer biases (at s_in * s_w) and ELU lookup tables."""
    in_q = qm.input_q
    for stage in qm.stages:
        if stage.kind in (CONV_TEMPORAL, DEPTHWISE, "separable_depthwise",
                          "separable_pointwise", DENSE):
            if stage.params.get("has_bias"):
                bias = stage.params.pop("bias_float")
                stage.bias_q = np.rint(bias / (in_q.scale * stage.weight_scale)).astype(np.int64)
            stage.params.pop("bias_float", None)
        elif stage.kind == ELU:
            values = np.arange(QMIN, QMAX + 1, dtype=np.float64)
            x = (values - in_q.zero_point) * in_q.scale
            y = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
            stage.lut = stage.out_q.quantize(y)
        if stage.out_q is not None:
            in_q = stage.out_q


def _requant(acc: np.ndarray, multiplier: float, out_q: QParams) -> np.ndarray:
    q = np.rint(acc.astype(np.float64) * multiplier) + out_q.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int64)


def _int_conv_temporal(q: np.ndarray, zp: int, wq: np.ndarray) -> np.ndarray:
    kernel = wq.shape[3]
    left, right = _same_pad(q.shape[3], kernel)
    centered = q - zp
    xp = np.pad(centered, ((0, 0), (0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, kernel, axis=3)
    return np.einsum("bchwl,fcl->bfhw", win, wq[:, :, 0, :], optimize=True)


def _int_depthwise(q: np.ndarray, zp: int, wq: np.ndarray) -> np.ndarray:
    kh, kw = wq.shape[2], wq.shape[3]
    centered = q - zp
    win = sliding_window_view(centered, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwkl,cmkl->bcmhw", win, wq, optimize=True)
    b, c, m, h, w = out.shape
    return out.reshape(b, c * m, h, w)


def _int_separable_depthwise(q: np.ndarray, zp: int, wq: np.ndarray) -> np.ndarray:
    kernel = wq.shape[3]
    left, right = _same_pad(q.shape[3], kernel)
    centered = q - zp
    xp = np.pad(centered, ((0, 0), (0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, kernel, axis=3)
    return np.einsum("bchwl,cl->bchw", win, wq[:, 0, 0, :], optimize=True)


def _int_pointwise(q: np.ndarray, zp: int, wq: np.ndarray) -> np.ndarray:
    centered = q - zp
    return np.einsum("bchw,fc->bfhw", centered, wq[:, :, 0, 0], optimize=True)


def _forward_q_stages(qm: QuantModel, data: np.ndarray, stop_after: int | None = None):
    """Run the integer pipeline; returns (tensor, qparams-or-None after last stage)."""
    if data.shape[-2:] != (qm.in_channels, qm.in_samples):
        raise DimensionError(
            f"input shape {data.shape[-2:]} does not match model "
            f"({qm.in_channels}, {qm.in_samples})"
        )
    q = qm.input_q.quantize(np.asarray(data, dtype=np.float64))[:, None, :, :]
    in_q = qm.input_q
    for idx, stage in enumerate(qm.stages):
        if stage.kind in (CONV_TEMPORAL, DEPTHWISE, "separable_depthwise", "separable_pointwise"):
            if stage.kind == CONV_TEMPORAL:
                acc = _int_conv_temporal(q, in_q.zero_point, stage.weight_q)
            elif stage.kind == DEPTHWISE:
                acc = _int_depthwise(q, in_q.zero_point, stage.weight_q)
            elif stage.kind == "separable_depthwise":
                acc = _int_separable_depthwise(q, in_q.zero_point, stage.weight_q)
            else:
                acc = _int_pointwise(q, in_q.zero_point, stage.weight_q)
            if stage.bias_q is not None:
                acc = acc + stage.bias_q[None, :, None, None]
            mult = in_q.scale * stage.weight_scale / stage.out_q.scale
            q = _requant(acc, mult, stage.out_q)
        elif stage.kind == ELU:
            q = stage.lut[q - QMIN]
        elif stage.kind == AVGPOOL:
            ph, pw = stage.params["pool"]
            b, c, h, w = q.shape
            h2, w2 = h // ph, w // pw
            acc = (q - in_q.zero_point)[:, :, : h2 * ph, : w2 * pw]
            acc = acc.reshape(b, c, h2, ph, w2, pw).sum(axis=(3, 5))
            mult = in_q.scale / (ph * pw * stage.out_q.scale)
            q = _requant(acc, mult, stage.out_q)
        elif stage.kind == FLATTEN:
            centered = q - in_q.zero_point
            q = _requant(centered.reshape(q.shape[0], -1),
                         in_q.scale / stage.out_q.scale, stage.out_q)
        elif stage.kind == DENSE:
            acc = (q - in_q.zero_point) @ stage.weight_q.T
            if stage.bias_q is not None:
                acc = acc + stage.bias_q
            return acc.astype(np.float64) * (in_q.scale * stage.weight_scale), None
        else:
            raise ContractError(f"unknown stage kind {stage.kind!r}")
        if stage.out_q is not None:
            in_q = stage.out_q
        if stop_after is not None and idx == stop_after:
            return q, in_q
    return q, in_q


def forward_q_batch(qm: QuantModel, data: np.ndarray) -> np.ndarray:
    out, _ = _forward_q_stages(qm, np.asarray(data, dtype=np.float64))
    return out


def forward_q(qm: QuantModel, trial: Trial):
    """Integer-path prediction: logits for classifiers, scalar for regressors."""
    out = forward_q_batch(qm, trial.data[None])[0]
    if qm.head_kind == REGRESSOR:
        return float(out[0])
    return out


def features_q(qm: QuantModel, trial: Trial) -> np.ndarray:
    """Dequantized feature vector from the integer path (after the flatten stage)."""
    q, in_q = _forward_q_stages(qm, trial.data[None], stop_after=qm.feature_stage)
    return in_q.dequantize(q[0])


def head_q(qm: QuantModel, feats: np.ndarray):
    """Integer-path head on float features (requantized at the feature scale)."""
    f = np.asarray(feats, dtype=np.float64)
    if f.shape[-1] != qm.feature_dim:
        raise DimensionError(f"feature dim {f.shape[-1]} != model feature dim {qm.feature_dim}")
    in_q = qm.stages[qm.feature_stage].out_q
    q = in_q.quantize(f)
    for stage in qm.stages[qm.feature_stage + 1 :]:
        if stage.kind != DENSE:
            raise ContractError("head path supports dense layers only")
        acc = (q - in_q.zero_point) @ stage.weight_q.T
        if stage.bias_q is not None:
            acc = acc + stage.bias_q
        out = acc.astype(np.float64) * (in_q.scale * stage.weight_scale)
        if qm.head_kind == REGRESSOR:
            return float(out[0])
        return out
    raise ContractError("quant model has no dense head stage")
