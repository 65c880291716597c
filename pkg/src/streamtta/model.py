"""Forward-only execution of the pretrained convolutional decoder.

Supports the small layer family the deployed networks use: a temporal
convolution, a depthwise (spatial) convolution, a separable convolution,
batch normalization, ELU, average pooling, flatten, and dense heads. The
layer list up to and including the single flatten is the feature extractor;
everything after it is the task head.

Temporal convolutions use same-padding with ``pad_left = (L-1)//2`` and
``pad_right = L//2``; depthwise convolutions are valid (no padding). Inputs
enter as (batch, 1, channels, samples).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .container import read_container, read_container_file, write_container
from .errors import (
    ContractError,
    DataError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)
from .transforms import Trial

CONV_TEMPORAL = "conv_temporal"
DEPTHWISE = "depthwise"
SEPARABLE = "separable"
BATCHNORM = "batchnorm"
ELU = "elu"
AVGPOOL = "avgpool"
FLATTEN = "flatten"
DENSE = "dense"

LAYER_KINDS = (CONV_TEMPORAL, DEPTHWISE, SEPARABLE, BATCHNORM, ELU, AVGPOOL, FLATTEN, DENSE)

CLASSIFIER = "classifier"
REGRESSOR = "regressor"


@dataclass
class Layer:
    kind: str
    params: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


@dataclass
class ModelBundle:
    """Frozen network: ordered layers, input geometry, head kind."""

    layers: list
    in_channels: int
    in_samples: int
    rate_hz: float
    head_kind: str
    feature_dim: int
    num_classes: int = 0

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    @property
    def flatten_index(self) -> int:
        for i, layer in enumerate(self.layers):
            if layer.kind == FLATTEN:
                return i
        raise ContractError("bundle has no flatten layer")


def _same_pad(width: int, kernel: int) -> tuple[int, int]:
    return (kernel - 1) // 2, kernel // 2


def _conv_temporal(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    # x (B, Cin, H, W), weight (F, Cin, 1, L) -> (B, F, H, W), same padding along W
    kernel = weight.shape[3]
    left, right = _same_pad(x.shape[3], kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(xp, kernel, axis=3)  # (B, Cin, H, W, L)
    out = np.einsum("bchwl,fcl->bfhw", windows, weight[:, :, 0, :], optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _depthwise(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # x (B, C, H, W), weight (C, M, KH, KW) -> (B, C*M, H-KH+1, W-KW+1), valid
    kh, kw = weight.shape[2], weight.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (B, C, H', W', KH, KW)
    out = np.einsum("bchwkl,cmkl->bcmhw", windows, weight, optimize=True)
    b, c, m, h, w = out.shape
    return out.reshape(b, c * m, h, w)


def _separable(x: np.ndarray, depthwise: np.ndarray, pointwise: np.ndarray,
               bias: np.ndarray | None) -> np.ndarray:
    # depthwise (C, 1, 1, L) same padding along W, then pointwise (F, C, 1, 1)
    kernel = depthwise.shape[3]
    left, right = _same_pad(x.shape[3], kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(xp, kernel, axis=3)
    mid = np.einsum("bchwl,cl->bchw", windows, depthwise[:, 0, 0, :], optimize=True)
    out = np.einsum("bchw,fc->bfhw", mid, pointwise[:, :, 0, 0], optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _batchnorm(x: np.ndarray, layer: Layer) -> np.ndarray:
    t = layer.tensors
    eps = layer.params.get("eps", 1e-5)
    scale = t["gamma"] / np.sqrt(t["running_var"] + eps)
    shift = t["beta"] - t["running_mean"] * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _avgpool(x: np.ndarray, pool: tuple[int, int]) -> np.ndarray:
    ph, pw = pool
    b, c, h, w = x.shape
    h2, w2 = h // ph, w // pw
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"pool {pool} too large for input {x.shape}")
    x = x[:, :, : h2 * ph, : w2 * pw]
    return x.reshape(b, c, h2, ph, w2, pw).mean(axis=(3, 5))


def _infer_shapes(bundle: ModelBundle) -> list[tuple]:
    """Shape-check the layer stack; returns the per-layer output shapes (C, H, W) / (d,)."""
    shape: tuple = (1, bundle.in_channels, bundle.in_samples)
    shapes = []
    flat_seen = 0
    for i, layer in enumerate(bundle.layers):
        c, h, w = shape if len(shape) == 3 else (None, None, None)
        if layer.kind == CONV_TEMPORAL:
            wgt = layer.tensors["weight"]
            if wgt.ndim != 4 or wgt.shape[1] != c or wgt.shape[2] != 1:
                raise DataError(f"layer {i}: conv_temporal weight shape {wgt.shape} invalid for input {shape}")
            declared = (layer.params.get("out_channels", wgt.shape[0]),
                        layer.params.get("kernel", wgt.shape[3]))
            if declared != (wgt.shape[0], wgt.shape[3]):
                raise DataError(f"layer {i}: weight shape {wgt.shape} disagrees with declared "
                                f"out_channels/kernel {declared}")
            shape = (wgt.shape[0], h, w)
        elif layer.kind == DEPTHWISE:
            wgt = layer.tensors["weight"]
            if wgt.ndim != 4 or wgt.shape[0] != c:
                raise DataError(f"layer {i}: depthwise weight shape {wgt.shape} invalid for input {shape}")
            kh, kw = wgt.shape[2], wgt.shape[3]
            declared_k = tuple(layer.params.get("kernel", (kh, kw)))
            if (layer.params.get("multiplier", wgt.shape[1]), declared_k) != (wgt.shape[1], (kh, kw)):
                raise DataError(f"layer {i}: depthwise weight shape {wgt.shape} disagrees with params")
            if kh > h or kw > w:
                raise DataError(f"layer {i}: depthwise kernel ({kh},{kw}) larger than input ({h},{w})")
            shape = (wgt.shape[0] * wgt.shape[1], h - kh + 1, w - kw + 1)
        elif layer.kind == SEPARABLE:
            dw, pw_ = layer.tensors["depthwise"], layer.tensors["pointwise"]
            if dw.shape[0] != c or dw.shape[1] != 1 or dw.shape[2] != 1:
                raise DataError(f"layer {i}: separable depthwise shape {dw.shape} invalid for input {shape}")
            if pw_.shape[1] != c or pw_.shape[2:] != (1, 1):
                raise DataError(f"layer {i}: separable pointwise shape {pw_.shape} invalid")
            declared = (layer.params.get("out_channels", pw_.shape[0]),
                        layer.params.get("kernel", dw.shape[3]))
            if declared != (pw_.shape[0], dw.shape[3]):
                raise DataError(f"layer {i}: separable shapes disagree with declared params {declared}")
            shape = (pw_.shape[0], h, w)
        elif layer.kind == BATCHNORM:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                if layer.tensors[name].shape != (c,):
                    raise DataError(f"layer {i}: batchnorm tensor {name} shape mismatch")
            if np.any(layer.tensors["running_var"] <= 0):
                raise DataError(f"layer {i}: batchnorm running variance must be positive")
        elif layer.kind == ELU:
            pass
        elif layer.kind == AVGPOOL:
            ph, pw2 = layer.params["pool"]
            if h // ph < 1 or w // pw2 < 1:
                raise DataError(f"layer {i}: pool {layer.params['pool']} too large for {shape}")
            shape = (c, h // ph, w // pw2)
        elif layer.kind == FLATTEN:
            flat_seen += 1
            shape = (c * h * w,)
        elif layer.kind == DENSE:
            wgt = layer.tensors["weight"]
            in_dim = shape[0] if len(shape) == 1 else int(np.prod(shape))
            if len(shape) != 1:
                raise DataError(f"layer {i}: dense requires flattened input, got {shape}")
            if wgt.ndim != 2 or wgt.shape[1] != in_dim:
                raise DataError(f"layer {i}: dense weight shape {wgt.shape} invalid for input dim {in_dim}")
            shape = (wgt.shape[0],)
        else:
            raise DataError(f"layer {i}: unknown kind {layer.kind!r}")
        shapes.append(shape)
    if flat_seen != 1:
        raise DataError(f"bundle must contain exactly one flatten layer, found {flat_seen}")
    return shapes


def validate_bundle(bundle: ModelBundle) -> ModelBundle:
    for i, layer in enumerate(bundle.layers):
        for name, arr in layer.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"layer {i}: tensor {name!r} contains non-finite weights")
    shapes = _infer_shapes(bundle)
    flat_dim = shapes[bundle.flatten_index][0]
    if flat_dim != bundle.feature_dim:
        raise DataError(f"feature_dim {bundle.feature_dim} != flatten output {flat_dim}")
    out_dim = shapes[-1][0]
    if bundle.head_kind == CLASSIFIER:
        if bundle.num_classes < 2 or out_dim != bundle.num_classes:
            raise DataError(f"classifier head emits {out_dim} logits, expected {bundle.num_classes}")
    elif bundle.head_kind == REGRESSOR:
        if out_dim != 1:
            raise DataError(f"regressor head emits {out_dim} outputs, expected 1")
    else:
        raise DataError(f"unknown head kind {bundle.head_kind!r}")
    return bundle


def _apply_layer(x: np.ndarray, layer: Layer) -> np.ndarray:
    if layer.kind == CONV_TEMPORAL:
        return _conv_temporal(x, layer.tensors["weight"], layer.tensors.get("bias"))
    if layer.kind == DEPTHWISE:
        return _depthwise(x, layer.tensors["weight"])
    if layer.kind == SEPARABLE:
        return _separable(x, layer.tensors["depthwise"], layer.tensors["pointwise"],
                          layer.tensors.get("bias"))
    if layer.kind == BATCHNORM:
        return _batchnorm(x, layer)
    if layer.kind == ELU:
        return _elu(x)
    if layer.kind == AVGPOOL:
        return _avgpool(x, tuple(layer.params["pool"]))
    if layer.kind == FLATTEN:
        return x.reshape(x.shape[0], -1)
    if layer.kind == DENSE:
        out = x @ layer.tensors["weight"].T
        if "bias" in layer.tensors:
            out = out + layer.tensors["bias"]
        return out
    raise ContractError(f"unknown layer kind {layer.kind!r}")


def _check_input(bundle: ModelBundle, data: np.ndarray) -> None:
    if data.shape[-2:] != (bundle.in_channels, bundle.in_samples):
        raise DimensionError(
            f"input shape {data.shape[-2:]} does not match model "
            f"({bundle.in_channels}, {bundle.in_samples})"
        )


def features_batch(bundle: ModelBundle, data: np.ndarray) -> np.ndarray:
    """Feature vectors for a (B, channels, samples) stack."""
    data = np.asarray(data, dtype=np.float64)
    _check_input(bundle, data)
    x = data[:, None, :, :]
    for layer in bundle.layers[: bundle.flatten_index + 1]:
        x = _apply_layer(x, layer)
    return x


def features(bundle: ModelBundle, trial: Trial) -> np.ndarray:
    """Deterministic forward pass of one trial through the feature extractor."""
    return features_batch(bundle, trial.data[None])[0]


def head_batch(bundle: ModelBundle, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[-1] != bundle.feature_dim:
        raise DimensionError(f"feature dim {feats.shape[-1]} != model feature dim {bundle.feature_dim}")
    x = feats
    for layer in bundle.layers[bundle.flatten_index + 1 :]:
        x = _apply_layer(x, layer)
    return x


def head(bundle: ModelBundle, feats: np.ndarray):
    """Task head on one feature vector: logit vector for classifiers, scalar for regressors."""
    out = head_batch(bundle, np.asarray(feats, dtype=np.float64)[None])[0]
    if bundle.head_kind == REGRESSOR:
        return float(out[0])
    return out


def predict_batch(bundle: ModelBundle, data: np.ndarray) -> np.ndarray:
    return head_batch(bundle, features_batch(bundle, data))


def bn_adapt(bundle: ModelBundle, batch: list[Trial], momentum: float) -> ModelBundle:
    """Move every batch-norm's running statistics toward the batch statistics.

    Uses train-mode propagation: each batch-norm layer normalizes the batch
    with its freshly blended statistics before the batch flows on. Learned
    affine parameters are untouched; a new bundle is returned.
    """
    if not batch:
        raise DegenerateInputError("bn_adapt needs a non-empty batch")
    if not (0.0 < momentum <= 1.0):
        raise ContractError("momentum must lie in (0, 1]")
    new = bundle.copy()
    x = np.stack([t.data for t in batch]).astype(np.float64)
    _check_input(new, x)
    x = x[:, None, :, :]
    for layer in new.layers:
        if layer.kind == BATCHNORM:
            batch_mean = x.mean(axis=(0, 2, 3))
            batch_var = x.var(axis=(0, 2, 3))
            t = layer.tensors
            t["running_mean"] = (1.0 - momentum) * t["running_mean"] + momentum * batch_mean
            t["running_var"] = (1.0 - momentum) * t["running_var"] + momentum * batch_var
            x = _batchnorm(x, layer)
        elif layer.kind == FLATTEN:
            break
        else:
            x = _apply_layer(x, layer)
    return new


# --- container serialization -------------------------------------------------

_TENSOR_NAMES = {
    CONV_TEMPORAL: ("weight", "bias"),
    DEPTHWISE: ("weight",),
    SEPARABLE: ("depthwise", "pointwise", "bias"),
    BATCHNORM: ("gamma", "beta", "running_mean", "running_var"),
    DENSE: ("weight", "bias"),
}


def bundle_to_section(bundle: ModelBundle, prefix: str = "backbone") -> tuple[dict, dict]:
    """Flatten a bundle into (section dict, named tensors) for the container writer."""
    tensors: dict[str, np.ndarray] = {}
    layer_entries = []
    for i, layer in enumerate(bundle.layers):
        entry = {"kind": layer.kind}
        entry.update(layer.params)
        refs = {}
        for name in _TENSOR_NAMES.get(layer.kind, ()):
            if name in layer.tensors and layer.tensors[name] is not None:
                ref = f"{prefix}/layer{i:02d}/{name}"
                tensors[ref] = np.asarray(layer.tensors[name], dtype=np.float64)
                refs[name] = ref
        if refs:
            entry["tensors"] = refs
        layer_entries.append(entry)
    section = {
        "input": {
            "channels": bundle.in_channels,
            "samples": bundle.in_samples,
            "rate_hz": bundle.rate_hz,
        },
        "head_kind": bundle.head_kind,
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
        "layers": layer_entries,
    }
    return section, tensors


def save_model(bundle: ModelBundle, meta: dict | None = None) -> bytes:
    section, tensors = bundle_to_section(bundle)
    return write_container({"backbone": section}, tensors, meta)


def bundle_from_section(section: dict, tensors: dict[str, np.ndarray]) -> ModelBundle:
    layers = []
    for i, entry in enumerate(section.get("layers", [])):
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise DataError(f"layer {i}: unknown kind {kind!r}")
        params = {k: v for k, v in entry.items() if k not in ("kind", "tensors")}
        layer_tensors = {}
        for name, ref in entry.get("tensors", {}).items():
            if ref not in tensors:
                raise DataError(f"layer {i}: missing tensor {ref!r}")
            layer_tensors[name] = np.asarray(tensors[ref], dtype=np.float64)
        layers.append(Layer(kind, params, layer_tensors))
    try:
        inp = section["input"]
        bundle = ModelBundle(
            layers=layers,
            in_channels=int(inp["channels"]),
            in_samples=int(inp["samples"]),
            rate_hz=float(inp["rate_hz"]),
            head_kind=section["head_kind"],
            feature_dim=int(section["feature_dim"]),
            num_classes=int(section.get("num_classes", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed backbone section: {exc}") from exc
    return validate_bundle(bundle)


def load_model(blob: bytes) -> ModelBundle:
    """Parse and fully validate a backbone from container bytes."""
    sections, tensors, _ = read_container(blob)
    if "backbone" not in sections:
        raise DataError("container has no backbone section")
    return bundle_from_section(sections["backbone"], tensors)


def load_model_file(path) -> ModelBundle:
    sections, tensors, _ = read_container_file(path)
    if "backbone" not in sections:
        raise DataError(f"{path} has no backbone section")
    return bundle_from_section(sections["backbone"], tensors)
