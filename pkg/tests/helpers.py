"""Shared fixtures: small networks and dataset-fitted benchmark models."""

import numpy as np

from streamtta.alignment import batch_ea_state, ea_align
from streamtta.model import (
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
    bn_adapt,
    features_batch,
    validate_bundle,
)
from streamtta.transforms import IDENTITY, Trial, TransformSpec, apply_transform


def neutral_bn(channels, eps=1e-5):
    return Layer(BATCHNORM, {"eps": eps}, {
        "gamma": np.ones(channels),
        "beta": np.zeros(channels),
        "running_mean": np.zeros(channels),
        "running_var": np.ones(channels),
    })


def tiny_bundle(channels=4, samples=32, rate=16.0, classes=2, seed=0,
                with_bias=True, with_bn=True, head=CLASSIFIER):
    """Small random network exercising every layer kind."""
    rng = np.random.default_rng(seed)
    f1, mult, f2 = 3, 2, 6
    kernel = 5

    def maybe_bias(n):
        return {"bias": rng.standard_normal(n) * 0.1} if with_bias else {}

    layers = [
        Layer(CONV_TEMPORAL, {"out_channels": f1, "kernel": kernel},
              {"weight": rng.standard_normal((f1, 1, 1, kernel)) * 0.5, **maybe_bias(f1)}),
    ]
    if with_bn:
        bn1 = neutral_bn(f1)
        bn1.tensors["running_mean"] = rng.standard_normal(f1) * 0.1
        bn1.tensors["running_var"] = rng.uniform(0.5, 1.5, f1)
        layers.append(bn1)
    layers.append(Layer(DEPTHWISE, {"multiplier": mult, "kernel": [channels, 1]},
                        {"weight": rng.standard_normal((f1, mult, channels, 1)) * 0.5}))
    if with_bn:
        layers.append(neutral_bn(f1 * mult))
    layers += [
        Layer(ELU),
        Layer(AVGPOOL, {"pool": [1, 2]}),
        Layer(SEPARABLE, {"out_channels": f2, "kernel": 4},
              {"depthwise": rng.standard_normal((f1 * mult, 1, 1, 4)) * 0.5,
               "pointwise": rng.standard_normal((f2, f1 * mult, 1, 1)) * 0.5,
               **maybe_bias(f2)}),
    ]
    if with_bn:
        layers.append(neutral_bn(f2))
    layers += [
        Layer(ELU),
        Layer(AVGPOOL, {"pool": [1, 2]}),
        Layer(FLATTEN),
    ]
    feature_dim = f2 * (samples // 4)
    out_dim = classes if head == CLASSIFIER else 1
    layers.append(Layer(DENSE, {"out_features": out_dim},
                        {"weight": rng.standard_normal((out_dim, feature_dim)) * 0.2,
                         **maybe_bias(out_dim)}))
    bundle = ModelBundle(
        layers=layers,
        in_channels=channels,
        in_samples=samples,
        rate_hz=rate,
        head_kind=head,
        feature_dim=feature_dim,
        num_classes=classes if head == CLASSIFIER else 0,
    )
    return validate_bundle(bundle)


def random_trials(n, channels=4, samples=32, rate=16.0, seed=0):
    rng = np.random.default_rng(seed)
    return [Trial(rng.standard_normal((channels, samples)), rate) for _ in range(n)]


# --- dataset-fitted benchmark backbone ------------------------------------------


def _quadrature_filters(freqs_hz, rate_hz, kernel):
    """Windowed sine/cosine pairs, one pair per frequency."""
    t = np.arange(kernel) / rate_hz
    window = np.hanning(kernel)
    filters = []
    for f in freqs_hz:
        for phase_fn in (np.cos, np.sin):
            w = phase_fn(2 * np.pi * f * t) * window
            filters.append(w / np.linalg.norm(w))
    return np.stack(filters)


def build_benchmark_model(dataset, pool1=4, pool2=8, kernel_s=0.5, ridge=1e-3, align=True):
    """Fit a decoder on a synthetic dataset without gradient descent.

    Temporal filters are quadrature pairs at the generator's class
    frequencies; spatial filters are the whitened class patterns pooled over
    source subjects; batch-norm statistics are calibrated on the source data;
    the dense head is a ridge least-squares fit on pooled aligned features.
    With ``align=False`` the model is fit on raw (unaligned) source data, the
    protocol used by the no-adaptation baseline.
    Returns (bundle, per-subject-aligned training trials, training labels).
    """
    spec = dataset.spec
    rate = spec.rate_hz
    kernel = int(round(kernel_s * rate))
    if spec.task == "classification":
        freqs = spec.class_freqs_hz
    else:
        freqs = (spec.target_freq_hz,)
    temporal = _quadrature_filters(freqs, rate, kernel)
    f1 = temporal.shape[0]

    # align each source subject by its own mean covariance, as at training time
    aligned_trials = []
    labels = []
    spatial_acc = []
    for s, subject in enumerate(dataset.subjects):
        if align:
            state = batch_ea_state(subject.trials)
            for t in subject.trials:
                aligned_trials.append(ea_align(state, t))
            spatial_acc.append(state.whitener @ dataset.mixings[s] @ dataset.patterns.T)
        else:
            aligned_trials.extend(subject.trials)
            spatial_acc.append(dataset.mixings[s] @ dataset.patterns.T)
        labels.extend(np.asarray(subject.labels).tolist())
    labels = np.asarray(labels)

    # pooled whitened class patterns as spatial filters
    pooled = np.mean(spatial_acc, axis=0)  # (channels, n_patterns)
    pooled /= np.linalg.norm(pooled, axis=0, keepdims=True)
    n_pat = pooled.shape[1]
    channels = spec.channels
    depth = np.zeros((f1, n_pat, channels, 1))
    for i in range(f1):
        for j in range(n_pat):
            depth[i, j, :, 0] = pooled[:, j]

    c2 = f1 * n_pat
    samples = int(round(rate * (spec.trial_seconds - 1.0)))
    smooth_k = 16
    layers = [
        Layer(CONV_TEMPORAL, {"out_channels": f1, "kernel": kernel},
              {"weight": temporal[:, None, None, :]}),
        neutral_bn(f1),
        Layer(DEPTHWISE, {"multiplier": n_pat, "kernel": [channels, 1]},
              {"weight": depth}),
        neutral_bn(c2),
        Layer(ELU),
        Layer(AVGPOOL, {"pool": [1, pool1]}),
        Layer(SEPARABLE, {"out_channels": c2, "kernel": smooth_k},
              {"depthwise": np.full((c2, 1, 1, smooth_k), 1.0 / smooth_k),
               "pointwise": np.eye(c2)[:, :, None, None]}),
        neutral_bn(c2),
        Layer(ELU),
        Layer(AVGPOOL, {"pool": [1, pool2]}),
        Layer(FLATTEN),
    ]
    feature_dim = c2 * (samples // pool1 // pool2)
    out_dim = dataset.spec.n_classes if spec.task == "classification" else 1
    layers.append(Layer(DENSE, {"out_features": out_dim},
                        {"weight": np.zeros((out_dim, feature_dim)), "bias": np.zeros(out_dim)}))
    bundle = ModelBundle(
        layers=layers,
        in_channels=channels,
        in_samples=samples,
        rate_hz=rate,
        head_kind=CLASSIFIER if spec.task == "classification" else REGRESSOR,
        feature_dim=feature_dim,
        num_classes=out_dim if spec.task == "classification" else 0,
    )
    validate_bundle(bundle)

    # calibrate batch-norm running statistics on the aligned source data
    inputs = [apply_transform(t, TransformSpec(IDENTITY)) for t in aligned_trials]
    bundle = bn_adapt(bundle, inputs, momentum=1.0)

    # closed-form ridge fit of the dense head on pooled aligned features
    feats = features_batch(bundle, np.stack([t.data for t in inputs]))
    if spec.task == "classification":
        targets = -np.ones((len(labels), out_dim))
        targets[np.arange(len(labels)), labels.astype(int)] = 1.0
    else:
        targets = labels[:, None].astype(float)
    gram = feats.T @ feats + ridge * len(labels) * np.eye(feature_dim)
    w = np.linalg.solve(gram, feats.T @ targets)
    dense = bundle.layers[-1]
    dense.tensors["weight"] = w.T
    dense.tensors["bias"] = targets.mean(axis=0) - feats.mean(axis=0) @ w
    return validate_bundle(bundle), aligned_trials, labels
