"""Command-line entry points.

Subcommands: ``run`` (stream evaluation), ``theory-check`` (randomized
verification sweeps), ``gen-data`` (synthetic dataset), ``train-rank``
(fit mapping + ranking heads on a trained backbone), ``quantize``
(int8 conversion). Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import yaml

from . import __version__
from .container import write_container_file
from .datagen import SynthSpec, gen_synthetic_dataset, read_stream_dir, write_dataset
from .errors import ConfigError, DataError, EngineError, NumericalError
from .harness import RankFitConfig, StreamConfig, load_rank_head, run_stream
from .model import load_model_file
from .quant import quantize
from .rank import RankTrainConfig, rank_head_sections
from .theory import sweep_report
from .transforms import TransformSpec, IDENTITY, apply_transform

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _cmd_run(args) -> int:
    cfg = StreamConfig.from_yaml(args.config)
    report = run_stream(cfg)
    print(json.dumps({"metrics": report.metrics, "timing_ms": report.timing_ms},
                     indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_theory_check(args) -> int:
    report = sweep_report(n_sweeps=args.sweeps, seed=args.seed)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    failures = report["hetero_bound_violations"] + report["homo_bound_violations"] \
        + report["condition_counterexamples"]
    return EXIT_OK if failures == 0 else EXIT_NUMERICAL


def _cmd_gen_data(args) -> int:
    with open(args.spec) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"dataset spec {args.spec} must be a key/value mapping")
    spec = SynthSpec.from_dict(raw)
    dataset = gen_synthetic_dataset(spec, seed=args.seed)
    write_dataset(dataset, args.out)
    print(f"wrote {spec.n_subjects} subjects x {spec.trials_per_subject} trials to {args.out}")
    return EXIT_OK


def _cmd_train_rank(args) -> int:
    with open(args.config) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"config {args.config} must be a key/value mapping")
    try:
        model_path = raw.pop("model")
        data_dirs = raw.pop("train_streams")
        out_path = raw.pop("out")
    except KeyError as exc:
        raise ConfigError(f"train-rank config needs key {exc}") from exc
    fit_raw = raw.pop("fit", {}) or {}
    stream_cfg = StreamConfig.from_dict({"model": model_path, **raw})
    bundle = load_model_file(model_path)
    trials = []
    labels = []
    for d in data_dirs if isinstance(data_dirs, list) else [data_dirs]:
        t, y, _ = read_stream_dir(d)
        trials.extend(t)
        labels.extend(y.tolist())
    fit = RankFitConfig(
        synthetic_samples=int(fit_raw.get("synthetic_samples", 8000)),
        rank_input=fit_raw.get("rank_input", "weights"),
        variant=fit_raw.get("variant", "full"),
        mapping=RankTrainConfig(**(fit_raw.get("mapping") or {})),
        ranking=RankTrainConfig(**(fit_raw.get("ranking") or {})),
    )
    from .harness import fit_rank_head

    mapping, ranking = fit_rank_head(bundle, trials, labels, stream_cfg, fit)
    sections, tensors = rank_head_sections(mapping, ranking)
    write_container_file(out_path, sections, tensors, {"tool": "train-rank"})
    print(f"wrote rank head to {out_path}")
    return EXIT_OK


def _cmd_quantize(args) -> int:
    bundle = load_model_file(args.model)
    calib_trials, _, _ = read_stream_dir(args.calib)
    calib_inputs = [apply_transform(t, TransformSpec(IDENTITY)) for t in calib_trials]
    qm = quantize(bundle, calib_inputs,
                  percentile=args.percentile if args.percentile > 0 else None)
    n_int8 = sum(s.weight_q.size for s in qm.stages if s.weight_q is not None)
    print(f"quantized {n_int8} weights to int8; "
          f"input scale {qm.input_q.scale:.6g}, zero point {qm.input_q.zero_point}")
    if args.out:
        _write_quant_summary(qm, args.out)
        print(f"wrote quantization summary to {args.out}")
    return EXIT_OK


def _write_quant_summary(qm, path) -> None:
    stages = []
    for s in qm.stages:
        entry = {"kind": s.kind}
        if s.weight_q is not None:
            entry["weight_scale"] = s.weight_scale
            entry["weight_elems"] = int(s.weight_q.size)
        if s.out_q is not None:
            entry["out_scale"] = s.out_q.scale
            entry["out_zero_point"] = s.out_q.zero_point
        stages.append(entry)
    with open(path, "w") as fh:
        json.dump({"input": {"scale": qm.input_q.scale, "zero_point": qm.input_q.zero_point},
                   "stages": stages}, fh, indent=1, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamtta",
        description="Forward-only test-time adaptation for streaming biosignal decoding",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the streaming evaluation loop")
    p_run.add_argument("--config", required=True, help="YAML stream configuration")
    p_run.set_defaults(func=_cmd_run)

    p_theory = sub.add_parser("theory-check", help="randomized verification sweeps")
    p_theory.add_argument("--sweeps", type=int, default=10000)
    p_theory.add_argument("--seed", type=int, default=0)
    p_theory.add_argument("--out", default=None, help="write the JSON report here")
    p_theory.set_defaults(func=_cmd_theory_check)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p_gen.add_argument("--spec", required=True, help="YAML dataset spec")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=_cmd_gen_data)

    p_rank = sub.add_parser("train-rank", help="fit mapping + ranking heads")
    p_rank.add_argument("--config", required=True, help="YAML train-rank configuration")
    p_rank.set_defaults(func=_cmd_train_rank)

    p_quant = sub.add_parser("quantize", help="post-training static quantization")
    p_quant.add_argument("--model", required=True, help="weight container")
    p_quant.add_argument("--calib", required=True, help="calibration stream directory")
    p_quant.add_argument("--percentile", type=float, default=0.0,
                         help="activation clipping percentile (0 = pure min/max)")
    p_quant.add_argument("--out", default=None, help="write a JSON summary here")
    p_quant.set_defaults(func=_cmd_quantize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
