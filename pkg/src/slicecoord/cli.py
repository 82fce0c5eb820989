"""Command-line pipeline: data generation, training, scoring, calibration,
classification, anomaly screening, and gradient self-checks.

Config files are INI with sections [phantom], [sampler], [network],
[trainer]; command-line flags override file values. Every command writes
a fully resolved ``<output>.resolved.ini`` reproducibility record next
to its outputs. Exit codes: 0 success, 1 usage, 2 data error,
3 divergence.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import evaluate, losses, network, phantom, trainer
from .sampler import SamplerConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class CliDataError(Exception):
    """Input file or value problem; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config file handling


def _pair(text: str, cast, key: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise CliDataError(f"{key}: expected two comma-separated values, got {text!r}")
    return (cast(parts[0]), cast(parts[1]))


_PHANTOM_KEYS = {
    "image_size": lambda v: _pair(v, int, "image_size"),
    "slices_range": lambda v: _pair(v, int, "slices_range"),
    "coordinate_span": lambda v: _pair(v, float, "coordinate_span"),
    "spacing_jitter": float,
    "noise_sigma": float,
    "translate_max": float,
    "scale_range": lambda v: _pair(v, float, "scale_range"),
    "seed": int,
}
_SAMPLER_KEYS = {
    "g": int,
    "m": int,
    "seed": int,
    "max_interval": lambda v: None if v.strip() == "" else int(v),
}
_NETWORK_KEYS = {
    "input_size": lambda v: _pair(v, int, "input_size"),
    "stages": lambda v: tuple(network.StageSpec(int(c)) for c in v.split(",")),
    "embed_channels": int,
    "seed": int,
}
_TRAINER_KEYS = {
    "iterations": int,
    "learning_rate": float,
    "lr_schedule": lambda v: None if v.strip() == "" else
        (float(v.split(",")[0]), int(v.split(",")[1])),
    "momentum": float,
    "dist_weight": float,
    "seed": int,
    "checkpoint_period": lambda v: None if v.strip() == "" else int(v),
}
_SECTIONS = {
    "phantom": _PHANTOM_KEYS,
    "sampler": _SAMPLER_KEYS,
    "network": _NETWORK_KEYS,
    "trainer": _TRAINER_KEYS,
}


def read_config(path) -> dict[str, dict]:
    """Parse an INI run config, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise CliDataError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise CliDataError(f"{path}: {exc}") from exc
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise CliDataError(f"{path}: unknown section [{section}]")
        known = _SECTIONS[section]
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise CliDataError(f"{path}: unknown key '{key}' in [{section}]")
            try:
                out[section][key] = known[key](raw)
            except CliDataError as exc:
                raise CliDataError(f"{path}: [{section}] {exc}") from exc
            except (ValueError, IndexError) as exc:
                raise CliDataError(
                    f"{path}: bad value for '{key}' in [{section}]: {raw!r}") from exc
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, network.StageSpec):
        return str(value.out_channels)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved(path, sections: dict[str, dict]) -> None:
    """Reproducibility record: every effective setting, fixed order."""
    lines = []
    for section in sections:
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_fmt(value)}" for key, value in sections[section].items())
        lines.append("")
    Path(path).write_text("\n".join(lines))


def build_phantom_spec(file_cfg: dict, args) -> phantom.PhantomSpec:
    spec = phantom.PhantomSpec(**file_cfg.get("phantom", {}))
    for attr in ("noise_sigma", "translate_max", "spacing_jitter"):
        value = getattr(args, attr, None)
        if value is not None:
            spec = replace(spec, **{attr: value})
    for attr in ("image_size", "slices_range", "coordinate_span", "scale_range"):
        value = getattr(args, attr, None)
        if value is not None:
            spec = replace(spec, **{attr: _pair(value, int if attr in
                           ("image_size", "slices_range") else float, attr)})
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seed=args.seed)
    return spec


def build_train_config(file_cfg: dict, args) -> trainer.TrainConfig:
    sampler_cfg = SamplerConfig(**file_cfg.get("sampler", {}))
    net_cfg = network.NetworkConfig(**file_cfg.get("network", {}))
    train_cfg = trainer.TrainConfig(sampler=sampler_cfg, network=net_cfg,
                                    **file_cfg.get("trainer", {}))
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.momentum is not None:
        overrides["momentum"] = args.momentum
    if args.dist_weight is not None:
        overrides["dist_weight"] = args.dist_weight
    if args.checkpoint_period is not None:
        overrides["checkpoint_period"] = args.checkpoint_period
    if args.seed is not None:
        overrides["seed"] = args.seed
        sampler_cfg = replace(sampler_cfg, seed=args.seed)
    if args.g is not None:
        sampler_cfg = replace(sampler_cfg, g=args.g)
    if args.m is not None:
        sampler_cfg = replace(sampler_cfg, m=args.m)
    if args.max_interval is not None:
        sampler_cfg = replace(sampler_cfg, max_interval=args.max_interval)
    return replace(train_cfg, sampler=sampler_cfg, **overrides)


def _phantom_sections(spec: phantom.PhantomSpec, command: dict) -> dict:
    return {
        "phantom": {key: getattr(spec, key) for key in _PHANTOM_KEYS},
        "command": command,
    }


def _trainer_sections(cfg: trainer.TrainConfig, command: dict) -> dict:
    return {
        "sampler": {key: getattr(cfg.sampler, key) for key in _SAMPLER_KEYS},
        "network": {key: getattr(cfg.network, key) for key in _NETWORK_KEYS},
        "trainer": {key: getattr(cfg, key) for key in _TRAINER_KEYS},
        "command": command,
    }


# --- shared inference plumbing


def _load_model(path) -> network.ModelParams:
    path = Path(path)
    if not path.is_file():
        raise CliDataError(f"model checkpoint not found: {path}")
    return network.load_params(path)


def _load_data(path, with_latent: bool = False) -> phantom.Dataset:
    path = Path(path)
    if not path.is_dir():
        raise CliDataError(f"dataset directory not found: {path}")
    return phantom.load_dataset(path, with_latent=with_latent)


def _curves(params, dataset) -> list[evaluate.ScoreCurve]:
    return [evaluate.score_volume(params, dataset.volumes[rec.volume_id], rec.volume_id)
            for rec in dataset.records]


def _latent_labels(dataset, volume_id: str) -> np.ndarray:
    if dataset.latent is None or volume_id not in dataset.latent:
        raise CliDataError(f"no latent coordinates for volume {volume_id!r}")
    return evaluate.latent_bands(dataset.latent[volume_id])


# --- commands


def cmd_gen_data(args) -> int:
    file_cfg = read_config(args.config) if args.config else {}
    spec = build_phantom_spec(file_cfg, args)
    out = Path(args.out)
    manifest = phantom.generate_dataset(args.volumes, spec, args.anomaly_fraction,
                                        args.seed if args.seed is not None else spec.seed,
                                        out)
    write_resolved(out / "resolved.ini", _phantom_sections(spec, {
        "command": "gen-data", "volumes": args.volumes,
        "anomaly_fraction": args.anomaly_fraction,
        "seed": args.seed if args.seed is not None else spec.seed,
    }))
    n_anomalous = sum(1 for line in manifest.read_text().splitlines()
                      if line and not line.endswith(",none"))
    print(f"wrote {args.volumes} volumes ({n_anomalous} anomalous) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = read_config(args.config) if args.config else {}
    cfg = build_train_config(file_cfg, args)
    cfg = replace(cfg, out_dir=args.out)
    dataset = _load_data(args.data)
    params, log = trainer.train(dataset, cfg)
    write_resolved(Path(args.out) / "resolved.ini", _trainer_sections(cfg, {
        "command": "train", "data": str(args.data),
    }))
    last = log.records[-1]
    print(f"trained {cfg.iterations} iterations in {log.wall_clock:.1f}s; "
          f"final loss {last[3]:.4f} (order {last[1]:.4f}, dist {last[2]:.4f})")
    print(f"checkpoint: {log.checkpoint_path}")
    return EXIT_OK


def cmd_score(args) -> int:
    params = _load_model(args.model)
    dataset = _load_data(args.data)
    curves = _curves(params, dataset)
    evaluate.write_curves_csv(curves, args.out)
    write_resolved(f"{args.out}.resolved.ini", {"command": {
        "command": "score", "model": str(args.model), "data": str(args.data)}})
    rs = [c.pearson_r for c in curves]
    print(f"scored {len(curves)} volumes; median pearson r {np.median(rs):.5f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    params = _load_model(args.model)
    dataset = _load_data(args.data, with_latent=True)
    ids = [v.strip() for v in args.volumes.split(",") if v.strip()]
    if not ids:
        raise CliDataError("--volumes needs at least one volume id")
    missing = [v for v in ids if v not in dataset.volumes]
    if missing:
        raise CliDataError(f"calibration volume(s) not in dataset: {missing}")
    scores, labels = [], []
    for volume_id in ids:
        curve = evaluate.score_volume(params, dataset.volumes[volume_id], volume_id)
        scores.append(curve.scores)
        labels.append(_latent_labels(dataset, volume_id))
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    thresholds = evaluate.calibrate_thresholds(scores, labels)
    acc = evaluate.accuracy(evaluate.classify_slices(scores, thresholds), labels)
    Path(args.out).write_text(
        f"[thresholds]\nt1 = {repr(thresholds.t1)}\nt2 = {repr(thresholds.t2)}\n")
    write_resolved(f"{args.out}.resolved.ini", {"command": {
        "command": "calibrate", "model": str(args.model), "data": str(args.data),
        "volumes": ",".join(ids)}})
    print(f"thresholds t1={thresholds.t1:.6f} t2={thresholds.t2:.6f}; "
          f"calibration accuracy {acc:.4f}")
    return EXIT_OK


def read_thresholds(path) -> evaluate.Thresholds:
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise CliDataError(f"cannot read thresholds {path}: {exc}") from exc
    except configparser.Error as exc:
        raise CliDataError(f"{path}: {exc}") from exc
    if not parser.has_section("thresholds"):
        raise CliDataError(f"{path}: missing [thresholds] section")
    try:
        t1 = parser.getfloat("thresholds", "t1")
        t2 = parser.getfloat("thresholds", "t2")
    except (configparser.Error, ValueError) as exc:
        raise CliDataError(f"{path}: bad t1/t2 field: {exc}") from exc
    return evaluate.Thresholds(t1=t1, t2=t2)


def cmd_classify(args) -> int:
    params = _load_model(args.model)
    thresholds = read_thresholds(args.thresholds)
    have_latent = (Path(args.data) / phantom.SIDECAR_NAME).is_file()
    dataset = _load_data(args.data, with_latent=have_latent)
    lines = ["volume_id,slice_index,score,predicted" + (",truth" if have_latent else "")]
    correct = 0
    total = 0
    for rec in dataset.records:
        curve = evaluate.score_volume(params, dataset.volumes[rec.volume_id],
                                      rec.volume_id)
        predicted = evaluate.classify_slices(curve.scores, thresholds)
        truth = _latent_labels(dataset, rec.volume_id) if have_latent else None
        for i, score in enumerate(curve.scores):
            row = f"{rec.volume_id},{i},{repr(float(score))},{int(predicted[i])}"
            if truth is not None:
                row += f",{int(truth[i])}"
                correct += int(predicted[i] == truth[i])
                total += 1
            lines.append(row)
    Path(args.out).write_text("\n".join(lines) + "\n")
    write_resolved(f"{args.out}.resolved.ini", {"command": {
        "command": "classify", "model": str(args.model), "data": str(args.data),
        "thresholds": str(args.thresholds)}})
    if total:
        print(f"classified {total} slices; accuracy {correct / total:.4f}")
    else:
        print(f"classified {sum(r.n_slices for r in dataset.records)} slices")
    return EXIT_OK


def cmd_detect_anomaly(args) -> int:
    params = _load_model(args.model)
    dataset = _load_data(args.data)
    volumes = {rec.volume_id: dataset.volumes[rec.volume_id] for rec in dataset.records}
    reports = evaluate.detect_anomalies(params, volumes, threshold_r=args.r_threshold)
    evaluate.write_anomaly_csv(reports, args.out)
    write_resolved(f"{args.out}.resolved.ini", {"command": {
        "command": "detect-anomaly", "model": str(args.model), "data": str(args.data),
        "r_threshold": args.r_threshold, "fail_on_flag": args.fail_on_flag}})
    flagged = sum(rep.flagged for rep in reports)
    print(f"flagged {flagged} of {len(reports)} volumes at r < {args.r_threshold}")
    if flagged and args.fail_on_flag:
        return EXIT_DATA
    return EXIT_OK


def cmd_metrics(args) -> int:
    params = _load_model(args.model)
    dataset = _load_data(args.data, with_latent=args.sidecar is None)
    latent = dataset.latent
    if args.sidecar is not None:
        try:
            latent = phantom.read_sidecar(args.sidecar)
        except OSError as exc:
            raise CliDataError(f"cannot read sidecar {args.sidecar}: {exc}") from exc
    lines = ["volume_id,pairwise_order_accuracy,spearman,r_squared,pearson_r"]
    rows = []
    for rec in dataset.records:
        if rec.volume_id not in latent:
            raise CliDataError(f"sidecar lacks latent values for {rec.volume_id!r}")
        curve = evaluate.score_volume(params, dataset.volumes[rec.volume_id],
                                      rec.volume_id)
        m = evaluate.ordering_metrics(curve.scores, latent[rec.volume_id])
        rows.append(m)
        lines.append(f"{rec.volume_id},{repr(m.pairwise_order_accuracy)},"
                     f"{repr(m.spearman)},{repr(m.r_squared)},{repr(curve.pearson_r)}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    write_resolved(f"{args.out}.resolved.ini", {"command": {
        "command": "metrics", "model": str(args.model), "data": str(args.data),
        "sidecar": "" if args.sidecar is None else str(args.sidecar)}})
    print(f"order accuracy mean {np.mean([m.pairwise_order_accuracy for m in rows]):.4f}; "
          f"spearman median {np.median([m.spearman for m in rows]):.5f}; "
          f"r^2 median {np.median([m.r_squared for m in rows]):.5f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    worst = 0.0
    for seed in range(args.seeds):
        report = composite_grad_check(seed, input_size=(args.size, args.size),
                                      tolerance=args.tolerance)
        worst = max(worst, report.worst)
        status = "PASS" if report.passed else "FAIL"
        print(f"seed {seed}: worst rel err {report.worst:.3e} [{status}]")
    if worst < args.tolerance:
        print(f"gradient check passed at {args.tolerance:g}")
        return EXIT_OK
    print(f"gradient check FAILED at {args.tolerance:g}", file=sys.stderr)
    return EXIT_DATA


def composite_grad_check(seed: int, input_size=(32, 32), g: int = 1, m: int = 3,
                         tolerance: float = 1e-4) -> dc.GradCheckReport:
    """Finite-difference check of the full stack: network plus both losses."""
    cfg = network.NetworkConfig(input_size=input_size, seed=seed)
    params = network.init_network(cfg)
    rng = np.random.default_rng(seed + 1)
    batch = rng.uniform(size=(g * m, 1, *input_size))

    def build(leaves):
        graph = network.build_graph_from_leaves(cfg, leaves, batch)
        table = dc.reshape(graph.scores, (g, m))
        return losses.total_loss_graph(table)

    return dc.grad_check(build, dict(params.tensors), tolerance=tolerance)


# --- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="slicecoord",
                     description="self-supervised slice-position scoring pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=int, required=True)
    p.add_argument("--anomaly-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--image-size", dest="image_size")
    p.add_argument("--slices-range", dest="slices_range")
    p.add_argument("--coordinate-span", dest="coordinate_span")
    p.add_argument("--scale-range", dest="scale_range")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--translate-max", dest="translate_max", type=float)
    p.add_argument("--spacing-jitter", dest="spacing_jitter", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the scoring network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--g", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--dist-weight", dest="dist_weight", type=float)
    p.add_argument("--max-interval", dest="max_interval", type=int)
    p.add_argument("--checkpoint-period", dest="checkpoint_period", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write per-slice score curves as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="fit zone thresholds on labeled volumes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--volumes", required=True,
                   help="comma-separated calibration volume ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("classify", help="assign three-zone classes per slice")
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("detect-anomaly", help="flag volumes with non-linear score curves")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--r-threshold", dest="r_threshold", type=float, default=0.99)
    p.add_argument("--fail-on-flag", dest="fail_on_flag", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect_anomaly)

    p = sub.add_parser("grad-check", help="finite-difference check of the default stack")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--size", type=int, default=16,
                   help="square input size for the checked network")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("metrics", help="ordering metrics against latent ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sidecar")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except trainer.TrainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if "diverged" in str(exc) else EXIT_DATA
    except (phantom.PhantomError, network.ConfigError, network.CheckpointError,
            evaluate.EvaluateError, dc.ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
