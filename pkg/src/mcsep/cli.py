"""Command line: ``mcsep {synth-sources,simulate,features,train,eval,oracle,kernels}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import pipeline
from .errors import ConfigurationError, GeometryError, MCSepError, TrainingError
from .roomsim import SimulationConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ORACLE_NOTE = (
    "Oracle masks are computed against the reverberant image of each source at mic 1. "
    "Absolute values depend on the corpus and are not comparable across corpora."
)


def load_config(path) -> dict:
    """Read a YAML mapping; ``None`` gives an empty config."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config {p} not found")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{p}: top level must be a mapping")
    return data


def echo_config(out_dir, resolved: dict) -> None:
    """Record the fully resolved settings in the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))


def _plain(obj):
    """Tuples to lists, recursively, for YAML output."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _relative_to(base, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() or base is None else Path(base) / p


def cmd_synth_sources(args) -> int:
    from .synth import write_source_pool

    paths = write_source_pool(args.out, args.count, args.seed, args.duration, args.sample_rate)
    print(f"wrote {len(paths)} sources to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    unknown = set(cfg) - {"simulation", "source_pool", "num_scenes", "seed", "workers"}
    if unknown:
        raise ConfigurationError(f"unknown simulate settings: {sorted(unknown)}")
    base = Path(args.config).parent if args.config else None
    sim = SimulationConfig.from_dict(cfg.get("simulation") or {})
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigurationError("simulate needs a seed (--seed or 'seed' in the config)")
    num = args.num_scenes if args.num_scenes is not None else cfg.get("num_scenes")
    if num is None:
        raise ConfigurationError("simulate needs --num-scenes")
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    pool = args.source_pool or _relative_to(base, cfg.get("source_pool"))
    if pool is None:
        raise ConfigurationError("simulate needs a source pool (--source-pool or 'source_pool')")
    records = pipeline.run_simulation(args.out, int(num), int(seed), sim, pool, int(workers))
    resolved = {
        "simulation": _plain(sim.__dict__),
        "source_pool": str(pool),
        "num_scenes": int(num),
        "seed": int(seed),
    }
    echo_config(args.out, resolved)
    hist = pipeline.angle_histogram(records)
    print(f"simulated {len(records)} scenes into {args.out}")
    print("angle bins: " + "  ".join(f"{b}: {n}" for b, n in hist.items()))
    return EXIT_OK


def cmd_features(args) -> int:
    summary = pipeline.dump_features(args.manifest, args.pairs, args.out, args.kernel_length, args.stride)
    ok = [r for r in summary if r["error"] is None]
    failed = len(summary) - len(ok)
    worst = max((r["max_ipd_diff"] for r in ok), default=float("nan"))
    print(f"features for {len(ok)} scenes ({failed} failed); max |STFT IPD - kernel IPD| = {worst:.3e} rad")
    for r in summary:
        if r["error"] is not None:
            print(f"  {r['id']}: {r['error']}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DATA


def cmd_train(args) -> int:
    raw = load_config(args.config)
    base = Path(args.config).parent
    cfg = pipeline.TrainConfig.from_dict(raw, base)
    if not Path(cfg.manifest).exists() and not (Path(cfg.manifest) / pipeline.MANIFEST).exists():
        raise ConfigurationError(f"manifest {cfg.manifest} not found")
    if args.resume is not None and not Path(args.resume).exists():
        raise ConfigurationError(f"checkpoint {args.resume} not found")
    echo_config(args.out, _plain(cfg.to_dict()))

    def log(entry):
        extra = f"  train SI-SNRi {entry['train_si_snri']:.2f} dB" if "train_si_snri" in entry else ""
        loss = "n/a" if entry["loss"] is None else f"{entry['loss']:.4f}"
        print(f"epoch {entry['epoch']}  steps {entry['steps']}  loss {loss}{extra}", flush=True)

    res = pipeline.train(cfg, args.out, resume=args.resume, log=log)
    print(f"finished after epoch {res.epochs} ({res.steps} steps)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, model_type, cfg = pipeline.load_trained(args.checkpoint)
    corpus = pipeline.load_manifest(args.manifest)
    name = f"{model_type}/{cfg.frontend}" + (f"+{'+'.join(cfg.feature_set)}" if cfg.feature_set else "")
    results = {name: pipeline.evaluate(pipeline.separator_fn(model, model_type), corpus, name)}
    kinds = [k.strip().lower() for k in args.oracle.split(",") if k.strip()] if args.oracle else []
    notes = []
    if kinds:
        results.update(pipeline.evaluate_oracles(args.manifest, kinds, args.workers))
        notes.append(ORACLE_NOTE)
    print(pipeline.write_report(args.report, results, notes))
    return EXIT_OK


def cmd_oracle(args) -> int:
    results = pipeline.evaluate_oracles(args.manifest, ("ibm", "irm", "ipsm"), args.workers)
    print(pipeline.write_report(args.report, results, [ORACLE_NOTE]))
    return EXIT_OK


def cmd_kernels(args) -> int:
    from .kernelfeat import export_kernels_csv
    from .sepnet.checkpoint import decode_checkpoint

    model, _, cfg = pipeline.load_trained(args.checkpoint)
    if not cfg.is_kernel_frontend:
        raise ConfigurationError(f"frontend {cfg.frontend!r} has no kernels")
    epoch = decode_checkpoint(Path(args.checkpoint).read_bytes())[0]["epoch"]
    path = export_kernels_csv(model.features.bank(), args.out, epoch)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcsep", description="Multi-channel speech separation tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-sources", help="write a pool of synthetic speech-like source WAVs")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--sample-rate", type=int, default=8000)
    s.set_defaults(func=cmd_synth_sources)

    s = sub.add_parser("simulate", help="simulate reverberant multi-channel mixtures")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--num-scenes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--source-pool")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("features", help="dump STFT-path and kernel-path LPS/IPD archives")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pairs", default="1-4,2-5,3-6,1-2,3-4,5-6")
    s.add_argument("--out", required=True)
    s.add_argument("--kernel-length", type=int, default=64)
    s.add_argument("--stride", type=int, default=20)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train a separator")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="SI-SNRi report of a trained model, optionally with oracle rows")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--oracle", default="")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("oracle", help="IBM/IRM/IPSM oracle report")
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("kernels", help="export the kernel bank of a checkpoint as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kernels)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, GeometryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MCSepError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
