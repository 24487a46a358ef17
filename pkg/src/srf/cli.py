"""Command-line interface.

Subcommands: generate, stats, train, eval, predict, bench, hypersearch,
import.  Domain errors print one `error: <Kind>: <message>` line to
stderr and exit 1; argument errors exit 2 (argparse default).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import synth
from .container import read_field, write_field
from .errors import SrfError, TooFewFiles, UnimplementedFormat
from .evalkit import aggregate_reports, compare_fields, report_to_json_str
from .field import (BeamParams, ConeBeam, FieldChannel, KermaCoefficients,
                    RadiationField, RectBeam, compute_stats, fluence_histogram,
                    split_dataset)
from .nn import Model, ModelConfig, infer_field, load_checkpoint
from .normalize import Normalizer
from .trainer import (SearchSpace, TrainConfig, evaluate, hyper_search, train)


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(
            f"dims must be N or NX,NY,NZ with positive entries, got {text!r}")
    return tuple(parts)


def _vec3(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}")
    return tuple(parts)


def _srf_paths(data: str) -> list[str]:
    p = Path(data)
    if p.is_dir():
        paths = sorted(str(q) for q in p.glob("*.srf"))
    else:
        paths = [str(p)]
    if not paths:
        raise TooFewFiles(f"no .srf files under {data!r}")
    return paths


def _load_fields(paths) -> list[RadiationField]:
    return [read_field(p) for p in paths]


def _splits(data: str, seed: int):
    train_p, val_p, test_p = split_dataset(_srf_paths(data), seed)
    return train_p, val_p, test_p


# --- subcommand implementations ----------------------------------------------


def _cmd_generate(args) -> int:
    preset = getattr(synth.GeneratorConfig, args.preset)
    cfg = preset(dims=args.dims, extent=args.extent, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = synth.gen_dataset(cfg, args.count, out)
    print(f"wrote {len(paths)} fields and manifest.json to {out}")
    return 0


def _cmd_stats(args) -> int:
    fields = _load_fields(_srf_paths(args.data))
    stats = compute_stats(fields, channels=args.channels)
    for key, value in stats.to_json().items():
        print(f"{key:22s} {value:.6g}" if isinstance(value, float)
              else f"{key:22s} {value}")
    if args.json:
        Path(args.json).write_text(
            json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n")
    if args.hist:
        lines = ["field,bin_lo,bin_hi,count"]
        for i, fld in enumerate(fields):
            h = fluence_histogram(fld, channels=args.channels,
                                  lower_cut=args.lower_cut, bins=args.bins)
            lines += [f"{i},{h.bin_edges[j]:.6g},{h.bin_edges[j + 1]:.6g},"
                      f"{h.counts[j]}" for j in range(len(h.counts))]
        Path(args.hist).write_text("\n".join(lines) + "\n")
    return 0


def _model_config_from(args) -> ModelConfig:
    return ModelConfig(
        variant=args.variant, width=args.width, depth=args.depth,
        L=args.fourier_l, l_max=args.l_max, spec_dim=args.spec_dim,
        fusion=args.fusion, normalizer=args.normalizer, alpha=args.alpha,
        jitter=not args.no_jitter)


def _train_config_from(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay,
        warmup_steps=args.warmup, eta_min=args.eta_min,
        max_epochs=args.epochs, patience=args.patience,
        physical_batch=args.physical_batch,
        effective_batch=args.effective_batch,
        jitter=not args.no_jitter, seed=args.seed)


def _cmd_train(args) -> int:
    train_p, val_p, _ = _splits(args.data, args.split_seed)
    train_fields = _load_fields(train_p)
    val_fields = _load_fields(val_p)
    model = Model(_model_config_from(args), seed=args.seed)
    config = _train_config_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, train_fields, val_fields, config,
                   checkpoint_path=out / "checkpoint.srfm", log=print)
    (out / "history.csv").write_text(result.history_csv())
    summary = {
        "best_val_loss": result.best_val_loss,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "updates_run": result.updates_run,
        "wall_time_s": result.wall_time_s,
        "n_params": model.n_params,
        "n_train": len(train_fields),
        "n_val": len(val_fields),
        "model_config": model.config.to_json(),
    }
    (out / "result.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best val loss {result.best_val_loss:.6f} "
          f"(epoch {result.best_epoch}); artifacts in {out}")
    return 0


def _cmd_eval(args) -> int:
    if args.split == "all":
        paths = _srf_paths(args.data)
    else:
        train_p, val_p, test_p = _splits(args.data, args.split_seed)
        paths = {"train": train_p, "val": val_p, "test": test_p}[args.split]
    fields = _load_fields(paths)
    coeffs = (KermaCoefficients.from_text(args.kerma) if args.kerma
              else KermaCoefficients.bundled_air())
    if args.self_check:
        rows = []
        for i, fld in enumerate(fields):
            flu, spec = fld.joined()
            rows.append({"field": i,
                         **compare_fields(fld, flu, spec, coeffs)})
        report = aggregate_reports(rows)
    else:
        if not args.checkpoint:
            raise SrfError("eval needs --checkpoint (or --self-check)")
        model = load_checkpoint(args.checkpoint)
        report = evaluate(model, fields, coeffs=coeffs, batch=args.batch)
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report_to_json_str(report) + "\n")
    return 0


def _beam_from(args) -> BeamParams:
    spectrum = synth.gen_spectrum(args.kvp, args.t_al, args.t_cu)
    shape = (RectBeam(*args.rect) if args.rect
             else ConeBeam(args.cone))
    if args.direction is not None:
        d = np.asarray(args.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        return BeamParams(direction=tuple(d), tube_distance=args.distance,
                          tube_spectrum=spectrum, beam_shape=shape)
    return BeamParams.from_angles(args.phi, args.theta,
                                  tube_distance=args.distance,
                                  tube_spectrum=spectrum, beam_shape=shape)


def _cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    beam = _beam_from(args)
    norm = None
    if args.max_fluence is not None:
        norm = Normalizer(model.config.normalizer,
                          alpha=model.config.alpha).fit(
            np.array([args.max_fluence]))
    result = infer_field(model, beam, args.dims, batch=args.batch,
                         normalizer=norm)
    extent = ((args.extent,) * 3 if args.extent is not None
              else tuple(1.0 / d for d in args.dims))
    spec32 = result.spectra.astype(np.float32)
    spec32 /= spec32.sum(axis=-1, keepdims=True, dtype=np.float32)
    channel = FieldChannel(
        fluence=result.fluence.astype(np.float32),
        spectra=spec32,
        rel_error=np.zeros(args.dims, dtype=np.float32))
    field = RadiationField(args.dims, extent, {"predicted": channel},
                           np.zeros(args.dims, dtype=bool), beam)
    write_field(field, args.out)
    print(f"wrote {args.out} ({result.timing_line()})")
    return 0


def _cmd_bench(args) -> int:
    model = load_checkpoint(args.checkpoint)
    beam = _beam_from(args)
    infer_field(model, beam, args.dims, batch=args.batch)   # warmup
    result = infer_field(model, beam, args.dims, batch=args.batch,
                         repeats=args.runs)
    n_voxels = int(np.prod(args.dims))
    print(f"inference over {n_voxels} voxels x {result.runs} runs: "
          f"{result.timing_line()}")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "dims": list(args.dims),
            "runs": result.runs,
            "mean_ms": result.duration_ms_mean,
            "std_ms": result.duration_ms_std,
            "voxels_per_s": n_voxels / (result.duration_ms_mean / 1e3),
            "n_params": model.n_params,
        }, indent=2, sort_keys=True) + "\n")
    return 0


def _parse_axis(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"axis must be name=v1,v2,..., got {text!r}")
    name, _, values = text.partition("=")

    def coerce(v):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                continue
        return v

    return name, tuple(coerce(v) for v in values.split(","))


def _cmd_hypersearch(args) -> int:
    train_p, val_p, _ = _splits(args.data, args.split_seed)
    train_fields = _load_fields(train_p)
    val_fields = _load_fields(val_p)
    space = (SearchSpace(dict(args.axis)) if args.axis
             else SearchSpace.default())
    result = hyper_search(
        _model_config_from(args), _train_config_from(args),
        train_fields, val_fields, space=space, strategy=args.strategy,
        n_trials=args.trials, trial_epochs=args.trial_epochs,
        seed=args.seed, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trials.json").write_text(
        json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"best {result.best.params} val {result.best.val_loss:.6f}; "
          f"trials.json in {out}")
    return 0


def _cmd_import(args) -> int:
    raise UnimplementedFormat(
        f"no importer for format {args.format!r}; write SRF1 containers "
        "directly via srf.container.write_field after converting your "
        "transport-code output to per-voxel fluence and 32-bin spectra")


# --- argument wiring ------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--variant", choices=("srbf", "sperf", "pbrf"),
                   default="srbf")
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--fourier-l", type=int, default=10)
    p.add_argument("--l-max", type=int, default=4)
    p.add_argument("--spec-dim", type=int, default=32)
    p.add_argument("--fusion", choices=("concat", "film", "resfilm", "gmu"),
                   default="film")
    p.add_argument("--normalizer", choices=("max01", "maxsym", "maxlog"),
                   default="max01")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--no-jitter", action="store_true")


def _add_train_args(p: argparse.ArgumentParser):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--eta-min", type=float, default=1e-6)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--physical-batch", type=int, default=4)
    p.add_argument("--effective-batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)


def _add_beam_args(p: argparse.ArgumentParser):
    p.add_argument("--direction", type=_vec3, default=None,
                   help="beam direction X,Y,Z (normalized automatically)")
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--distance", type=float, default=1.0)
    p.add_argument("--kvp", type=float, default=100.0)
    p.add_argument("--t-al", type=float, default=2.5)
    p.add_argument("--t-cu", type=float, default=0.0)
    p.add_argument("--cone", type=float, default=10.0,
                   help="cone opening angle in degrees")
    p.add_argument("--rect", type=_vec2, default=None,
                   help="rectangular field WIDTH,HEIGHT in meters")


def _vec2(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected W,H, got {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srf",
        description="Neural estimators of voxelized X-ray radiation fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic SRF1 dataset")
    p.add_argument("--preset", choices=("ds01", "ds02", "ds03"),
                   default="ds01")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--dims", type=_dims, default=(16, 16, 16))
    p.add_argument("--extent", type=float, default=None,
                   help="voxel edge length in meters (default: 1 m cube)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_generate)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("data", help=".srf file or directory")
    p.add_argument("--channels", choices=("both", "beam", "scatter"),
                   default="both")
    p.add_argument("--json", default=None, help="write stats JSON here")
    p.add_argument("--hist", default=None, help="write histogram CSV here")
    p.add_argument("--lower-cut", type=float, default=0.0)
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(run=_cmd_stats)

    p = sub.add_parser("train", help="fit a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(run=_cmd_train)

    p = sub.add_parser("eval", help="metric report on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--kerma", default=None,
                   help="kerma coefficient table (default: bundled air)")
    p.add_argument("--batch", type=int, default=8192)
    p.add_argument("--self-check", action="store_true",
                   help="score the ground truth against itself")
    p.add_argument("--out", default=None, help="write report JSON here")
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("predict", help="infer a field and write SRF1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=_dims, default=(16, 16, 16))
    p.add_argument("--extent", type=float, default=None)
    p.add_argument("--batch", type=int, default=8192)
    p.add_argument("--max-fluence", type=float, default=None,
                   help="denormalization maximum (default: relative units)")
    _add_beam_args(p)
    p.set_defaults(run=_cmd_predict)

    p = sub.add_parser("bench", help="inference timing on a voxel grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dims", type=_dims, default=(50, 50, 50))
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--batch", type=int, default=8192)
    p.add_argument("--out", default=None, help="write timing JSON here")
    _add_beam_args(p)
    p.set_defaults(run=_cmd_bench)

    p = sub.add_parser("hypersearch", help="grid/random hyperparameter search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("grid", "random"), default="grid")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--trial-epochs", type=int, default=20)
    p.add_argument("--axis", action="append", type=_parse_axis, default=None,
                   help="search axis, e.g. --axis width=128,192")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(run=_cmd_hypersearch)

    p = sub.add_parser("import", help="convert external formats to SRF1")
    p.add_argument("--format", required=True)
    p.add_argument("--input", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_import)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except SrfError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
