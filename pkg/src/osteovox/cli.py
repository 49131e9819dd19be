"""Command-line entry point: generate, degrade, build-dataset, train, eval, predict, export."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .dataset import (DatasetManifest, FormatError, SequenceStore, build_manifest, read_evolution,
                      write_evolution)
from .degradation import (DEFAULT_R0, DEFAULT_TARGET_LOSS, MAX_MONTHS, DegradationParams, EvolutionSequence,
                          simulate)
from .export import write_obj, write_slices
from .hetmigen import ParamsError, generate, parse_params_csv
from .nn.checkpoint import CheckpointError
from .training import TrainConfig, TrainingDiverged, evaluate, train
from .transvnet import ConfigError, ModelConfig, load_model, rollout, save_model, toy_config, vit_only_config
from .voxel import MINERAL, DomainError, VoxelGrid, largest_component_fraction, volume_fraction

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DATA_ERRORS = (ParamsError, FormatError, DomainError, ConfigError, CheckpointError, FileNotFoundError,
               NotADirectoryError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _jobs(requested: int) -> int:
    env = os.environ.get("OSTEOVOX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"OSTEOVOX_THREADS must be an integer, got {env!r}") from None
    return max(1, requested)


def _row_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


# generate ------------------------------------------------------------------------------

def _generate_one(params, seed, dims, out_dir):
    result = generate(params, seed=seed, dims=dims)
    name = f"sample_{params.id:04d}"
    write_evolution(EvolutionSequence([result.grid], source_id=name), Path(out_dir) / f"{name}.ovxe")
    lcf = largest_component_fraction(result.grid, MINERAL) if result.grid.count(MINERAL) else 0.0
    return params.id, volume_fraction(result.grid, MINERAL), lcf, result.shortfall


def cmd_generate(args):
    rows = parse_params_csv(Path(args.params).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = (args.dims,) * 3
    items = [(p, _row_seed(args.seed, i), dims, str(out)) for i, p in enumerate(rows)]
    for rid, vf, lcf, shortfall in _map(_generate_one, items, _jobs(args.jobs)):
        print(f"id {rid}  vf {vf:.4f}  clustering {lcf:.4f}  shortfall {'yes' if shortfall else 'no'}")
    return EXIT_OK


# degrade -------------------------------------------------------------------------------

def _degrade_one(path, months, r0, target_loss, seed):
    seq = read_evolution(path)
    initial = seq.frames[0]
    if initial.count(MINERAL) == 0:
        raise DomainError(f"{path}: no mineral voxels")
    params = DegradationParams.calibrated(r0, target_loss, months=months, seed=seed)
    out = simulate(initial, params, source_id=seq.source_id)
    write_evolution(out, path)
    counts = out.mineral_counts()
    return str(path), 1.0 - counts[-1] / counts[0]


def cmd_degrade(args):
    if not 0 <= args.months <= MAX_MONTHS:
        raise UsageError(f"--months must lie in [0, {MAX_MONTHS}], got {args.months}")
    files = sorted(Path(args.input).glob("*.ovxe"))
    if not files:
        raise FileNotFoundError(f"no .ovxe files in {args.input}")
    for f in files:
        if read_evolution(f).frames[0].count(MINERAL) == 0:
            raise DomainError(f"{f}: no mineral voxels")
    items = [(str(f), args.months, args.r0, args.target_loss, _row_seed(args.seed, i)) for i, f in enumerate(files)]
    for path, loss in _map(_degrade_one, items, _jobs(args.jobs)):
        print(f"{Path(path).name}  cumulative loss {loss:.4f}")
    return EXIT_OK


# dataset / training ----------------------------------------------------------------------

def cmd_build_dataset(args):
    files = sorted(Path(args.input).glob("*.ovxe"))
    edges = None
    if args.bin_width:
        edges = list(np.round(np.arange(0.0, 1.0 + 1e-9, args.bin_width), 10))
    manifest = build_manifest(files, bin_edges=edges, split_seed=args.split_seed)
    out = Path(args.out) if args.out else Path(args.input) / "manifest.json"
    manifest.save(out)
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    c = manifest.counts()
    print(f"test {c['test']} / val {c['val']} / train {c['train']}")
    return EXIT_OK


def _model_config(name: str) -> ModelConfig:
    if name == "toy":
        return toy_config()
    if name == "vit-only":
        return vit_only_config()
    if name == "default":
        return ModelConfig()
    return ModelConfig.from_json(Path(name).read_text())


def cmd_train(args):
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_config = _model_config(args.config)
    batch = args.batch_size or (8 if model_config.input_resolution <= 32 else 2)
    cfg = TrainConfig(epochs=args.epochs, steps_per_epoch=args.steps_per_epoch, batch_size=batch,
                      optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
                      weight_decay=args.weight_decay, horizon=args.horizon, augment=not args.no_augment,
                      seed=args.seed, checkpoint_every=args.checkpoint_every,
                      checkpoint_dir=str(out / "checkpoints") if args.checkpoint_every else None)
    try:
        model, report = train(manifest, model_config, cfg)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_model(exc.last_good, out / "last_good")
        raise
    save_model(model, out / "model")
    report.write_loss_csv(out / "loss.csv")
    (out / "train_report.json").write_text(report.to_json())
    last = report.loss_curve[-1] if report.loss_curve else (0, float("nan"), float("nan"))
    print(f"steps {report.steps}  loss {last[1]:.6f}  ce {last[2]:.6f}  time {report.wall_clock:.1f}s")
    return EXIT_OK


def _copy_stub(sample):
    return sample.target


def _invert_stub(sample):
    return VoxelGrid(1 - sample.target.array, sample.target.n_phases)


def cmd_eval(args):
    manifest = DatasetManifest.load(args.manifest)
    if args.stub:
        model = {"copy": _copy_stub, "invert": _invert_stub}[args.stub]
        label = args.label or f"stub-{args.stub}"
    elif args.model:
        model = load_model(args.model)
        label = args.label or Path(args.model).name
    else:
        raise UsageError("eval needs --model or --stub")
    report = evaluate(model, manifest, args.split, args.horizon, SequenceStore())
    if args.json:
        Path(args.json).write_text(report.to_json())
    print(f"{label}  DSC {report.dsc:.6f}, HD {report.hd_average:.6f}")
    return EXIT_OK


def cmd_predict(args):
    model = load_model(args.model)
    seq = read_evolution(args.input)
    if not 0 <= args.frame < len(seq):
        raise DomainError(f"frame {args.frame} outside a {len(seq)}-frame sequence")
    t0 = args.frame if args.t0 is None else args.t0
    out = rollout(seq.frames[args.frame], t0, args.steps, model, args.horizon)
    write_evolution(out, args.out)
    print(f"wrote {len(out)} frames to {args.out}")
    return EXIT_OK


def cmd_export(args):
    seq = read_evolution(args.input)
    if not 0 <= args.frame < len(seq):
        raise DomainError(f"frame {args.frame} outside a {len(seq)}-frame sequence")
    grid = seq.frames[args.frame]
    if args.mode == "slices":
        paths = write_slices(grid, args.out, args.axis)
        print(f"wrote {len(paths)} slices to {args.out}")
    else:
        n_verts, n_tris = write_obj(grid, args.out)
        print(f"wrote {n_verts} vertices, {n_tris} triangles to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="osteovox", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="grow microstructures from a parameter CSV")
    g.add_argument("--params", required=True, help="parameter CSV, one record per line")
    g.add_argument("--out", required=True, help="output directory for .ovxe files")
    g.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
    g.add_argument("--dims", type=int, default=150, help="cube side in voxels (default 150)")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (default 1; OSTEOVOX_THREADS overrides)")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("degrade", help="extend single-frame files into monthly evolution sequences")
    d.add_argument("--in", dest="input", required=True, help="directory of .ovxe files (rewritten in place)")
    d.add_argument("--months", type=int, default=MAX_MONTHS, help=f"months to simulate, 0..{MAX_MONTHS}")
    d.add_argument("--r0", type=float, default=DEFAULT_R0, help=f"first-month loss rate (default {DEFAULT_R0})")
    d.add_argument("--target-loss", type=float, default=DEFAULT_TARGET_LOSS,
                   help=f"relative loss after {MAX_MONTHS} months used for calibration (default {DEFAULT_TARGET_LOSS})")
    d.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
    d.add_argument("--jobs", type=int, default=1, help="worker processes (default 1; OSTEOVOX_THREADS overrides)")
    d.set_defaults(func=cmd_degrade)

    b = sub.add_parser("build-dataset", help="quality-filter, bin and split evolution files")
    b.add_argument("--in", dest="input", required=True, help="directory of .ovxe files")
    b.add_argument("--out", default=None, help="manifest path (default <in>/manifest.json)")
    b.add_argument("--bin-width", type=float, default=None, help="vf bin width (default 0.05)")
    b.add_argument("--split-seed", type=int, default=0, help="split shuffle seed (default 0)")
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train a TransVNet on a manifest")
    t.add_argument("--manifest", required=True, help="dataset manifest JSON")
    t.add_argument("--out", required=True, help="output directory for model, checkpoints and loss.csv")
    t.add_argument("--config", default="toy", help="toy, vit-only, default, or a config JSON path (default toy)")
    t.add_argument("--epochs", type=int, default=1, help="epochs (default 1)")
    t.add_argument("--steps-per-epoch", type=int, default=None,
                   help="optimizer steps per epoch (default: one pass over all training pairs)")
    t.add_argument("--batch-size", type=int, default=None,
                   help="batch size (default 8 for desk-scale configs up to 32^3, else 2)")
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd", help="optimizer (default sgd)")
    t.add_argument("--lr", type=float, default=0.01, help="learning rate (default 0.01)")
    t.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    t.add_argument("--weight-decay", type=float, default=0.0, help="L2 penalty (default 0)")
    t.add_argument("--horizon", type=int, default=1, help="months between input and target (default 1)")
    t.add_argument("--no-augment", action="store_true", help="disable symmetry augmentation")
    t.add_argument("--seed", type=int, default=0, help="init and sampling seed (default 0)")
    t.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint cadence in steps (default 0: off)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean DSC and HD over a split")
    e.add_argument("--manifest", required=True, help="dataset manifest JSON")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--model", default=None, help="model directory written by train")
    src.add_argument("--stub", choices=("copy", "invert"), default=None, help="oracle stub instead of a model")
    e.add_argument("--split", choices=("train", "val", "test"), default="test", help="split (default test)")
    e.add_argument("--horizon", type=int, default=1, help="months between input and target (default 1)")
    e.add_argument("--label", default=None, help="method label printed in the result row")
    e.add_argument("--json", default=None, help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="autoregressive rollout from one frame")
    r.add_argument("--model", required=True, help="model directory written by train")
    r.add_argument("--in", dest="input", required=True, help="input .ovxe file")
    r.add_argument("--frame", type=int, default=0, help="starting frame index (default 0)")
    r.add_argument("--t0", type=int, default=None, help="month of the starting frame (default: --frame)")
    r.add_argument("--steps", type=int, default=1, help="rollout steps (default 1)")
    r.add_argument("--horizon", type=int, default=1, help="months per step (default 1)")
    r.add_argument("--out", required=True, help="output .ovxe file")
    r.set_defaults(func=cmd_predict)

    x = sub.add_parser("export", help="write PNG slices or an OBJ surface of one frame")
    x.add_argument("--in", dest="input", required=True, help="input .ovxe file")
    x.add_argument("--frame", type=int, default=0, help="frame index (default 0)")
    x.add_argument("--mode", choices=("slices", "mesh"), default="slices", help="output kind (default slices)")
    x.add_argument("--axis", choices=("x", "y", "z"), default="z", help="slice axis (default z)")
    x.add_argument("--out", required=True, help="directory for slices, file path for mesh")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"osteovox {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"osteovox {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError, KeyError) as exc:
        # malformed JSON, manifests with missing fields and similar input problems
        print(f"osteovox {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"osteovox {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
