"""Command-line pipeline: synthesize data, train, predict, evaluate, verify.

One executable with subcommands so config semantics stay uniform. Protocol
hyperparameters are exposed as flags whose defaults are the reference
training protocol; a flat `key = value` config file can pre-set any of them
and explicit flags win over the file.

Exit codes: 0 success, 2 configuration, 3 I/O, 4 numerical failure,
5 bad checkpoint, 6 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import scipy.fft

from . import bench, model, synth, training
from .kernels import DegenerateKernelError, ParameterRangeError
from .model import CheckpointError
from .pointcloud import FormatError, devoxelize, load_pointcloud, save_colored_cloud
from .synth import LABEL_TOWER, SceneConfig
from .training import LossConfig, NumericalError, TrainConfig

DATA_DIR_ENV = "GENEO_DATA_DIR"

PROTOCOL = {
    "grid": (64, 64, 64),
    "kernel": (9, 9, 9),
    "epochs": 50,
    "batch": 8,
    "lr": 1e-3,
    "alpha": 5.0,
    "epsilon": 0.1,
    "rho_l": 5.0,
    "rho_t": 5.0,
    "seed": 0,
    "threads": 0,
}


class ConfigError(ValueError):
    pass


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        vals = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad grid/kernel shape {text!r}") from exc
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or any(v < 1 for v in vals):
        raise ConfigError(f"bad grid/kernel shape {text!r}")
    return tuple(vals)  # type: ignore[return-value]


def _parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad split fractions {text!r}") from exc
    if len(vals) != 3:
        raise ConfigError(f"need three split fractions, got {text!r}")
    return vals  # type: ignore[return-value]


def read_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' comments; keys match the CLI flag names."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, value = body.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args: argparse.Namespace, key: str, cast, default):
    """Explicit flag > config file > protocol default."""
    value = getattr(args, key, None)
    if value is not None:
        # shape-like flags arrive as raw strings and need the same cast
        if isinstance(value, str) and cast is not str:
            try:
                return cast(value)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"flag --{key.replace('_', '-')}: {exc}") from exc
        return value
    filecfg = getattr(args, "_filecfg", {})
    if key in filecfg:
        try:
            return cast(filecfg[key])
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return default


def _data_path(path: str) -> str:
    if os.path.exists(path) or os.path.isabs(path):
        return path
    root = os.environ.get(DATA_DIR_ENV)
    if root and os.path.exists(os.path.join(root, path)):
        return os.path.join(root, path)
    return path


def _out_path(path: str) -> str:
    root = os.environ.get(DATA_DIR_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--seed", type=int, help=f"random seed (default: {PROTOCOL['seed']})")
    p.add_argument("--threads", type=int,
                   help=f"worker threads, 0 = auto (default: {PROTOCOL['threads']})")
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch / per-scene progress")


def _add_protocol(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", help=f"voxel grid Z,Y,X (default: {','.join(map(str, PROTOCOL['grid']))})")
    p.add_argument("--kernel", help=f"kernel shape Z,Y,X (default: {','.join(map(str, PROTOCOL['kernel']))})")
    p.add_argument("--epochs", type=int, help=f"training epochs (default: {PROTOCOL['epochs']})")
    p.add_argument("--batch", type=int, help=f"batch size (default: {PROTOCOL['batch']})")
    p.add_argument("--lr", type=float, help=f"learning rate (default: {PROTOCOL['lr']})")
    p.add_argument("--alpha", type=float, help=f"target-voxel loss emphasis (default: {PROTOCOL['alpha']})")
    p.add_argument("--epsilon", type=float, help=f"loss weight floor (default: {PROTOCOL['epsilon']})")
    p.add_argument("--rho-l", dest="rho_l", type=float,
                   help=f"negativity penalty on mixing weights (default: {PROTOCOL['rho_l']})")
    p.add_argument("--rho-t", dest="rho_t", type=float,
                   help=f"negativity penalty on shape parameters (default: {PROTOCOL['rho_t']})")
    p.add_argument("--tversky", nargs="?", const=1.0, type=float, metavar="MIX",
                   help="add the Tversky term with this mix weight (default: off; bare flag = 1.0)")
    p.add_argument("--criterion", choices=("iou", "precision", "f_beta"),
                   help="threshold tuning criterion (default: iou)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geneoseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scenes", type=int, help="number of scenes (default: 200)")
    p.add_argument("--towers", type=int, help="towers per scene (default: 1)")
    p.add_argument("--blobs", type=int, help="vegetation blobs per scene (default: 20)")
    p.add_argument("--trees", type=int, help="trunk-plus-canopy trees per scene (default: 7)")
    p.add_argument("--posts", type=int, help="short posts per scene (default: 25)")
    p.add_argument("--tower-fraction", dest="tower_fraction", type=float,
                   help="target tower point share (default: 0.005)")
    p.add_argument("--noise-rate", dest="noise_rate", type=float,
                   help="near-tower label noise rate in [0,1] (default: 0)")
    p.add_argument("--noise-radius", dest="noise_radius", type=float,
                   help="label noise dilation radius, meters (default: 2.0)")
    p.add_argument("--splits", help="train,val,test fractions (default: 0.2,0.1,0.7)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the 11-parameter model on a dataset")
    _add_common(p)
    _add_protocol(p)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", help="training history CSV output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one cloud and export a colored PLY")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True, help="input cloud (.gpc binary or text)")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--grid", help=f"voxel grid Z,Y,X (default: {','.join(map(str, PROTOCOL['grid']))})")
    p.add_argument("--kernel", help="rediscretize the kernels to this shape Z,Y,X (default: keep)")
    p.add_argument("--tau", type=float, help="override the detection threshold (default: checkpoint value)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics of a checkpoint over a dataset split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--level", default="voxel", choices=("voxel", "point"))
    p.add_argument("--grid", help=f"voxel grid Z,Y,X (default: {','.join(map(str, PROTOCOL['grid']))})")
    p.add_argument("--kernel", help="rediscretize kernels to this shape (default: keep)")
    p.add_argument("--tau", type=float, help="override the detection threshold")
    p.add_argument("--csv", help="write per-scene metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    _add_common(p)
    p.add_argument("--trials", type=int, default=20, help="random configurations (default: 20)")
    p.add_argument("--corrupt", metavar="PARAM",
                   help="testing hook: poison this parameter's analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print the named trainable parameters of a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="run the 7-row operator-multiset ablation")
    _add_common(p)
    _add_protocol(p)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (default: 3)")
    p.add_argument("--csv", help="write per-run metrics CSV here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("match", help="cylinder template-matching baseline AP")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--grid", help=f"voxel grid Z,Y,X (default: {','.join(map(str, PROTOCOL['grid']))})")
    p.add_argument("--radius", type=float,
                   help="template radius in voxels (default: dataset average tower radius)")
    p.add_argument("--template", help="template shape Z,Y,X (default: 9,9,9)")
    p.set_defaults(func=cmd_match)

    return parser


def _train_config(args: argparse.Namespace) -> TrainConfig:
    tversky = _resolve(args, "tversky", float, None)
    loss = LossConfig(
        alpha=_resolve(args, "alpha", float, PROTOCOL["alpha"]),
        epsilon=_resolve(args, "epsilon", float, PROTOCOL["epsilon"]),
        rho_l=_resolve(args, "rho_l", float, PROTOCOL["rho_l"]),
        rho_t=_resolve(args, "rho_t", float, PROTOCOL["rho_t"]),
        tversky_enabled=tversky is not None,
        tversky_mix=tversky if tversky is not None else 1.0,
    )
    return TrainConfig(
        epochs=_resolve(args, "epochs", int, PROTOCOL["epochs"]),
        batch_size=_resolve(args, "batch", int, PROTOCOL["batch"]),
        learning_rate=_resolve(args, "lr", float, PROTOCOL["lr"]),
        kernel_shape=_resolve(args, "kernel", _parse_shape, PROTOCOL["kernel"]),
        loss=loss,
        threshold_criterion=_resolve(args, "criterion", str, "iou"),
    )


def _load_scenes(args: argparse.Namespace, split: str) -> list[synth.Scene]:
    manifest = synth.load_manifest(_data_path(args.data))
    grid_shape = _resolve(args, "grid", _parse_shape, PROTOCOL["grid"])
    scenes = synth.load_split(manifest, split, grid_shape)
    if not scenes:
        raise ConfigError(f"manifest has no scenes in split {split!r}")
    return scenes


def cmd_synth(args: argparse.Namespace) -> int:
    seed = _resolve(args, "seed", int, PROTOCOL["seed"])
    config = SceneConfig(
        n_towers=_resolve(args, "towers", int, 1),
        n_blobs=_resolve(args, "blobs", int, 20),
        n_trees=_resolve(args, "trees", int, 7),
        n_posts=_resolve(args, "posts", int, 25),
        tower_fraction=_resolve(args, "tower_fraction", float, 0.005),
        noise_rate=_resolve(args, "noise_rate", float, 0.0),
        noise_radius=_resolve(args, "noise_radius", float, 2.0),
        seed=seed,
    )
    n_scenes = _resolve(args, "scenes", int, 200)
    splits = _resolve(args, "splits", _parse_fractions, (0.2, 0.1, 0.7))
    out_dir = _out_path(args.out)
    if config.n_towers < 1:
        # towerless scenes cannot be cropped around a tower; emit raw scenes
        os.makedirs(out_dir, exist_ok=True)
        counts = np.zeros(len(synth.CLASS_NAMES))
        for i in range(n_scenes):
            cloud = synth.generate_scene(synth.SceneConfig(**{**vars(config), "seed": seed + i}))
            synth.save_pointcloud(cloud, os.path.join(out_dir, f"scene_{i:04d}.gpc"), format="binary")
            for lab in synth.CLASS_NAMES:
                counts[lab] += np.count_nonzero(cloud.labels == lab)
        fr = counts / max(counts.sum(), 1)
        print(f"wrote {n_scenes} uncropped scenes to {out_dir} (no manifest: no towers)")
        print("class fractions: " + "  ".join(
            f"{name}={fr[lab]:.4f}" for lab, name in synth.CLASS_NAMES.items()))
        return 0
    manifest = synth.build_dataset(config, n_scenes, out_dir, splits)
    n_points = sum(s["n_points"] for s in manifest["scenes"])
    print(f"wrote {n_scenes} scenes ({n_points} points) to {out_dir}")
    print(f"splits: train={sum(s['split'] == 'train' for s in manifest['scenes'])}"
          f" val={sum(s['split'] == 'val' for s in manifest['scenes'])}"
          f" test={sum(s['split'] == 'test' for s in manifest['scenes'])}")
    print(f"tower fraction: {manifest['stats']['avg_tower_fraction']:.4f}"
          f" (avg over cropped scenes)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    seed = _resolve(args, "seed", int, PROTOCOL["seed"])
    train_scenes = _load_scenes(args, "train")
    val_scenes = _load_scenes(args, "val")
    print(f"training on {len(train_scenes)} scenes, validating on {len(val_scenes)}"
          f" (grid {_resolve(args, 'grid', _parse_shape, PROTOCOL['grid'])},"
          f" kernel {config.kernel_shape}, {config.epochs} epochs)")
    params, history = training.train(train_scenes, val_scenes, config, seed=seed)
    for rec in history:
        if args.verbose or rec["epoch"] % 10 == 9 or rec["epoch"] == len(history) - 1:
            print(f"  epoch {rec['epoch']:3d}  train_loss {rec['train_loss']:.6f}"
                  f"  val_loss {rec['val_loss']:.6f}  val_iou {rec['val_iou']:.4f}")
    negative = [n for n, v in zip(model.trainable_names(params), model.get_trainable(params))
                if v < -1e-6]
    if negative:
        print(f"warning: parameters ended negative beyond tolerance: {', '.join(negative)}")
    model.save_checkpoint(params, args.out)
    if args.history:
        training.write_history(history, args.history)
    if history:
        metrics = training.evaluate(params, val_scenes, level="voxel")
        print(f"validation: precision {metrics.precision:.4f}  recall {metrics.recall:.4f}"
              f"  iou {metrics.iou:.4f}  (tau {params.tau:.2f})")
    print(f"checkpoint written to {args.out}")
    return 0


def _confusion(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    pred = pred.astype(bool).ravel()
    truth = truth.astype(bool).ravel()
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return tp, fp, fn, tn


def cmd_predict(args: argparse.Namespace) -> int:
    params = model.load_checkpoint(_data_path(args.ckpt))
    if args.kernel:
        params = model.rediscretize(params, _parse_shape(args.kernel))
    path = _data_path(args.input)
    with open(path, "rb") as fh:
        is_binary = fh.read(4) == b"GPC1"
    cloud = load_pointcloud(path, format="binary" if is_binary else "text")
    grid_shape = _resolve(args, "grid", _parse_shape, PROTOCOL["grid"])
    scene = synth.Scene.from_cloud(cloud, grid_shape, LABEL_TOWER)
    mask = model.predict(scene.grid.values, params, tau=args.tau)
    point_pred = devoxelize(mask, scene.vmap)
    save_colored_cloud(cloud, point_pred, scene.point_truth, args.out)
    vt = _confusion(mask, scene.labels.values)
    pt = _confusion(point_pred, scene.point_truth)
    print(f"voxel tp={vt[0]} fp={vt[1]} fn={vt[2]} tn={vt[3]}")
    print(f"point tp={pt[0]} fp={pt[1]} fn={pt[2]} tn={pt[3]}")
    print(f"colored cloud written to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    params = model.load_checkpoint(_data_path(args.ckpt))
    if args.kernel:
        params = model.rediscretize(params, _parse_shape(args.kernel))
    if args.tau is not None:
        params.tau = args.tau
    scenes = _load_scenes(args, args.split)
    rows = []
    for i, scene in enumerate(scenes):
        m = training.evaluate(params, [scene], level=args.level)
        rows.append((f"scene_{i:04d}", m))
        print(f"  {rows[-1][0]}: precision {m.precision:.4f} recall {m.recall:.4f} iou {m.iou:.4f}")
    total = training.evaluate(params, scenes, level=args.level)
    print(f"{args.split} ({args.level} level, {len(scenes)} scenes):"
          f" precision {total.precision:.4f}  recall {total.recall:.4f}  iou {total.iou:.4f}"
          f"  [tp={total.tp} fp={total.fp} fn={total.fn} tn={total.tn}]")
    if args.csv:
        import csv as _csv
        with open(args.csv, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["scene", "tp", "fp", "fn", "tn", "precision", "recall", "iou"])
            for name, m in rows:
                w.writerow([name, m.tp, m.fp, m.fn, m.tn, m.precision, m.recall, m.iou])
            w.writerow(["ALL", total.tp, total.fp, total.fn, total.tn,
                        total.precision, total.recall, total.iou])
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = _resolve(args, "seed", int, PROTOCOL["seed"])
    report = training.run_gradcheck(seed=seed, n_trials=args.trials, corrupt=args.corrupt)
    worst = report["worst"]
    print(f"gradcheck: {report['n_trials']} trials, worst component {worst['name'] or 'n/a'}"
          f" (rel {worst['rel']:.3e}, abs {worst['abs']:.3e}, trial {worst['trial']})")
    if not report["passed"]:
        trial, name, err = report["failures"][0]
        print(f"FAIL: parameter {name} off by {err:.3e} (trial {trial})")
        return 6
    print("PASS: analytic gradients match finite differences")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    params = model.load_checkpoint(_data_path(args.ckpt))
    print(model.inspect(params))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _train_config(args)
    seed = _resolve(args, "seed", int, PROTOCOL["seed"])
    train_scenes = _load_scenes(args, "train")
    val_scenes = _load_scenes(args, "val")
    seeds = tuple(seed + i for i in range(args.seeds))
    results = bench.run_ablation(train_scenes, val_scenes, config, seeds=seeds)
    print(f"{'row':<4}{'cy':>3}{'ar':>3}{'ns':>3}   {'precision':>9} {'recall':>7} {'iou':>7}"
          f"   (mean over {len(seeds)} seeds)")
    for row in bench.ablation_table(results):
        c = row["counts"]
        print(f"{row['row']:<4}{c[0]:>3}{c[1]:>3}{c[2]:>3}   "
              f"{row['precision']:>9.4f} {row['recall']:>7.4f} {row['iou']:>7.4f}")
    if args.csv:
        import csv as _csv
        with open(args.csv, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["row", "n_cy", "n_ar", "n_ns", "seed", "tau",
                        "precision", "recall", "iou"])
            for r in results:
                m = r["metrics"]
                w.writerow([r["row"], *r["counts"], r["seed"], r["tau"],
                            m.precision, m.recall, m.iou])
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    manifest = synth.load_manifest(_data_path(args.data))
    grid_shape = _resolve(args, "grid", _parse_shape, PROTOCOL["grid"])
    scenes = synth.load_split(manifest, args.split, grid_shape)
    if not scenes:
        raise ConfigError(f"manifest has no scenes in split {args.split!r}")
    if args.radius is not None:
        radius = args.radius
    else:
        # dataset-average tower radius expressed in horizontal voxels
        per_scene = [
            entry["tower_radius_m"] / float(np.mean(scene.grid.voxel_size[:2]))
            for entry, scene in zip(
                [e for e in manifest["scenes"] if args.split in ("all", e["split"])], scenes)
        ]
        radius = float(np.mean(per_scene))
    shape = _parse_shape(args.template) if args.template else (9, 9, 9)
    tcfg = bench.TemplateConfig(radius=radius, shape=shape)
    all_scores = []
    all_labels = []
    for i, scene in enumerate(scenes):
        scores, ap = bench.template_match(scene.grid.values, scene.labels.values, tcfg)
        all_scores.append(scores.ravel().astype(np.float32))
        all_labels.append(scene.labels.values.ravel().astype(bool))
        if args.verbose:
            print(f"  scene_{i:04d}: ap {ap:.4f}")
    pooled = bench.average_precision(np.concatenate(all_scores), np.concatenate(all_labels))
    print(f"template radius {radius:.2f} voxels, shape {shape}")
    print(f"template matching AP over {len(scenes)} {args.split} scenes: {pooled:.6f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._filecfg = read_config_file(args.config) if args.config else {}
        threads = _resolve(args, "threads", int, PROTOCOL["threads"])
        workers = threads if threads > 0 else (os.cpu_count() or 1)
        with scipy.fft.set_workers(workers):
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except (NumericalError, DegenerateKernelError, ParameterRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (FormatError, FileNotFoundError, PermissionError, IsADirectoryError,
            json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
