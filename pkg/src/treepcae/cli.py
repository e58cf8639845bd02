"""Command-line entry point tying the pipeline together.

Subcommands: sample, synth, train, encode, decode, recon, interp, complete,
eval. Every run is reproducible from one --seed (or the seed in the run
config); re-running a command with the same inputs produces byte-identical
outputs. Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, meshio, trainer
from .errors import (ConfigError, ContractError, FormatError, GeometryError,
                     NumericError, ParseError, ShapeError)
from .metrics import DEFAULT_TRUNCATION_COUNT, chamfer, fpd, truncated_chamfer
from .model import ModelConfig, TreeAutoencoder, load_checkpoint
from .rng import derive_seed


class UsageError(Exception):
    """Bad flags or bad run config; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise UsageError(message)


# ----------------------------------------------------------------- manifests


def write_manifest(rows, path) -> None:
    """Rows of (id, label, relative path), written as id,label,path CSV."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "label", "path"])
        for row in rows:
            writer.writerow(list(row))


def read_manifest(path) -> list[tuple[str, str, Path]]:
    base = Path(path).parent
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["id", "label", "path"]:
            raise FormatError(f"{path}: expected header id,label,path, got {header}")
        for number, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FormatError(f"{path}:{number}: expected 3 fields, got {len(row)}")
            entries.append((row[0], row[1], base / row[2]))
    if not entries:
        raise FormatError(f"{path}: empty manifest")
    return entries


def load_cloud_set(source) -> list[tuple[str, meshio.PointCloud]]:
    """(id, cloud) pairs from a manifest CSV or a directory of cloud files."""
    source = Path(source)
    if source.is_file():
        items = []
        for item_id, label, path in read_manifest(source):
            cloud = meshio.read_cloud(path)
            cloud.label = label or None
            items.append((item_id, cloud))
        return items
    if source.is_dir():
        files = sorted(p for p in source.iterdir()
                       if p.suffix in (".pcf", ".xyz") and p.is_file())
        if not files:
            raise FormatError(f"{source}: no .pcf or .xyz cloud files")
        return [(p.stem, meshio.read_cloud(p)) for p in files]
    raise FormatError(f"{source}: neither a manifest file nor a directory")


# ---------------------------------------------------------------- run config

_TOP_KEYS = {"seed", "out_dir", "data", "model", "train"}
_DATA_KEYS = {"manifest"}
_TRAIN_KEYS = {"regime", "mode", "learning_rate", "beta1", "beta2", "epsilon",
               "batch_size", "epochs", "augment", "log_interval"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def load_run_config(path, seed=None, out_dir=None, epochs=None):
    """Parse and validate the run-config JSON; CLI flags override its fields."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "run config")
    for key in ("data", "model"):
        if key not in raw:
            raise ConfigError(f"{path}: missing required section {key!r}")
    _reject_unknown(raw["data"], _DATA_KEYS, "data")
    if "manifest" not in raw["data"]:
        raise ConfigError(f"{path}: data.manifest is required")
    _reject_unknown(raw.get("train", {}), _TRAIN_KEYS, "train")

    manifest = (Path(path).parent / raw["data"]["manifest"]).resolve()
    if not manifest.exists():
        raise ConfigError(f"{path}: data.manifest does not exist: {manifest}")

    run_seed = int(seed if seed is not None else raw.get("seed", 0))
    out = out_dir if out_dir is not None else raw.get("out_dir")
    if out is None:
        raise ConfigError(f"{path}: out_dir is required (in the file or via --out-dir)")

    model_config = ModelConfig.from_dict(raw["model"])
    train_kwargs = dict(raw.get("train", {}))
    if epochs is not None:
        train_kwargs["epochs"] = int(epochs)
    train_config = trainer.TrainConfig(seed=derive_seed(run_seed, "train"), **train_kwargs)
    return model_config, train_config, manifest, Path(out), run_seed


# ----------------------------------------------------------------- commands


def cmd_sample(args) -> int:
    mesh_dir = Path(args.mesh_dir)
    if not mesh_dir.is_dir():
        raise FormatError(f"{mesh_dir}: not a directory")
    meshes = sorted(p for p in mesh_dir.rglob("*") if p.suffix.lower() in (".off", ".obj"))
    if not meshes:
        raise FormatError(f"{mesh_dir}: no .off or .obj meshes found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for path in meshes:
        rel = path.relative_to(mesh_dir)
        item_id = "__".join(rel.with_suffix("").parts)
        label = rel.parts[0] if len(rel.parts) > 1 else "default"
        try:
            text = path.read_text(encoding="utf-8")
            mesh = meshio.parse_off(text) if path.suffix.lower() == ".off" \
                else meshio.parse_obj(text)
            cloud = meshio.normalize(
                meshio.sample_surface(mesh, args.n, seed=derive_seed(args.seed,
                                                                     f"sample/{item_id}")))
        except (ParseError, GeometryError, ContractError, UnicodeDecodeError) as exc:
            print(f"skip {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        filename = f"{item_id}.pcf"
        meshio.write_cloud(cloud, out / filename)
        rows.append((item_id, label, filename))
    if not rows:
        raise FormatError(f"{mesh_dir}: every mesh failed to parse or sample")
    write_manifest(rows, out / "manifest.csv")
    print(f"sampled,{len(rows)}")
    print(f"skipped,{failures}")
    return 0


def cmd_synth(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not classes:
        raise UsageError("--classes must name at least one class")
    for kind in classes:
        if kind not in meshio.SYNTH_CLASSES:
            raise UsageError(f"unknown class {kind!r}, pick from {meshio.SYNTH_CLASSES}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clouds = meshio.synth_dataset(classes, args.per_class, args.n, seed=args.seed)
    rows = []
    counters: dict[str, int] = {}
    for cloud in clouds:
        index = counters.get(cloud.label, 0)
        counters[cloud.label] = index + 1
        item_id = f"{cloud.label}_{index:03d}"
        filename = f"{item_id}.pcf"
        meshio.write_cloud(cloud, out / filename)
        rows.append((item_id, cloud.label, filename))
    write_manifest(rows, out / "manifest.csv")
    print(f"generated,{len(rows)}")
    return 0


def _load_model(ckpt_path) -> TreeAutoencoder:
    return TreeAutoencoder.from_checkpoint(load_checkpoint(ckpt_path))


def _check_cloud_size(model: TreeAutoencoder, items) -> None:
    for item_id, cloud in items:
        if len(cloud) != model.config.point_count:
            raise ShapeError(f"cloud {item_id!r} has {len(cloud)} points but the "
                             f"checkpoint expects {model.config.point_count}")


def cmd_train(args) -> int:
    model_config, train_config, manifest, out_dir, run_seed = load_run_config(
        args.config, seed=args.seed, out_dir=args.out_dir, epochs=args.epochs)
    items = load_cloud_set(manifest)
    dataset = [cloud for _, cloud in items]
    optimizer_state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.config != model_config:
            raise ConfigError(f"--resume checkpoint config does not match {args.config}")
        model = TreeAutoencoder.from_checkpoint(ckpt)
        optimizer_state = ckpt.optimizer_state
    else:
        model = TreeAutoencoder(model_config, seed=run_seed)
    result = trainer.train(dataset, model, train_config, out_dir=out_dir,
                           optimizer_state=optimizer_state)
    print(f"best_epoch,{result.best_epoch}")
    print(f"best_epoch_mean_chamfer,{result.epoch_means[result.best_epoch]!r}")
    print(f"final_recon_cd,{result.final_recon_cd!r}")
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args.ckpt)
    items = load_cloud_set(args.clouds)
    _check_cloud_size(model, items)
    count = analysis.export_embeddings(items, model.encode, args.out)
    print(f"encoded,{count}")
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.ckpt)
    records = analysis.read_embeddings(args.embeddings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for record in records:
        if record.vector.size != model.config.embedding_dim:
            raise ShapeError(f"embedding {record.id!r} has {record.vector.size} dims but "
                             f"the checkpoint expects {model.config.embedding_dim}")
        meshio.write_cloud(meshio.PointCloud(model.decode(record.vector)),
                           out / f"{record.id}.xyz")
    print(f"decoded,{len(records)}")
    return 0


def _reconstruct_set(args) -> int:
    model = _load_model(args.ckpt)
    items = load_cloud_set(args.clouds)
    _check_cloud_size(model, items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for item_id, cloud in items:
        meshio.write_cloud(meshio.PointCloud(model.reconstruct(cloud.points)),
                           out / f"{item_id}.xyz")
    print(f"reconstructed,{len(items)}")
    return 0


def cmd_recon(args) -> int:
    return _reconstruct_set(args)


def cmd_complete(args) -> int:
    # inputs are partial clouds; the checkpoint should come from mode=complete
    return _reconstruct_set(args)


def cmd_interp(args) -> int:
    model = _load_model(args.ckpt)
    source = meshio.read_cloud(getattr(args, "from"))
    target = meshio.read_cloud(args.to)
    _check_cloud_size(model, [("--from", source), ("--to", target)])
    z1 = model.encode(source.points)
    z2 = model.encode(target.points)
    frames = analysis.interpolate(z1, z2, args.steps, model.decode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        meshio.write_cloud(meshio.PointCloud(frame), out / f"frame_{i:04d}.pcf")
    print(f"frames,{len(frames)}")
    return 0


def cmd_eval(args) -> int:
    items_a = load_cloud_set(args.a)
    items_b = load_cloud_set(args.b)
    if args.metric == "fpd":
        value = fpd([c for _, c in items_a], [c for _, c in items_b])
        print(f"fpd,{value!r}")
        print(f"mean,{value!r}")
        return 0

    if args.metric == "tcd" and args.k is None:
        raise UsageError(f"--metric tcd requires --k "
                         f"(the conventional count is {DEFAULT_TRUNCATION_COUNT})")
    by_id_a = dict(items_a)
    by_id_b = dict(items_b)
    if set(by_id_a) != set(by_id_b):
        only_a = sorted(set(by_id_a) - set(by_id_b))
        only_b = sorted(set(by_id_b) - set(by_id_a))
        raise FormatError(f"cloud sets do not pair up: only in --a {only_a}, "
                          f"only in --b {only_b}")
    values = []
    for item_id in sorted(by_id_a):
        a, b = by_id_a[item_id], by_id_b[item_id]
        value = (chamfer(a, b) if args.metric == "cd"
                 else truncated_chamfer(a, b, args.k))
        values.append(value)
        print(f"{item_id},{value!r}")
    print(f"mean,{float(np.mean(values))!r}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treepcae",
                     description="Tree-structured graph-convolution point-cloud "
                                 "autoencoder pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", help="sample meshes into normalized point clouds")
    p.add_argument("--mesh-dir", required=True, help="directory of .off/.obj meshes")
    p.add_argument("--out", required=True, help="output directory for clouds + manifest.csv")
    p.add_argument("--n", type=int, default=meshio.DEFAULT_SAMPLE_COUNT,
                   help="points per cloud (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.set_defaults(run=cmd_sample)

    p = sub.add_parser("synth", help="generate synthetic shape clouds")
    p.add_argument("--classes", required=True,
                   help=f"comma-separated classes from {','.join(meshio.SYNTH_CLASSES)}")
    p.add_argument("--per-class", type=int, required=True, help="clouds per class")
    p.add_argument("--out", required=True, help="output directory for clouds + manifest.csv")
    p.add_argument("--n", type=int, default=meshio.DEFAULT_SAMPLE_COUNT,
                   help="points per cloud (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True, help="run-config JSON path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out-dir", default=None, help="override config out_dir")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("encode", help="encode clouds into an embedding CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--clouds", required=True, help="cloud directory or manifest.csv")
    p.add_argument("--out", required=True, help="output embeddings CSV")
    p.set_defaults(run=cmd_encode)

    p = sub.add_parser("decode", help="decode an embedding CSV into clouds")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--embeddings", required=True, help="embeddings CSV path")
    p.add_argument("--out", required=True, help="output cloud directory")
    p.set_defaults(run=cmd_decode)

    p = sub.add_parser("recon", help="encode + decode clouds (reconstruction)")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--clouds", required=True, help="cloud directory or manifest.csv")
    p.add_argument("--out", required=True, help="output cloud directory")
    p.set_defaults(run=cmd_recon)

    p = sub.add_parser("interp", help="decode the latent line between two clouds")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--from", required=True, help="source cloud file")
    p.add_argument("--to", required=True, help="target cloud file")
    p.add_argument("--steps", type=int, default=8,
                   help="number of frames (default: %(default)s)")
    p.add_argument("--out", required=True, help="output directory for frame_*.pcf")
    p.set_defaults(run=cmd_interp)

    p = sub.add_parser("complete", help="reconstruct full clouds from partial inputs")
    p.add_argument("--ckpt", required=True, help="checkpoint path (trained in complete mode)")
    p.add_argument("--clouds", required=True, help="partial-cloud directory or manifest.csv")
    p.add_argument("--out", required=True, help="output cloud directory")
    p.set_defaults(run=cmd_complete)

    p = sub.add_parser("eval", help="compare two cloud sets; prints name,value CSV")
    p.add_argument("--metric", required=True, choices=("cd", "tcd", "fpd"))
    p.add_argument("--a", required=True, help="first cloud directory or manifest.csv")
    p.add_argument("--b", required=True, help="second cloud directory or manifest.csv")
    p.add_argument("--k", type=int, default=None,
                   help="truncation count for tcd; required with --metric tcd "
                        f"(the conventional count is {DEFAULT_TRUNCATION_COUNT})")
    p.set_defaults(run=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, FormatError, ShapeError, GeometryError, ContractError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
