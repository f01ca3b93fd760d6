"""Config-driven pipeline: ``hetfed profile|cluster|partition|simulate|report``.

Exit codes: 0 on success, 1 on a pipeline or domain error, 2 when the
config cannot be parsed or is structurally invalid.

Seeds: the config's top-level ``seed`` (or ``--seed``) is the partition
seed.  Repeat ``r`` of a simulation trains with seed ``seed + r``.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import ingest
from .clustering import Linkage, SuperClustering, agglomerative_cluster, suggest_threshold
from .flsim import MLP, Algorithm, SoftmaxRegression, TrainConfig, finetune_and_evaluate, run_federation
from .measures import ClientMeasure, avg_pairwise_client_distance, summary_table_csv
from .partition import Method, Partition, PartitionSpec, make_partition
from .signature import (
    Measure,
    ProximityMatrix,
    class_signatures,
    dataset_signature,
    proximity_eq2,
    proximity_eq3,
)

SECTIONS = ("dataset", "signature", "clustering", "partition", "federation", "output")
TRAIN_FIELDS = (
    "learning_rate", "momentum", "weight_decay", "batch_size", "local_epochs", "rounds",
    "client_fraction", "mu", "ifca_clusters", "lg_local_layers", "finetune_epochs", "workers",
)


class ConfigError(Exception):
    pass


class PipelineError(Exception):
    pass


# ------------------------------------------------------------------- config ---

def load_config(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for s in SECTIONS:
        if s in cfg and not isinstance(cfg[s], dict):
            raise ConfigError(f"[{s}] must be a table")
    cfg["_base"] = Path(path).resolve().parent
    return cfg


def _section(cfg: dict, name: str) -> dict:
    return cfg.get(name, {})


def _seed(cfg: dict, override: Optional[int]) -> int:
    seed = override if override is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def _out_dir(cfg: dict, override: Optional[str]) -> Path:
    out = Path(override) if override else Path(_section(cfg, "output").get("dir", "hetfed-out"))
    if not out.is_absolute() and not override:
        out = cfg["_base"] / out
    return out


def _methods(cfg: dict) -> list[Method]:
    part = _section(cfg, "partition")
    raw = part.get("methods", [part["method"]] if "method" in part else None)
    if not raw:
        raise ConfigError("[partition] needs `method` or `methods`")
    try:
        return [Method(m) for m in raw]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ----------------------------------------------------------------- datasets ---

def _resolve(root: Optional[Path], base: Path, p: str) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    return (root or base) / path


def _require(paths: Sequence[Path]) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise PipelineError("missing dataset files: " + ", ".join(missing))


def load_dataset(dcfg: dict, base: Path) -> ingest.DatasetView:
    """Build a view from one ``[dataset]``-style table."""
    fmt = dcfg.get("format")
    if fmt is None:
        raise ConfigError("dataset table needs a `format`")
    root = ingest.data_root(dcfg.get("root"))
    name = dcfg.get("name", fmt)
    if fmt == "synthetic":
        s = dict(dcfg.get("synthetic", {}))
        try:
            view = ingest.synth_superclusters(
                num_clusters=s.get("num_clusters", 2),
                classes_per_cluster=s.get("classes_per_cluster", 2),
                samples_per_class=s.get("samples_per_class", 200),
                ambient_dim=s.get("ambient_dim", 32),
                within_angle=s.get("within_angle", 20.0),
                across_angle=s.get("across_angle", 80.0),
                noise=s.get("noise", 0.05),
                seed=s.get("seed", 0),
                class_dim=s.get("class_dim", 2),
                test_per_class=s.get("test_per_class", 0),
            )
        except TypeError as exc:
            raise ConfigError(f"bad synthetic parameters: {exc}") from None
    elif fmt == "cifar10":
        if "paths" in dcfg:
            train = [_resolve(root, base, p) for p in dcfg["paths"]]
            test = [_resolve(root, base, p) for p in dcfg.get("test_paths", [])]
        else:
            if root is None:
                raise PipelineError(f"no dataset root: set `root` or ${ingest.DATA_ROOT_ENV}")
            train, test = ingest.cifar10_paths(root)
            test = [t for t in test if t.exists()]
        _require(train + test)
        view = ingest.load_cifar10_binary(train, test, name=name)
    elif fmt == "idx":
        keys = ("images", "labels", "test_images", "test_labels")
        paths = {k: _resolve(root, base, dcfg[k]) for k in keys if k in dcfg}
        if "images" not in paths or "labels" not in paths:
            raise ConfigError("idx dataset needs `images` and `labels`")
        _require(list(paths.values()))
        view = ingest.load_idx(paths["images"], paths["labels"], paths.get("test_images"),
                               paths.get("test_labels"), dcfg.get("num_classes", 10), name)
    elif fmt == "csv":
        if "path" not in dcfg or "image_shape" not in dcfg:
            raise ConfigError("csv dataset needs `path` and `image_shape`")
        path = _resolve(root, base, dcfg["path"])
        test = _resolve(root, base, dcfg["test_path"]) if "test_path" in dcfg else None
        _require([path] + ([test] if test else []))
        view = ingest.load_csv(path, dcfg.get("num_classes", 10), tuple(dcfg["image_shape"]), test, name)
    elif fmt == "mix":
        members = dcfg.get("members")
        if not members:
            raise ConfigError("mix dataset needs [[dataset.members]]")
        views = [ingest.to_common_dim(load_dataset(m, base)) for m in members]
        view, _, _ = ingest.concat_views(views, name)
        return view
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    if dcfg.get("common_dim", False):
        view = ingest.to_common_dim(view)
    return view


def _mix_members(cfg: dict) -> list[ingest.DatasetView]:
    d = _section(cfg, "dataset")
    return [ingest.to_common_dim(load_dataset(m, cfg["_base"])) for m in d["members"]]


# ----------------------------------------------------------------- commands ---

def cmd_profile(cfg: dict, out: Path, seed: int) -> None:
    p = int(_section(cfg, "signature").get("p", 2))
    view = load_dataset(_section(cfg, "dataset"), cfg["_base"])
    sigs = class_signatures(view, p)
    proximity_eq2(sigs).to_csv(out / "class_proximity_eq2.csv")
    proximity_eq3(sigs).to_csv(out / "class_proximity_eq3.csv")
    written = ["class_proximity_eq2.csv", "class_proximity_eq3.csv"]
    others = _section(cfg, "dataset").get("compare", [])
    if others:
        views = [view] + [load_dataset(o, cfg["_base"]) for o in others]
        if len({v.dim for v in views}) != 1:
            raise PipelineError("datasets differ in dimension; set common_dim = true")
        dsigs = [dataset_signature(v, p) for v in views]
        proximity_eq2(dsigs).to_csv(out / "dataset_proximity_eq2.csv")
        proximity_eq3(dsigs).to_csv(out / "dataset_proximity_eq3.csv")
        written += ["dataset_proximity_eq2.csv", "dataset_proximity_eq3.csv"]
    print(f"profile: {view.name}, {view.num_classes} classes, p={p} -> {', '.join(written)}")


def cmd_cluster(cfg: dict, out: Path, seed: int) -> None:
    c = _section(cfg, "clustering")
    measure = Measure(_section(cfg, "signature").get("measure", "EQ2"))
    src = c.get("proximity")
    path = _resolve(None, cfg["_base"], src) if src else out / f"class_proximity_{measure.value.lower()}.csv"
    if not path.exists():
        raise PipelineError(f"missing proximity matrix: {path} (run `hetfed profile` first)")
    prox = _read_proximity(path, measure)
    linkage = Linkage(c.get("linkage", "AVERAGE"))
    threshold = c.get("threshold", "AUTO")
    if isinstance(threshold, str):
        if threshold.upper() != "AUTO":
            raise ConfigError(f"threshold must be a number or AUTO, got {threshold!r}")
        threshold = suggest_threshold(prox, linkage)
    sc = agglomerative_cluster(prox, float(threshold), linkage)
    sc.to_json(out / "superclustering.json")
    print(f"cluster: threshold {sc.threshold:.6f}, {sc.num_clusters} super clusters {sc.clusters}")


def _read_proximity(path: Path, measure: Measure):
    try:
        prox = ProximityMatrix.from_csv(path, measure)
        prox.check_symmetric(atol=1e-5)
    except ValueError as exc:
        raise PipelineError(f"{path}: {exc}") from None
    return prox


def _superclustering(cfg: dict, out: Path) -> SuperClustering:
    explicit = _section(cfg, "clustering").get("clusters")
    if explicit is not None:
        return SuperClustering.from_clusters(explicit)
    path = out / "superclustering.json"
    if not path.exists():
        raise PipelineError(f"missing {path} (run `hetfed cluster` or set clustering.clusters)")
    return SuperClustering.from_json(path)


def _spec(cfg: dict, method: Method, seed: int, out: Path) -> PartitionSpec:
    part = _section(cfg, "partition")
    sc = _superclustering(cfg, out) if method in (Method.SC_NIID, Method.SC_DIR) else None
    layout = part.get("mix_layout")
    num = part.get("num_clients")
    if method is Method.MIX:
        if not layout:
            raise ConfigError("MIX needs partition.mix_layout")
        num = sum(int(r[-3]) for r in layout)
    if num is None:
        raise ConfigError("[partition] needs num_clients")
    try:
        return PartitionSpec(
            method, int(num), seed,
            labels_per_client=part.get("labels_per_client"),
            alpha=part.get("alpha"),
            shards_per_client=int(part.get("shards_per_client", 2)),
            superclustering=sc,
            mix_layout=tuple(tuple(r) for r in layout) if layout else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _measure_names(cfg: dict) -> list[ClientMeasure]:
    raw = _section(cfg, "partition").get("measures", ["EMD", "EQ2", "EQ3", "CKA"])
    try:
        return [ClientMeasure(m) for m in raw]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_partition(cfg: dict, out: Path, seed: int) -> None:
    view = load_dataset(_section(cfg, "dataset"), cfg["_base"])
    p = int(_section(cfg, "signature").get("p", 2))
    measures = _measure_names(cfg)
    for method in _methods(cfg):
        spec = _spec(cfg, method, seed, out)
        source = _mix_members(cfg) if method is Method.MIX else view
        part = make_partition(spec, source)
        part.validate(view.train_labels)
        part.to_json(out / f"partition_{method.value}.json")
        with open(out / f"measures_{method.value}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["measure", "value"])
            for m in measures:
                w.writerow([m.value, f"{avg_pairwise_client_distance(part, view, m, p):.6f}"])
        line = f"partition: {method.value}, {part.num_clients} clients"
        if part.supercluster_of_client is not None:
            counts = np.bincount(part.supercluster_of_client).tolist()
            line += f", per-cluster client counts {counts}"
        print(line)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    fed = _section(cfg, "federation")
    kwargs = {k: fed[k] for k in TRAIN_FIELDS if k in fed}
    try:
        return TrainConfig(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[federation] {exc}") from None


def _architecture(cfg: dict, view: ingest.DatasetView, part: Partition):
    fed = _section(cfg, "federation")
    kind = fed.get("architecture", "softmax").lower()
    classes = max(view.num_classes, part.num_classes)
    if kind == "softmax":
        return SoftmaxRegression(view.dim, classes)
    if kind == "mlp":
        return MLP(view.dim, int(fed.get("hidden", 64)), classes)
    raise ConfigError(f"unknown architecture {kind!r}")


def cmd_simulate(cfg: dict, out: Path, seed: int) -> None:
    fed = _section(cfg, "federation")
    try:
        algorithms = [Algorithm(a) for a in fed.get("algorithms", ["FEDAVG"])]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    repeats = int(fed.get("repeat_seeds", 1))
    if repeats < 1:
        raise ConfigError("repeat_seeds must be >= 1")
    methods = _methods(cfg)
    manifests = [out / f"partition_{m.value}.json" for m in methods]
    missing = [str(p) for p in manifests if not p.exists()]
    if missing:
        raise PipelineError("missing partition manifests: " + ", ".join(missing))
    _train_config(cfg, seed)  # surface config errors before any work
    view = load_dataset(_section(cfg, "dataset"), cfg["_base"])
    for method, manifest in zip(methods, manifests):
        part = Partition.from_json(manifest)
        part.validate(view.train_labels)
        arch = _architecture(cfg, view, part)
        summary = []
        with open(out / f"rounds_{method.value}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "client_id", "algorithm", "train_loss", "local_test_acc",
                        "seed", "aggregation"])
            for alg in algorithms:
                finals = []
                for r in range(repeats):
                    tcfg = _train_config(cfg, (seed + r) % 2**64)
                    result = run_federation(alg, part, view, tcfg, arch)
                    for log in result.logs:
                        for cid in log.selected:
                            w.writerow([log.round, cid, alg.value, f"{log.train_loss[cid]:.6f}",
                                        f"{log.local_test_acc[cid]:.6f}", tcfg.seed, log.aggregation])
                    fh.flush()
                    finals.append(finetune_and_evaluate(result, part, view, tcfg).mean_accuracy)
                summary.append((alg, finals))
        with open(out / f"summary_{method.value}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["algorithm", "method", "mean", "std", "seeds", "per_seed"])
            for alg, finals in summary:
                w.writerow([alg.value, method.value, f"{np.mean(finals):.6f}", f"{np.std(finals):.6f}",
                            len(finals), ";".join(f"{v:.6f}" for v in finals)])
        print(f"simulate: {method.value}, " + ", ".join(
            f"{a.value} {np.mean(f):.4f}" for a, f in summary))


def cmd_report(cfg: dict, out: Path, seed: int) -> None:
    methods = [m.value for m in _methods(cfg)]
    expected = [out / f"measures_{m}.csv" for m in methods] + [out / f"summary_{m}.csv" for m in methods]
    missing = [p for p in expected if not p.exists()]
    if missing:
        raise PipelineError("missing inputs:\n" + "\n".join(f"  {p}" for p in missing))
    measures: dict = {}
    for m in methods:
        with open(out / f"measures_{m}.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                measures.setdefault(row["measure"], {})[m] = float(row["value"])
    summary_table_csv(measures, methods, out / "table_measures.csv")
    cells: dict = {}
    for m in methods:
        with open(out / f"summary_{m}.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                cells.setdefault(row["algorithm"], {})[m] = (float(row["mean"]), float(row["std"]))
    with open(out / "table_accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", *methods])
        for alg, row in cells.items():
            w.writerow([alg, *[f"{row[m][0]:.4f} ± {row[m][1]:.4f}" if m in row else "" for m in methods]])
    print(f"report: table_measures.csv, table_accuracy.csv ({len(cells)} algorithms x {len(methods)} methods)")


COMMANDS = {
    "profile": cmd_profile,
    "cluster": cmd_cluster,
    "partition": cmd_partition,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetfed", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML experiment config")
    ap.add_argument("--out", help="output directory (overrides [output] dir)")
    ap.add_argument("--seed", type=_u64, help="override the config seed")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = _seed(cfg, args.seed)
        out = _out_dir(cfg, args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, seed)
    except ConfigError as exc:
        print(f"hetfed: config error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"hetfed: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
