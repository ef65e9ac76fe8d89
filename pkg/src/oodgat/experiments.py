"""Experiment harness: spec files, named runners, seeding, and exports.

A spec file is plain INI text. The [dataset] section names either a
bundle directory or a block-model recipe; [model], [train], [loss], and
[grid] override defaults. Every runner expands into independent
(condition, split, seed) tasks, executes them sequentially or in a
process pool, and assembles a RunReport whose per-run records are
byte-stable across re-runs.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, engine, metrics
from .engine import Tensor, grad_check
from .errors import ConfigError, OodgatError, TrainingAbort
from .graphs import (
    Graph,
    SbmSpec,
    er_generate,
    filter_edges,
    identity_homophily,
    load_graph_bundle,
    make_graph,
    make_splits,
    node_homophily,
    relabel_for_training,
    save_graph_bundle,
    sbm_generate,
)
from .layers import ModelConfig, graph_index, init_params, maybe_sparse_features, model_forward
from .losses import LossWeights, compute_objective
from .training import TrainConfig, expand_space, apply_assignment, train

EXPERIMENT_NAMES = ("train-eval", "edge-ablation", "smoothing-roc", "ablate-losses",
                    "gridsearch", "gen-sbm", "gradcheck", "homophily-check")

# seeding scheme: one stream per split, one per (split, seed) pair
SPLIT_SEED_STRIDE = 7919
TRAIN_SEED_STRIDE = 104729

HISTORY_COLUMNS = ("step", "ce", "con", "ent", "dis", "decay", "total",
                   "val_accuracy", "val_auroc", "composite")

# the seven regularizer on/off rows of the loss ablation, in report order
ABLATION_ROWS = (
    ("ce", 0, 0, 0),
    ("ce+con", 1, 0, 0),
    ("ce+ent", 0, 1, 0),
    ("ce+dis", 0, 0, 1),
    ("ce+con+ent", 1, 1, 0),
    ("ce+con+dis", 1, 0, 1),
    ("full", 1, 1, 1),
)


def run_seeds(seed_base: int, split_idx: int, seed_idx: int) -> tuple[int, int]:
    split_seed = int(seed_base) + SPLIT_SEED_STRIDE * (split_idx + 1)
    return split_seed, split_seed + TRAIN_SEED_STRIDE * (seed_idx + 1)


# ---------------------------------------------------------------------------
# dataset recipes

# a recipe is a small picklable value each worker can resolve on its own:
#   ("bundle", path string, sorted ood-class tuple)
#   ("sbm", SbmSpec, generator seed)
_GRAPH_CACHE: dict = {}


def clear_graph_cache() -> None:
    _GRAPH_CACHE.clear()


def resolve_graph(recipe: tuple, edge_filter: tuple | None = None) -> Graph:
    """Materialize a dataset recipe, relabeled for training, with an
    optional (keep-classes, fraction, seed) edge filter applied."""
    base_key = (recipe, None)
    if base_key not in _GRAPH_CACHE:
        kind = recipe[0]
        if kind == "bundle":
            graph = load_graph_bundle(recipe[1], recipe[2])
        elif kind == "sbm":
            graph = sbm_generate(recipe[1], recipe[2])
        else:
            raise ConfigError(f"unknown dataset recipe kind {kind!r}")
        _GRAPH_CACHE[base_key], _ = relabel_for_training(graph)
    if edge_filter is None:
        return _GRAPH_CACHE[base_key]
    key = (recipe, edge_filter)
    if key not in _GRAPH_CACHE:
        keep, fraction, seed = edge_filter
        _GRAPH_CACHE[key] = filter_edges(_GRAPH_CACHE[base_key], set(keep),
                                         fraction, seed)
    return _GRAPH_CACHE[key]


# ---------------------------------------------------------------------------
# spec files


@dataclass
class ExperimentSpec:
    name: str
    dataset: tuple
    model: ModelConfig
    train: TrainConfig
    splits: int = 3
    seeds_per_split: int = 3
    grid: dict | None = None
    config: dict = field(default_factory=dict)   # resolved, JSON-ready


def _num(token: str):
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        try:
            return float(token)
        except ValueError:
            raise ConfigError(f"expected a number, got {token!r}") from None


def _bool(token: str) -> bool:
    low = token.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {token!r}")


def _int_list(token: str) -> list[int]:
    return [int(p) for p in token.split(",") if p.strip()]


def _grid_value(token: str):
    """Grid candidates are numbers where possible, bare strings otherwise."""
    token = token.strip()
    try:
        return _num(token)
    except ConfigError:
        return token


def _section(parser: configparser.ConfigParser, name: str,
             allowed: set[str]) -> dict[str, str]:
    if not parser.has_section(name):
        return {}
    items = dict(parser.items(name))
    unknown = set(items) - allowed
    if unknown:
        raise ConfigError(f"[{name}] has unknown key(s): {sorted(unknown)}")
    return items


def parse_spec(path, expected_name: str | None = None) -> ExperimentSpec:
    """Read an INI spec file and resolve every config object.

    The dataset is loaded once here so the ID class count (and with it
    the classifier width) comes from the data rather than the file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"bad spec file {path}: {exc}") from None

    known_sections = {"experiment", "dataset", "model", "train", "loss", "grid"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s) in {path}: {sorted(unknown)}")

    exp = _section(parser, "experiment", {"name", "splits", "seeds_per_split"})
    name = exp.get("name", expected_name)
    if name is None:
        raise ConfigError("experiment name missing: put name= under [experiment]")
    if expected_name is not None and name != expected_name:
        raise ConfigError(f"spec names experiment {name!r} but {expected_name!r} was requested")
    if name not in EXPERIMENT_NAMES:
        raise ConfigError(f"unknown experiment {name!r}; valid: {EXPERIMENT_NAMES}")
    splits = int(exp.get("splits", 3))
    seeds_per_split = int(exp.get("seeds_per_split", 3))
    if splits < 1 or seeds_per_split < 1:
        raise ConfigError("splits and seeds_per_split must be >= 1")

    ds = _section(parser, "dataset",
                  {"kind", "path", "ood_classes", "classes", "nodes_per_class",
                   "p_intra", "p_inter", "feature_dim", "class_mean_separation",
                   "seed"})
    if not ds:
        raise ConfigError("spec needs a [dataset] section")
    kind = ds.get("kind")
    if kind == "bundle":
        if "path" not in ds or "ood_classes" not in ds:
            raise ConfigError("[dataset] kind=bundle needs path= and ood_classes=")
        bundle = Path(ds["path"])
        if not bundle.is_absolute():
            bundle = path.parent / bundle
        ood = tuple(sorted(_int_list(ds["ood_classes"])))
        recipe = ("bundle", str(bundle), ood)
        dataset_cfg = {"kind": "bundle", "path": str(bundle), "ood_classes": list(ood)}
    elif kind == "sbm":
        needed = {"classes", "nodes_per_class", "p_intra", "p_inter",
                  "feature_dim", "class_mean_separation", "ood_classes"}
        missing = needed - set(ds)
        if missing:
            raise ConfigError(f"[dataset] kind=sbm missing key(s): {sorted(missing)}")
        sbm = SbmSpec(classes=int(ds["classes"]),
                      nodes_per_class=int(ds["nodes_per_class"]),
                      p_intra=float(ds["p_intra"]), p_inter=float(ds["p_inter"]),
                      feature_dim=int(ds["feature_dim"]),
                      class_mean_separation=float(ds["class_mean_separation"]),
                      ood_classes=frozenset(_int_list(ds["ood_classes"])))
        recipe = ("sbm", sbm, int(ds.get("seed", 0)))
        dataset_cfg = {"kind": "sbm", "classes": sbm.classes,
                       "nodes_per_class": sbm.nodes_per_class,
                       "p_intra": sbm.p_intra, "p_inter": sbm.p_inter,
                       "feature_dim": sbm.feature_dim,
                       "class_mean_separation": sbm.class_mean_separation,
                       "ood_classes": sorted(sbm.ood_classes),
                       "seed": int(ds.get("seed", 0))}
    else:
        raise ConfigError("[dataset] kind must be 'bundle' or 'sbm'")

    graph = resolve_graph(recipe)
    num_classes = int((np.unique(graph.labels[graph.identity == 0])).size)

    mo = _section(parser, "model", {"architecture", "heads", "hidden_dim", "activation"})
    model = ModelConfig(architecture=mo.get("architecture", "gcn"),
                        num_classes=num_classes,
                        hidden_dim=int(mo.get("hidden_dim", 0)),
                        heads=int(mo.get("heads", 1)),
                        activation=mo.get("activation", "elu"))

    lo = _section(parser, "loss", {"beta", "gamma", "zeta", "epsilon", "a", "b",
                                   "detach_consistency_target"})
    loss_kwargs = {k: float(v) for k, v in lo.items()
                   if k != "detach_consistency_target"}
    if "detach_consistency_target" in lo:
        loss_kwargs["detach_consistency_target"] = _bool(lo["detach_consistency_target"])
    weights = LossWeights(**loss_kwargs)

    tr = _section(parser, "train", {"lr", "weight_decay", "dropout_p",
                                    "drop_edge_p", "max_steps", "patience"})
    train_cfg = TrainConfig(lr=float(tr.get("lr", 0.01)),
                            weight_decay=float(tr.get("weight_decay", 5e-4)),
                            dropout_p=float(tr.get("dropout_p", 0.0)),
                            drop_edge_p=float(tr.get("drop_edge_p", 0.0)),
                            max_steps=int(tr.get("max_steps", 1000)),
                            patience=int(tr.get("patience", 200)),
                            loss_weights=weights)

    grid = None
    if parser.has_section("grid"):
        grid = {k: [_grid_value(tok) for tok in v.split(",") if tok.strip()]
                for k, v in parser.items("grid")}
        expand_space(grid)  # validates field names and non-emptiness

    config = {
        "experiment": name, "splits": splits, "seeds_per_split": seeds_per_split,
        "dataset": dataset_cfg,
        "model": {"architecture": model.architecture, "num_classes": model.num_classes,
                  "hidden_dim": model.hidden_dim, "heads": model.heads,
                  "activation": model.activation},
        "train": {"lr": train_cfg.lr, "weight_decay": train_cfg.weight_decay,
                  "dropout_p": train_cfg.dropout_p, "drop_edge_p": train_cfg.drop_edge_p,
                  "max_steps": train_cfg.max_steps, "patience": train_cfg.patience},
        "loss": {"beta": weights.beta, "gamma": weights.gamma, "zeta": weights.zeta,
                 "epsilon": weights.epsilon, "a": weights.a, "b": weights.b,
                 "detach_consistency_target": weights.detach_consistency_target},
        "grid": grid,
    }
    return ExperimentSpec(name=name, dataset=recipe, model=model, train=train_cfg,
                          splits=splits, seeds_per_split=seeds_per_split,
                          grid=grid, config=config)


# ---------------------------------------------------------------------------
# run records and reports


@dataclass
class RunRecord:
    run_id: str
    condition: str
    split_idx: int
    seed_idx: int
    split_seed: int
    train_seed: int
    metrics: dict


@dataclass
class RunReport:
    experiment: str
    version: str
    config: dict
    runs: list
    aggregates: dict    # condition -> metric -> {"mean": x, "std": y}


def aggregate_runs(runs: list[RunRecord]) -> dict:
    """Per-condition mean/std (population) for every metric.

    Threshold metrics can be infinite (a run whose best operating point
    rejects nothing), so their aggregates may be inf/nan; that is
    reported as-is rather than masked.
    """
    out: dict = {}
    conditions = sorted({r.condition for r in runs})
    for cond in conditions:
        rows = [r.metrics for r in runs if r.condition == cond]
        names = sorted({k for m in rows for k in m})
        out[cond] = {}
        for name in names:
            vals = np.array([m[name] for m in rows if name in m], dtype=float)
            with np.errstate(invalid="ignore"):
                out[cond][name] = {"mean": float(vals.mean()),
                                   "std": float(vals.std(ddof=0))}
    return out


# ---------------------------------------------------------------------------
# task execution


@dataclass(frozen=True)
class RunTask:
    run_id: str
    condition: str
    split_idx: int
    seed_idx: int
    split_seed: int
    dataset: tuple
    edge_filter: tuple | None
    model: ModelConfig
    train: TrainConfig      # seed already set to the run's train seed
    want_curves: bool = False


@dataclass
class RunOutcome:
    record: RunRecord
    history_rows: list
    curves: dict            # tag -> roc point array


def evaluate_run(trained, graph: Graph, splits, history, want_curves: bool):
    """Test-split metrics for one trained model, plus optional ROC points."""
    out = model_forward(trained.config, trained.params,
                        maybe_sparse_features(graph.features), graph_index(graph))
    test = splits.test_mask
    vals: dict = {"accuracy": metrics.accuracy(out.probs.values, graph.labels,
                                               test & (graph.identity == 0))}
    curves: dict = {}
    for kind, tag in (("entropy", "ent"), ("attention", "att")):
        if kind == "attention" and out.att_score is None:
            continue
        s = metrics.ood_scores(out, kind, graph.identity, test)
        vals[f"auroc_{tag}"] = metrics.auroc(s)
        vals[f"aupr_{tag}"] = metrics.aupr(s)
        vals[f"fpr95_{tag}"] = metrics.fpr_at_tpr(s)
        f1, thr = metrics.joint_f1(out.probs.values, s, graph.labels, test)
        vals[f"joint_f1_{tag}"] = f1
        vals[f"joint_thr_{tag}"] = float(thr)
        if want_curves:
            curves[tag] = metrics.roc_points(s)
    vals["best_step"] = float(history.best_step)
    vals["steps_run"] = float(len(history.steps))
    vals["best_val_composite"] = float(history.best_composite)
    return {k: float(v) for k, v in vals.items()}, curves


def _run_single(task: RunTask) -> RunOutcome:
    try:
        graph = resolve_graph(task.dataset, task.edge_filter)
        splits = make_splits(graph, seed=task.split_seed)
        trained, history = train(task.model, graph, splits, task.train)
        vals, curves = evaluate_run(trained, graph, splits, history,
                                    task.want_curves)
    except TrainingAbort as exc:
        raise TrainingAbort(f"[{task.run_id}] {exc}", exc.step, exc.breakdown) from None
    except OodgatError as exc:
        raise type(exc)(f"[{task.run_id}] {exc}") from None
    rows = [(s.step, s.losses.ce, s.losses.con, s.losses.ent, s.losses.dis,
             s.losses.decay, s.losses.total, s.val_accuracy, s.val_auroc,
             s.composite) for s in history.steps]
    record = RunRecord(run_id=task.run_id, condition=task.condition,
                       split_idx=task.split_idx, seed_idx=task.seed_idx,
                       split_seed=task.split_seed, train_seed=task.train.seed,
                       metrics=vals)
    return RunOutcome(record=record, history_rows=rows, curves=curves)


def execute_tasks(tasks: list[RunTask], workers: int = 1) -> list[RunOutcome]:
    """Run tasks in input order; a process pool preserves that order."""
    if workers <= 1:
        return [_run_single(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_single, tasks))


def _tasks_for(spec: ExperimentSpec, seed_base: int, condition: str,
               model: ModelConfig, train_cfg: TrainConfig,
               edge_filter_fn=None, want_curves: bool = False) -> list[RunTask]:
    tasks = []
    for split_idx in range(spec.splits):
        for seed_idx in range(spec.seeds_per_split):
            split_seed, train_seed = run_seeds(seed_base, split_idx, seed_idx)
            tasks.append(RunTask(
                run_id=f"{condition}-s{split_idx}r{seed_idx}",
                condition=condition, split_idx=split_idx, seed_idx=seed_idx,
                split_seed=split_seed, dataset=spec.dataset,
                edge_filter=edge_filter_fn(split_seed) if edge_filter_fn else None,
                model=model, train=replace(train_cfg, seed=train_seed),
                want_curves=want_curves))
    return tasks


# ---------------------------------------------------------------------------
# exports


def _fmt(x) -> str:
    return repr(float(x))


def report_to_jsonl(report: RunReport) -> str:
    lines = [json.dumps({"kind": "header", "experiment": report.experiment,
                         "version": report.version, "config": report.config},
                        sort_keys=True)]
    for r in report.runs:
        lines.append(json.dumps({"kind": "run", "run_id": r.run_id,
                                 "condition": r.condition,
                                 "split_idx": r.split_idx, "seed_idx": r.seed_idx,
                                 "split_seed": r.split_seed,
                                 "train_seed": r.train_seed,
                                 "metrics": r.metrics}, sort_keys=True))
    for cond in sorted(report.aggregates):
        lines.append(json.dumps({"kind": "aggregate", "condition": cond,
                                 "metrics": report.aggregates[cond]},
                                sort_keys=True))
    return "\n".join(lines) + "\n"


def parse_report_jsonl(text: str) -> RunReport:
    header = None
    runs: list[RunRecord] = []
    aggregates: dict = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj["kind"] == "header":
            header = obj
        elif obj["kind"] == "run":
            runs.append(RunRecord(run_id=obj["run_id"], condition=obj["condition"],
                                  split_idx=obj["split_idx"], seed_idx=obj["seed_idx"],
                                  split_seed=obj["split_seed"],
                                  train_seed=obj["train_seed"],
                                  metrics=obj["metrics"]))
        elif obj["kind"] == "aggregate":
            aggregates[obj["condition"]] = obj["metrics"]
        else:
            raise ConfigError(f"unknown record kind {obj['kind']!r}")
    if header is None:
        raise ConfigError("report has no header record")
    return RunReport(experiment=header["experiment"], version=header["version"],
                     config=header["config"], runs=runs, aggregates=aggregates)


def report_to_csv(report: RunReport) -> str:
    names = sorted({k for r in report.runs for k in r.metrics})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_id", "condition", "split_idx", "seed_idx",
                     "split_seed", "train_seed", *names])
    for r in report.runs:
        writer.writerow([r.run_id, r.condition, r.split_idx, r.seed_idx,
                         r.split_seed, r.train_seed,
                         *(_fmt(r.metrics[n]) if n in r.metrics else ""
                           for n in names)])
    for cond in sorted(report.aggregates):
        agg = report.aggregates[cond]
        writer.writerow(["mean", cond, "", "", "", "",
                         *(_fmt(agg[n]["mean"]) if n in agg else ""
                           for n in names)])
    return buf.getvalue()


def report_text_table(report: RunReport) -> str:
    """Per-condition mean +/- std rows, one column per metric."""
    names = sorted({k for r in report.runs for k in r.metrics})
    if not names:
        return f"{report.experiment}: no runs\n"
    cells = {}
    for cond, agg in report.aggregates.items():
        cells[cond] = {n: f"{agg[n]['mean']:.4f}+-{agg[n]['std']:.4f}"
                       for n in names if n in agg}
    widths = {n: max(len(n), *(len(cells[c].get(n, "")) for c in cells))
              for n in names}
    cond_w = max(len("condition"), *(len(c) for c in cells))
    lines = [" | ".join(["condition".ljust(cond_w)]
                        + [n.ljust(widths[n]) for n in names])]
    lines.append("-+-".join(["-" * cond_w] + ["-" * widths[n] for n in names]))
    for cond in sorted(cells):
        lines.append(" | ".join([cond.ljust(cond_w)]
                                + [cells[cond].get(n, "").ljust(widths[n])
                                   for n in names]))
    return "\n".join(lines) + "\n"


def export_report(report: RunReport, out_dir,
                  formats: tuple = ("json-lines", "csv", "text-table")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    renderers = {"json-lines": ("report.jsonl", report_to_jsonl),
                 "csv": ("report.csv", report_to_csv),
                 "text-table": ("report.txt", report_text_table)}
    for fmt in formats:
        if fmt not in renderers:
            raise ConfigError(f"unknown export format {fmt!r}")
        name, render = renderers[fmt]
        target = out / name
        target.write_text(render(report), encoding="utf-8", newline="\n")
        written.append(target)
    return written


def _write_run_files(outcomes: list[RunOutcome], out_dir) -> None:
    out = Path(out_dir)
    hist_dir = out / "history"
    hist_dir.mkdir(parents=True, exist_ok=True)
    for o in outcomes:
        with open(hist_dir / f"{o.record.run_id}.csv", "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for row in o.history_rows:
                fh.write(",".join([str(row[0])] + [_fmt(x) for x in row[1:]]) + "\n")
    if any(o.curves for o in outcomes):
        curve_dir = out / "curves"
        curve_dir.mkdir(parents=True, exist_ok=True)
        for o in outcomes:
            for tag, points in o.curves.items():
                suffix = "roc" if tag == "ent" else f"{tag}-roc"
                with open(curve_dir / f"{o.record.run_id}-{suffix}.csv", "w",
                          encoding="utf-8", newline="\n") as fh:
                    fh.write("threshold,tpr,fpr\n")
                    for th, tpr, fpr in points:
                        fh.write(f"{_fmt(th)},{_fmt(tpr)},{_fmt(fpr)}\n")


def _assemble(spec: ExperimentSpec, seed_base: int, outcomes: list[RunOutcome],
              out_dir=None) -> RunReport:
    runs = [o.record for o in outcomes]
    config = {**spec.config, "seed_base": int(seed_base)}
    report = RunReport(experiment=spec.name, version=__version__, config=config,
                       runs=runs, aggregates=aggregate_runs(runs))
    if out_dir is not None:
        export_report(report, out_dir)
        _write_run_files(outcomes, out_dir)
    return report


# ---------------------------------------------------------------------------
# experiment runners


def run_train_eval(spec: ExperimentSpec, seed_base: int = 0, workers: int = 1,
                   out_dir=None) -> RunReport:
    """Train/evaluate the configured model over splits x seeds."""
    tasks = _tasks_for(spec, seed_base, spec.model.architecture,
                       spec.model, spec.train, want_curves=True)
    return _assemble(spec, seed_base, execute_tasks(tasks, workers), out_dir)


def _ce_only(train_cfg: TrainConfig) -> TrainConfig:
    """Regularizers need attention scores; runners that force score-free
    architectures train on plain cross-entropy."""
    weights = replace(train_cfg.loss_weights, beta=0.0, gamma=0.0, zeta=0.0)
    return replace(train_cfg, loss_weights=weights)


def run_edge_ablation(spec: ExperimentSpec, seed_base: int = 0, workers: int = 1,
                      out_dir=None, fractions=(0.0, 0.5, 1.0)) -> RunReport:
    """Classifier quality and detection under edge-subset conditions.

    Conditions: inter-edge removal at each fraction (fraction 0 is the
    untouched graph), then intra-ID-only and intra-OOD-only graphs. The
    filter redraws which edges vanish per split.
    """
    model = replace(spec.model, architecture="gcn", heads=1)
    train_cfg = _ce_only(spec.train)
    tasks: list[RunTask] = []
    for f in fractions:
        frac = float(f)
        if not 0.0 <= frac <= 1.0:
            raise ConfigError("removal fractions must lie in [0, 1]")
        fn = None if frac == 0.0 else (
            lambda ss, fr=frac: (("intra_id", "intra_ood"), fr, ss))
        tasks += _tasks_for(spec, seed_base, f"inter-{frac:g}", model,
                            train_cfg, edge_filter_fn=fn)
    tasks += _tasks_for(spec, seed_base, "intra_id-only", model, train_cfg,
                        edge_filter_fn=lambda ss: (("intra_id",), 1.0, ss))
    tasks += _tasks_for(spec, seed_base, "intra_ood-only", model, train_cfg,
                        edge_filter_fn=lambda ss: (("intra_ood",), 1.0, ss))
    return _assemble(spec, seed_base, execute_tasks(tasks, workers), out_dir)


def run_smoothing_roc(spec: ExperimentSpec, seed_base: int = 0, workers: int = 1,
                      out_dir=None) -> RunReport:
    """MLP vs aggregation: same data, entropy-score ROC curves exported."""
    train_cfg = _ce_only(spec.train)
    tasks: list[RunTask] = []
    for arch in ("mlp", "gcn"):
        model = replace(spec.model, architecture=arch, heads=1)
        tasks += _tasks_for(spec, seed_base, arch, model, train_cfg,
                            want_curves=True)
    return _assemble(spec, seed_base, execute_tasks(tasks, workers), out_dir)


def run_loss_ablation(spec: ExperimentSpec, seed_base: int = 0, workers: int = 1,
                      out_dir=None) -> RunReport:
    """The seven regularizer on/off rows with otherwise identical config."""
    if spec.model.architecture != "oodgat":
        raise ConfigError("ablate-losses requires an oodgat model")
    base = spec.train.loss_weights
    tasks: list[RunTask] = []
    for cond, use_con, use_ent, use_dis in ABLATION_ROWS:
        weights = replace(base, beta=base.beta * use_con,
                          gamma=base.gamma * use_ent, zeta=base.zeta * use_dis)
        tasks += _tasks_for(spec, seed_base, cond, spec.model,
                            replace(spec.train, loss_weights=weights))
    return _assemble(spec, seed_base, execute_tasks(tasks, workers), out_dir)


def run_gridsearch(spec: ExperimentSpec, seed_base: int = 0, workers: int = 1,
                   out_dir=None) -> RunReport:
    """Train every grid cell on split 0, one run per configured seed."""
    if not spec.grid:
        raise ConfigError("gridsearch needs a [grid] section in the spec")
    cells = expand_space(spec.grid)
    tasks: list[RunTask] = []
    for assignment in cells:
        cond = ",".join(f"{k}={assignment[k]}" for k in sorted(assignment))
        model, train_cfg = apply_assignment(spec.model, spec.train, assignment)
        for seed_idx in range(spec.seeds_per_split):
            split_seed, train_seed = run_seeds(seed_base, 0, seed_idx)
            tasks.append(RunTask(run_id=f"{cond}-r{seed_idx}", condition=cond,
                                 split_idx=0, seed_idx=seed_idx,
                                 split_seed=split_seed, dataset=spec.dataset,
                                 edge_filter=None, model=model,
                                 train=replace(train_cfg, seed=train_seed)))
    return _assemble(spec, seed_base, execute_tasks(tasks, workers), out_dir)


def best_grid_condition(report: RunReport) -> tuple[str, float]:
    """Winning gridsearch cell by mean validation composite; ties resolve
    to the lexicographically smallest condition string."""
    scored = [(cond, agg["best_val_composite"]["mean"])
              for cond, agg in report.aggregates.items()]
    if not scored:
        raise ConfigError("gridsearch report has no aggregates")
    best = sorted(scored, key=lambda cs: (-cs[1], cs[0]))[0]
    return best


def run_gen_sbm(spec: ExperimentSpec, out_dir) -> dict:
    """Write the spec's block-model graph out as a bundle directory."""
    if spec.dataset[0] != "sbm":
        raise ConfigError("gen-sbm needs [dataset] kind=sbm")
    _, sbm, seed = spec.dataset
    graph = sbm_generate(sbm, seed)
    out = Path(out_dir)
    save_graph_bundle(graph, out)
    mapping = {c: (1 if c in sbm.ood_classes else 0) for c in range(sbm.classes)}
    meta = {"nodes": graph.num_nodes, "edges": graph.num_edges,
            "classes": sbm.classes, "ood_classes": sorted(sbm.ood_classes),
            "node_homophily": node_homophily(graph, graph.labels),
            "identity_homophily": identity_homophily(graph, mapping)}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n",
                                   encoding="utf-8", newline="\n")
    return meta


# ---------------------------------------------------------------------------
# check batteries (shared by the CLI and the acceptance suite)


def _random_segment_graph(rng: np.random.Generator, n: int):
    edges = [(u, v) for u in range(n) for v in range(u + 1, n)
             if rng.random() < 0.35]
    if not edges:
        edges = [(0, 1)]
    arr = np.array(edges + [(v, u) for u, v in edges], dtype=np.int64)
    return engine.build_segment_index(arr[:, 0], arr[:, 1], n)


def gradcheck_battery(seed: int = 0) -> list[tuple[str, object]]:
    """One gradient check per differentiable operation, then the full
    OOD-attention objective on a 12-node random graph."""
    rng = np.random.default_rng(seed)

    def t(shape, low=-2.0, high=2.0):
        return Tensor(rng.uniform(low, high, shape), requires_grad=True)

    checks: list[tuple[str, object]] = []

    def check(name, build, params, tol):
        checks.append((name, grad_check(build, params, tol=tol)))

    a, b = t((3, 4)), t((3, 4))
    pos = t((3, 4), 0.5, 3.0)
    check("add", lambda: engine.reduce_sum(engine.mul(engine.add(a, b), a)),
          {"a": a, "b": b}, 1e-6)
    check("sub", lambda: engine.reduce_sum(engine.mul(engine.sub(a, b), b)),
          {"a": a, "b": b}, 1e-6)
    check("mul", lambda: engine.reduce_sum(engine.mul(a, b)), {"a": a, "b": b}, 1e-6)
    check("div", lambda: engine.reduce_sum(engine.div(a, pos)),
          {"a": a, "pos": pos}, 1e-6)
    check("scale", lambda: engine.reduce_sum(engine.scale(a, -1.7)), {"a": a}, 1e-6)
    check("sigmoid", lambda: engine.reduce_sum(engine.sigmoid(a)), {"a": a}, 1e-6)
    check("exp", lambda: engine.reduce_sum(engine.exp(a)), {"a": a}, 1e-6)
    check("log", lambda: engine.reduce_sum(engine.log(pos)), {"pos": pos}, 1e-6)
    check("sqrt", lambda: engine.reduce_sum(engine.sqrt(pos)), {"pos": pos}, 1e-6)
    check("absolute", lambda: engine.reduce_sum(engine.absolute(a)), {"a": a}, 1e-4)
    check("relu", lambda: engine.reduce_sum(engine.relu(a)), {"a": a}, 1e-4)
    check("leaky_relu", lambda: engine.reduce_sum(engine.leaky_relu(a, 0.2)),
          {"a": a}, 1e-4)
    check("elu", lambda: engine.reduce_sum(engine.elu(a)), {"a": a}, 1e-4)

    m1, m2 = t((3, 5)), t((5, 2))
    check("matmul", lambda: engine.reduce_sum(engine.matmul(m1, m2)),
          {"m1": m1, "m2": m2}, 1e-6)
    rows = np.array([0, 2, 2, 1])
    check("gather_rows", lambda: engine.reduce_sum(
        engine.mul(engine.gather_rows(a, rows), engine.gather_rows(b, rows))),
        {"a": a, "b": b}, 1e-6)
    check("pick", lambda: engine.reduce_sum(engine.pick(a, np.array([0, 1, 2]),
                                                        np.array([3, 0, 2]))),
          {"a": a}, 1e-6)
    check("hstack", lambda: engine.reduce_sum(engine.mul(engine.hstack([a, b]),
                                                         engine.hstack([b, a]))),
          {"a": a, "b": b}, 1e-6)
    check("slice_rows", lambda: engine.reduce_sum(engine.slice_rows(m2, 1, 4)),
          {"m2": m2}, 1e-6)
    check("reduce_sum", lambda: engine.reduce_sum(engine.mul(a, a)), {"a": a}, 1e-6)
    check("reduce_mean", lambda: engine.reduce_mean(engine.mul(a, b)),
          {"a": a, "b": b}, 1e-6)
    check("row_sum", lambda: engine.reduce_sum(
        engine.mul(engine.row_sum(a), engine.row_sum(b))), {"a": a, "b": b}, 1e-6)
    check("row_softmax", lambda: engine.reduce_sum(
        engine.mul(engine.row_softmax(a), b)), {"a": a, "b": b}, 1e-6)

    def dropout_build():
        local = np.random.default_rng(99)
        return engine.reduce_sum(engine.dropout(engine.mul(a, b), 0.4, local))

    check("dropout", dropout_build, {"a": a, "b": b}, 1e-6)
    c1, c2 = t((5, 1), 0.2, 1.5), t((5, 1), 0.2, 1.5)
    check("cosine_similarity", lambda: engine.cosine_similarity(c1, c2),
          {"c1": c1, "c2": c2}, 1e-6)

    seg = _random_segment_graph(rng, 6)
    sv = t((seg.num_entries, 1))
    sw = t((seg.num_entries, 3))
    check("segment_softmax", lambda: engine.reduce_sum(
        engine.mul(engine.segment_softmax(sv, seg),
                   Tensor(np.arange(seg.num_entries, dtype=float)[:, None]))),
        {"sv": sv}, 1e-6)
    check("segment_weighted_sum", lambda: engine.reduce_sum(
        engine.mul(engine.segment_weighted_sum(sw, engine.sigmoid(sv), seg),
                   Tensor(np.ones((seg.num_nodes, 3))))),
        {"sv": sv, "sw": sw}, 1e-6)

    # the full objective on a 12-node random graph
    n = 12
    g_edges = [(u, v) for u in range(n) for v in range(u + 1, n)
               if rng.random() < 0.3] or [(0, 1)]
    graph = make_graph(n, g_edges, rng.standard_normal((n, 6)),
                       rng.integers(0, 3, n), np.zeros(n, np.int8))
    cfg = ModelConfig(architecture="oodgat", num_classes=3, heads=2, hidden_dim=5)
    params = init_params(cfg, 6, rng)
    for name, tensor in params.items():
        if name.endswith(".a"):
            tensor.values = rng.uniform(0.05, 0.3, tensor.shape)
    mask = np.zeros(n, bool)
    mask[:6] = True
    weights = LossWeights(beta=2.0, gamma=0.05, zeta=0.005, epsilon=0.2)
    idx = graph_index(graph)

    def full_objective():
        out = model_forward(cfg, params, graph.features, idx)
        total, _ = compute_objective(out, graph.labels, mask, weights, t=3)
        return total

    check("full_oodgat_objective", full_objective, params, 1e-4)
    return checks


def run_homophily_check(count: int = 1000, seed_base: int = 0,
                        min_nodes: int = 10, max_nodes: int = 200) -> dict:
    """Random graphs, random labelings, random class-to-identity maps:
    grouping labels into two identities can only raise homophily."""
    rng = np.random.default_rng(seed_base)
    violations = 0
    min_margin = np.inf
    for case in range(count):
        k = int(rng.integers(2, 7))
        if case % 2 == 0:
            n = int(rng.integers(min_nodes, max_nodes + 1))
            graph = _edged(lambda s: er_generate(n, float(rng.uniform(0.03, 0.3)),
                                                 k, seed=s), rng)
        else:
            per = int(rng.integers(max(2, min_nodes // k), max_nodes // k + 1))
            spec = SbmSpec(classes=k, nodes_per_class=per,
                           p_intra=float(rng.uniform(0.05, 0.4)),
                           p_inter=float(rng.uniform(0.0, 0.05)),
                           feature_dim=2, class_mean_separation=1.0,
                           ood_classes=frozenset({k - 1}))
            graph = _edged(lambda s: sbm_generate(spec, seed=s), rng)
        mapping = {c: int(rng.integers(0, 2)) for c in range(k)}
        if case % 2 == 0:
            labels = rng.integers(0, k, graph.num_nodes)
            lut = np.array([mapping[c] for c in range(k)])
            h_node = node_homophily(graph, labels)
            h_id = node_homophily(graph, lut[labels])
        else:
            h_node = node_homophily(graph, graph.labels)
            h_id = identity_homophily(graph, mapping)
        margin = h_id - h_node
        min_margin = min(min_margin, margin)
        if margin < 0:
            violations += 1
    return {"count": count, "violations": violations,
            "min_margin": float(min_margin)}


def _edged(gen, rng: np.random.Generator) -> Graph:
    """Draw until the generator yields a graph with at least one edge."""
    while True:
        graph = gen(int(rng.integers(2 ** 31)))
        if graph.num_edges:
            return graph
