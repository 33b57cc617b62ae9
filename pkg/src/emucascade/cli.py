"""Command-line entry point binding the pipeline stages together.

Subcommands: gen, validate, build-graph, train, score, cluster, eval,
report, pipeline.  One INI config file drives a full reproducible run; the
manifest records digests of every input and output per stage.

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import glob as globlib
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ewscam import ClusterParams, cluster, export_condensed_dot, export_condensed_json
from .gnn import (
    ModelConfig,
    TrainConfig,
    load_model,
    predict_probabilities,
    roc_auc,
    save_model,
    train,
)
from .graphbuild import GraphBuilder, edge_labels, load_graph, save_graph
from .recon import (
    HuberEnergyRegressor,
    bootstrap_ci,
    categorize_showers,
    category_fractions,
    cluster_summaries,
    cross_validated_quality,
    energy_resolution,
    estimate_axis,
    mae_metric,
)
from .report import svg_chart, write_series_csv
from .toygen import GenConfig, gen_brick, load_truth, save_truth
from .tracks import InvariantViolation, TrackFormatError, load_tracks, save_tracks, split_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

SEED_ENV_VAR = "EMUCASCADE_SEED"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

_FLOATS = "floats"
CONFIG_SCHEMA = {
    "run": {"seed": int, "out_dir": str, "jobs": int},
    "gen": {
        "n_bricks": int,
        "n_showers": int,
        "e_min": float,
        "e_max": float,
        "e_cutoff": float,
        "x0_mm": float,
        "es_mev": float,
        "beta": float,
        "split_length_mm": float,
        "ionization_mev_per_layer": float,
        "origin_half_x_um": float,
        "origin_half_y_um": float,
        "max_slope": float,
        "min_origin_sep_um": float,
    },
    "split": {"train": int, "test": int, "val": int},
    "graph": {"k": int, "include_dtheta": bool, "grid_points": int},
    "model": {
        "d_hidden": int,
        "n_emulsion": int,
        "n_edge": int,
        "block_order": str,
        "aggregation": str,
    },
    "train": {"lr": float, "max_epochs": int, "patience": int, "gamma_focal": float},
    "score": {"mode": str, "model_path": str},
    "cluster": {"min_cluster_size": int, "threshold": float},
    "eval": {"bootstrap_resamples": int, "threshold_grid": _FLOATS},
    "data": {"train_graphs": str, "val_graphs": str},
}


def _coerce(raw: str, typ, section: str, key: str):
    try:
        if typ is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is _FLOATS:
            return [float(v) for v in raw.split(",") if v.strip()]
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_config(path) -> dict:
    """Read and validate an INI run config; unknown keys are rejected.

    The EMUCASCADE_SEED environment variable, when set, overrides the
    configured seed.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg: dict[str, dict] = {}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        cfg[section] = {}
        for key, raw in parser.items(section):
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            cfg[section][key] = _coerce(raw, CONFIG_SCHEMA[section][key], section, key)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.setdefault("run", {})["seed"] = _coerce(env_seed, int, "run", "seed")
    return cfg


def _gen_config(cfg: dict, seed: int) -> GenConfig:
    gen = dict(cfg.get("gen", {}))
    gen.pop("n_bricks", None)
    return GenConfig(seed=seed, **gen)


def _resolve_paths(spec: str, base: Path) -> list[Path]:
    out: list[Path] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        matches = sorted(globlib.glob(str(base / part))) or sorted(globlib.glob(part))
        if not matches:
            raise ConfigError(f"no files match {part!r}")
        out.extend(Path(m) for m in matches)
    return out


# ---------------------------------------------------------------------------
# manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, config_path=None):
        self.doc = {
            "tool_version": __version__,
            "config_sha256": _sha256(config_path) if config_path else None,
            "stages": {},
        }
        self._root = Path(".")

    def set_root(self, root):
        self._root = Path(root)

    def _rel(self, path):
        try:
            return str(Path(path).resolve().relative_to(self._root.resolve()))
        except ValueError:
            return str(path)

    def record(self, stage: str, inputs=(), outputs=(), wall_seconds=0.0):
        self.doc["stages"][stage] = {
            "inputs": {self._rel(p): _sha256(p) for p in inputs},
            "outputs": {self._rel(p): _sha256(p) for p in outputs},
            "wall_seconds": wall_seconds,
        }

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, sort_keys=True, indent=1)
            fh.write("\n")


# ---------------------------------------------------------------------------
# shared stage helpers


def _labels_by_track(g) -> dict[int, int]:
    if g.cluster_labels is None:
        raise StageError("graph has no cluster labels")
    return {int(t): int(c) for t, c in zip(g.track_ids, g.cluster_labels)}


def _recovered_cluster_rows(g, truths, outcomes):
    """(features, e_true) per recovered shower: cluster z length + origin z."""
    feats, energies = [], []
    z = g.vertex_feats[:, 2]
    for truth, outcome in zip(truths, outcomes):
        if outcome.category != "recovered" or outcome.matched_cluster_id is None:
            continue
        mask = g.cluster_labels == outcome.matched_cluster_id
        feats.append([float(z[mask].max() - z[mask].min()), float(z[mask].min())])
        energies.append(truth.e_true)
    return feats, energies


def _axis_residuals(brick, g, truths, outcomes):
    """est - truth origin/direction per recovered shower."""
    by_id = {t.track_id: t for t in brick.tracks}
    rows = []
    for truth, outcome in zip(truths, outcomes):
        if outcome.category != "recovered" or outcome.matched_cluster_id is None:
            continue
        mask = g.cluster_labels == outcome.matched_cluster_id
        members = [by_id[int(t)] for t in g.track_ids[mask]]
        x, y, z, tx, ty = estimate_axis(members)
        rows.append([x - truth.x, y - truth.y, z - truth.z, tx - truth.tx, ty - truth.ty])
    return rows


def _evaluate_bricks(bricks, graphs, truth_lists, params: ClusterParams, energy_model, resamples, seed):
    """Per-brick and aggregate reconstruction metrics on clustered graphs."""
    per_brick = {}
    all_outcomes = []
    residuals = []
    e_true_all, e_rec_all = [], []
    for brick, g, truths in zip(bricks, graphs, truth_lists):
        outcomes = categorize_showers(truths, _labels_by_track(g))
        all_outcomes.extend(outcomes)
        fractions = category_fractions(outcomes)
        entry = {
            "n_showers": len(truths),
            "n_tracks": len(brick),
            **{f"{k}_pct": v for k, v in fractions.items()},
        }
        residuals.extend(_axis_residuals(brick, g, truths, outcomes))
        if energy_model is not None:
            feats, energies = _recovered_cluster_rows(g, truths, outcomes)
            if len(feats) >= 2:
                e_rec = energy_model.predict(np.array(feats))
                entry["er"] = energy_resolution(np.array(energies), e_rec)
                e_true_all.extend(energies)
                e_rec_all.extend(e_rec.tolist())
            else:
                entry["er"] = None
        per_brick[str(brick.brick_id)] = entry

    agg = category_fractions(all_outcomes) if all_outcomes else {}
    aggregate = {f"{k}_pct": v for k, v in agg.items()}
    rec_flags = np.array([1.0 if o.category == "recovered" else 0.0 for o in all_outcomes])
    if len(rec_flags):
        mean, std = bootstrap_ci(lambda d: 100.0 * float(np.mean(d)), rec_flags, resamples, seed)
        aggregate["bootstrap"] = {"recovered_pct": {"mean": mean, "std": std}}
    if residuals:
        res = np.array(residuals)
        comp = ("x", "y", "z", "tx", "ty")
        aggregate["mae"] = {c: mae_metric(res[:, i]) for i, c in enumerate(comp)}
        aggregate["mae_vs_truth"] = {c: float(np.mean(np.abs(res[:, i]))) for i, c in enumerate(comp)}
    else:
        aggregate["mae"] = None
        aggregate["mae_vs_truth"] = None
    if e_true_all and len(e_true_all) >= 2:
        et, er_arr = np.array(e_true_all), np.array(e_rec_all)
        aggregate["er"] = energy_resolution(et, er_arr)
        mean, std = bootstrap_ci(energy_resolution, (et, er_arr), resamples, seed + 1)
        aggregate["bootstrap"]["er"] = {"mean": mean, "std": std}
    else:
        aggregate["er"] = None
    return per_brick, aggregate, all_outcomes


def _score_graph(g, mode, model):
    if mode == "oracle":
        if g.labels is None:
            raise StageError("oracle scoring needs labeled edges")
        return g.labels.astype(float)
    return predict_probabilities(model, g)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = {}
    run = cfg.get("run", {})
    seed = args.seed if args.seed is not None else run.get("seed")
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        seed = int(env_seed)
    if seed is None:
        print("error: --seed is required (or set it in the config / environment)", file=sys.stderr)
        return EXIT_USAGE
    gen_section = dict(cfg.get("gen", {}))
    n_bricks = args.bricks if args.bricks is not None else gen_section.pop("n_bricks", 1)
    if args.showers is not None:
        gen_section["n_showers"] = args.showers
    gcfg = GenConfig(seed=seed, **gen_section)
    out_dir = Path(args.out or run.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(args.config)
    manifest.set_root(out_dir)
    t0 = time.time()
    outputs = []
    for i in range(n_bricks):
        brick, truths = gen_brick(gcfg, brick_id=i)
        brick_path = out_dir / f"brick_{i}.csv"
        truth_path = out_dir / f"truth_{i}.csv"
        save_tracks(brick, brick_path)
        save_truth(truths, truth_path)
        outputs += [brick_path, truth_path]
        print(f"brick {i}: {len(brick)} tracks, {len(truths)} showers -> {brick_path}")
    manifest.record("gen", outputs=outputs, wall_seconds=time.time() - t0)
    manifest.write(out_dir / "manifest.json")
    return EXIT_OK


def cmd_validate(args):
    status = EXIT_OK
    for path in args.brick:
        try:
            brick = load_tracks(path)
        except (TrackFormatError, InvariantViolation, OSError) as exc:
            print(f"FAIL {path}: {exc}", file=sys.stderr)
            status = EXIT_VALIDATION
            continue
        print(f"ok {path}: {len(brick)} tracks")
    return status


def cmd_build_graph(args):
    brick = load_tracks(args.brick)
    builder = GraphBuilder(k=args.k, include_dtheta=not args.no_dtheta)
    g = builder.fit().transform(brick)
    if args.truth:
        truths = load_truth(args.truth, brick)
        edge_labels(g, truths)
    save_graph(g, args.out)
    print(f"graph: {g.n_vertices} vertices, {g.n_edges} edges -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = parse_config(args.config)
    data = cfg.get("data", {})
    if "train_graphs" not in data or "val_graphs" not in data:
        raise ConfigError("[data] train_graphs and val_graphs are required for `train`")
    base = Path(args.config).resolve().parent
    train_graphs = [load_graph(p) for p in _resolve_paths(data["train_graphs"], base)]
    val_graphs = [load_graph(p) for p in _resolve_paths(data["val_graphs"], base)]
    seed = cfg.get("run", {}).get("seed", 0)
    model_cfg = ModelConfig(seed=seed, **cfg.get("model", {}))
    train_cfg = TrainConfig(seed=seed, **cfg.get("train", {}))
    model, history = train(train_graphs, val_graphs, model_cfg, train_cfg)
    save_model(model, args.out)
    if args.history:
        write_series_csv(args.history, ["epoch", "train_loss", "val_auc"], history)
    best = max(h[2] for h in history)
    print(f"trained {len(history)} epochs, best val ROC-AUC {best:.4f} -> {args.out}")
    return EXIT_OK


def cmd_score(args):
    model = load_model(args.model)
    g = load_graph(args.graph)
    g.probabilities = predict_probabilities(model, g)
    save_graph(g, args.out)
    if g.labels is not None:
        print(f"scored {g.n_edges} edges, ROC-AUC {roc_auc(g.probabilities, g.labels):.4f}")
    else:
        print(f"scored {g.n_edges} edges")
    return EXIT_OK


def cmd_cluster(args):
    g = load_graph(args.graph)
    params = ClusterParams(min_cluster_size=args.min_cluster_size, threshold=args.threshold)
    labels, tree = cluster(g, params)
    save_graph(g, args.out)
    n_clusters = len(set(labels.tolist()) - {-1})
    print(f"{n_clusters} clusters, {(labels == -1).sum()} noise tracks -> {args.out}")
    if args.tree_json:
        export_condensed_json(tree, args.tree_json)
    if args.tree_dot:
        export_condensed_dot(tree, args.tree_dot)
    return EXIT_OK


def cmd_eval(args):
    if len(args.graph) != len(args.truth) or len(args.graph) != len(args.brick):
        print("error: --graph, --truth and --brick must be repeated in aligned groups", file=sys.stderr)
        return EXIT_USAGE
    bricks = [load_tracks(p) for p in args.brick]
    graphs = [load_graph(p) for p in args.graph]
    truth_lists = [load_truth(p, b) for p, b in zip(args.truth, bricks)]
    params = ClusterParams(min_cluster_size=args.min_cluster_size, threshold=args.threshold)
    energy_model = _fit_energy_model(graphs, truth_lists, params)
    per_brick, aggregate, _ = _evaluate_bricks(
        bricks, graphs, truth_lists, params, energy_model, args.resamples, args.seed
    )
    doc = {"per_brick": per_brick, "aggregate": aggregate}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"metrics -> {args.out}")
    return EXIT_OK


def _fit_energy_model(graphs, truth_lists, params):
    feats, energies = [], []
    for g, truths in zip(graphs, truth_lists):
        if g.cluster_labels is None:
            continue
        outcomes = categorize_showers(truths, _labels_by_track(g))
        f, e = _recovered_cluster_rows(g, truths, outcomes)
        feats.extend(f)
        energies.extend(e)
    if len(feats) < 10:
        return None
    try:
        return HuberEnergyRegressor().fit(np.array(feats), np.array(energies))
    except ValueError:
        return None


def cmd_report(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_series = []
    er_series = []
    for path in args.metrics:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        name = Path(path).stem
        sweep = doc.get("threshold_sweep") or []
        if sweep:
            xs = [row["threshold"] for row in sweep]
            ys = [row["recovered_pct"] for row in sweep]
            sweep_series.append((name, xs, ys))
        rows = [
            (entry.get("n_showers"), entry.get("er"))
            for entry in doc.get("per_brick", {}).values()
            if entry.get("er") is not None
        ]
        if rows:
            rows.sort()
            er_series.append((name, [r[0] for r in rows], [r[1] for r in rows]))
    made = []
    if sweep_series:
        n = svg_chart(
            out_dir / "recovered_vs_threshold.svg",
            sweep_series,
            title="recovered showers vs probability threshold",
            xlabel="threshold",
            ylabel="recovered [%]",
        )
        rows = [(nm, x, float(y)) for nm, xs, ys in sweep_series for x, y in zip(xs, ys)]
        c = write_series_csv(out_dir / "recovered_vs_threshold.csv", ["series", "threshold", "recovered_pct"], rows)
        assert c == n, "csv twin row count must equal plotted points"
        made.append("recovered_vs_threshold")
    if er_series:
        n = svg_chart(
            out_dir / "er_vs_shower_count.svg",
            er_series,
            title="energy resolution vs showers per brick",
            xlabel="showers per brick",
            ylabel="ER",
        )
        rows = [(nm, x, float(y)) for nm, xs, ys in er_series for x, y in zip(xs, ys)]
        c = write_series_csv(out_dir / "er_vs_shower_count.csv", ["series", "n_showers", "er"], rows)
        assert c == n
        made.append("er_vs_shower_count")
    if not made:
        print("error: metrics files contain nothing to plot", file=sys.stderr)
        return EXIT_USAGE
    print(f"report: {', '.join(made)} -> {out_dir}")
    return EXIT_OK


def cmd_pipeline(args):
    cfg = parse_config(args.config)
    run = cfg.get("run", {})
    if "out_dir" not in run:
        raise ConfigError("[run] out_dir is required for `pipeline`")
    seed = run.get("seed", 0)
    out = Path(run["out_dir"])
    for sub in ("gen", "graphs", "scored", "clustered", "trees", "curves", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = Manifest(args.config)
    manifest.set_root(out)

    def stage(name):
        class _Ctx:
            def __enter__(self):
                self.t0 = time.time()
                self.inputs = []
                self.outputs = []
                return self

            def __exit__(self, exc_type, exc, tb):
                if exc is not None:
                    raise StageError(f"stage {name!r} failed: {exc}") from exc
                manifest.record(name, self.inputs, self.outputs, time.time() - self.t0)
                return False

        return _Ctx()

    # --- gen
    gen_section = dict(cfg.get("gen", {}))
    n_bricks = gen_section.pop("n_bricks", 5)
    gcfg = GenConfig(seed=seed, **gen_section)
    bricks, truth_lists = [], []
    with stage("gen") as st:
        for i in range(n_bricks):
            brick, truths = gen_brick(gcfg, brick_id=i)
            bricks.append(brick)
            truth_lists.append(truths)
            bp = out / "gen" / f"brick_{i}.csv"
            tp = out / "gen" / f"truth_{i}.csv"
            save_tracks(brick, bp)
            save_truth(truths, tp)
            st.outputs += [bp, tp]

    # --- split
    counts = None
    if "split" in cfg:
        counts = (cfg["split"]["train"], cfg["split"]["test"], cfg["split"]["val"])
    split = split_dataset(list(range(n_bricks)), seed=seed, counts=counts)

    # --- graphs
    graphs = {}
    with stage("build-graph") as st:
        builder = GraphBuilder(**cfg.get("graph", {}))
        for i in range(n_bricks):
            g = builder.fit().transform(bricks[i])
            graphs[i] = g
            gp = out / "graphs" / f"graph_{i}.jsonl"
            save_graph(g, gp)
            st.outputs.append(gp)

    train_idx, test_idx, val_idx = list(split.train), list(split.test), list(split.val)

    # --- train / score
    score_cfg = cfg.get("score", {})
    mode = score_cfg.get("mode", "model")
    if mode not in ("model", "oracle"):
        raise ConfigError(f"[score] mode must be 'model' or 'oracle', got {mode!r}")
    model = None
    history = None
    if mode == "model":
        if "model_path" in score_cfg:
            with stage("load-model") as st:
                model = load_model(score_cfg["model_path"])
                st.inputs.append(score_cfg["model_path"])
        else:
            with stage("train") as st:
                model_cfg = ModelConfig(seed=seed, **cfg.get("model", {}))
                train_cfg = TrainConfig(seed=seed, **cfg.get("train", {}))
                model, history = train(
                    [graphs[i] for i in train_idx],
                    [graphs[i] for i in val_idx],
                    model_cfg,
                    train_cfg,
                )
                mp = out / "model.json"
                save_model(model, mp)
                hp = out / "history.csv"
                write_series_csv(hp, ["epoch", "train_loss", "val_auc"], history)
                st.outputs += [mp, hp]

    with stage("score") as st:
        for i in range(n_bricks):
            g = graphs[i]
            g.probabilities = _score_graph(g, mode, model)
            sp = out / "scored" / f"graph_{i}.jsonl"
            save_graph(g, sp)
            st.outputs.append(sp)

    # --- cluster
    cparams = ClusterParams(**cfg.get("cluster", {}))
    with stage("cluster") as st:
        for i in range(n_bricks):
            _labels, tree = cluster(graphs[i], cparams)
            cp = out / "clustered" / f"graph_{i}.jsonl"
            save_graph(graphs[i], cp)
            st.outputs.append(cp)
            if i == test_idx[0]:
                tj = out / "trees" / f"tree_{i}.json"
                td = out / "trees" / f"tree_{i}.dot"
                export_condensed_json(tree, tj)
                export_condensed_dot(tree, td)
                st.outputs += [tj, td]

    # --- eval
    eval_cfg = cfg.get("eval", {})
    resamples = eval_cfg.get("bootstrap_resamples", 200)
    grid = eval_cfg.get("threshold_grid", [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    with stage("eval") as st:
        fit_graphs = [graphs[i] for i in train_idx + val_idx]
        fit_truths = [truth_lists[i] for i in train_idx + val_idx]
        energy_model = _fit_energy_model(fit_graphs, fit_truths, cparams)
        per_brick, aggregate, _ = _evaluate_bricks(
            [bricks[i] for i in test_idx],
            [graphs[i] for i in test_idx],
            [truth_lists[i] for i in test_idx],
            cparams,
            energy_model,
            resamples,
            seed,
        )
        if history is not None:
            aggregate["val_roc_auc"] = max(h[2] for h in history)
        # cluster-quality classifier on train+val clusters
        qual_X, qual_y = [], []
        for g, truths in zip(fit_graphs, fit_truths):
            outcomes = categorize_showers(truths, _labels_by_track(g))
            matched = {o.matched_cluster_id for o in outcomes if o.category == "recovered"}
            ids, X = cluster_summaries(g)
            for cid, row in zip(ids, X):
                qual_X.append(row)
                qual_y.append(1 if cid in matched else 0)
        if qual_X and len(set(qual_y)) == 2 and len(qual_y) >= 6:
            quality = cross_validated_quality(np.array(qual_X), np.array(qual_y), seed=seed)
            aggregate["quality_auc"] = quality["auc_mean"]
            aggregate["quality_ap"] = quality["ap_mean"]
            if "roc" in quality:
                write_series_csv(
                    out / "curves" / "quality_roc.csv",
                    ["threshold", "fpr", "tpr"],
                    list(zip(quality["roc"]["thresholds"] + [None],
                             quality["roc"]["fpr"], quality["roc"]["tpr"])),
                )
                write_series_csv(
                    out / "curves" / "quality_pr.csv",
                    ["threshold", "recall", "precision"],
                    list(zip(quality["pr"]["thresholds"], quality["pr"]["recall"],
                             quality["pr"]["precision"])),
                )
                st.outputs += [out / "curves" / "quality_roc.csv", out / "curves" / "quality_pr.csv"]
        else:
            aggregate["quality_auc"] = None
            aggregate["quality_ap"] = None
        # threshold sweep on the test bricks
        sweep = []
        for thr in grid:
            sweep_params = ClusterParams(cparams.min_cluster_size, thr)
            row_outcomes = []
            feats_all, e_all = [], []
            for i in test_idx:
                g = graphs[i]
                labels, _ = cluster(g, sweep_params)
                outcomes = categorize_showers(truth_lists[i], _labels_by_track(g))
                row_outcomes.extend(outcomes)
                if energy_model is not None:
                    f, e = _recovered_cluster_rows(g, truth_lists[i], outcomes)
                    feats_all.extend(f)
                    e_all.extend(e)
            fr = category_fractions(row_outcomes)
            er = None
            if energy_model is not None and len(feats_all) >= 2:
                er = energy_resolution(np.array(e_all), energy_model.predict(np.array(feats_all)))
            sweep.append({"threshold": thr, "recovered_pct": fr["recovered"], "er": er})
        # restore the configured clustering on the test graphs
        for i in test_idx:
            cluster(graphs[i], cparams)
        metrics = {
            "aggregate": aggregate,
            "per_brick": per_brick,
            "threshold_sweep": sweep,
            "run": {
                "seed": seed,
                "split": {"train": train_idx, "test": test_idx, "val": val_idx},
                "cluster": {"min_cluster_size": cparams.min_cluster_size, "threshold": cparams.threshold},
                "score_mode": mode,
            },
        }
        mp = out / "metrics.json"
        with open(mp, "w", encoding="utf-8") as fh:
            json.dump(metrics, fh, sort_keys=True, indent=1)
            fh.write("\n")
        sp = out / "curves" / "threshold_sweep.csv"
        write_series_csv(sp, ["threshold", "recovered_pct", "er"],
                         [(r["threshold"], r["recovered_pct"], r["er"]) for r in sweep])
        st.outputs += [mp, sp]

    # --- report
    with stage("report") as st:
        report_args = argparse.Namespace(metrics=[str(out / "metrics.json")], out_dir=str(out / "plots"))
        cmd_report(report_args)
        for name in ("recovered_vs_threshold", "er_vs_shower_count"):
            for ext in (".svg", ".csv"):
                p = out / "plots" / f"{name}{ext}"
                if p.exists():
                    st.outputs.append(p)

    manifest.write(out / "manifest.json")
    agg = metrics["aggregate"]
    print(
        "pipeline done: recovered {:.1f}% stuck {:.1f}% broken {:.1f}% lost {:.1f}%".format(
            agg.get("recovered_pct", float("nan")),
            agg.get("stuck_pct", float("nan")),
            agg.get("broken_pct", float("nan")),
            agg.get("lost_pct", float("nan")),
        )
    )
    if agg.get("er") is not None:
        print(f"energy resolution: {agg['er']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emucascade", description=__doc__)
    parser.add_argument("--version", action="version", version=f"emucascade {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic bricks and truth files")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--showers", type=int)
    p.add_argument("--bricks", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="check brick files against the geometry constraints")
    p.add_argument("--brick", nargs="+", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("build-graph", help="build the directed track graph for one brick")
    p.add_argument("--brick", required=True)
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--no-dtheta", action="store_true")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train the edge classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="attach edge probabilities to a graph")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("cluster", help="cluster a scored graph into showers")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-cluster-size", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--tree-json")
    p.add_argument("--tree-dot")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", help="reconstruction metrics for clustered graphs")
    p.add_argument("--graph", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--brick", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-cluster-size", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--resamples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render SVG/CSV bundles from metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run gen -> graph -> train/score -> cluster -> eval -> report")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1, help="worker cap (results are identical)")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, TrackFormatError, InvariantViolation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
