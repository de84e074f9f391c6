"""Command-line pipeline: gen -> encode -> spatial -> graph -> train -> eval
plus the analysis subcommands (ablate, cluster, similar, pca, streets).

Every stage reads prior stages' artifacts from explicit directories and
writes only inside its own output directory.  Exit codes: 0 success,
1 validation problem, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data_model as dm
from . import evaluate as ev
from . import reporting as rep
from . import smgcn
from .encoders import train_encoders
from .errors import NumericError, ValidationError
from .graph_builder import MODALITIES, build_graph, renormalized_laplacian
from .spatial import SpatialContext, build_spatial_context
from .synthetic import SynthSpec, generate_synthetic_city

OUTPUT_ROOT_ENV = "LIVINGCIRCLES_OUT"

ENCODE_FILES = {"text": "h_text.cgf", "visual": "h_visual.cgf", "poi": "h_poi.cgf",
                "heads": "heads.cgm", "losses": "encoder_losses.json",
                "meta": "encode_meta.json"}
SPATIAL_FILES = {"S": "S.cgf", "D": "D.cgf", "F": "F.cgf", "topk": "topk.json"}
GRAPH_FILES = {"edges": "edges.csv", "ptilde": "ptilde.cgf", "meta": "graph_meta.json"}
TRAIN_FILES = {"fused": "embeddings.cgf", "text": "emb_text.cgf",
               "visual": "emb_visual.cgf", "poi": "emb_poi.cgf",
               "model": "model.cgm", "losses": "train_losses.json",
               "meta": "train_meta.json"}

ABLATION_SLUGS = {"full": "full", "wo-t": "w/o T", "wo-v": "w/o V",
                  "wo-p": "w/o P", "wo-topk": "w/o top-k sc",
                  "t-only": "T-only", "v-only": "V-only", "p-only": "P-only"}


class CliParser(argparse.ArgumentParser):
    """argparse that exits with code 1 on usage problems."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _need(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing input: {what} ({path})")
    return path


def _out_dir(args, stage: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "out")) / stage
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key-value config file")
    parser.add_argument("--seed", type=int, help="override rng_seed")
    for f in fields(dm.RunConfig):
        if f.name.startswith("_"):
            continue
        key = dm.RunConfig().file_key(f.name)
        kind = {"int": int, "float": float, "str": str}.get(
            f.type if isinstance(f.type, str) else f.type.__name__, str)
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{f.name}",
                            type=kind, default=None, help=argparse.SUPPRESS)


def _resolve_config(args) -> dm.RunConfig:
    cfg = dm.load_config(args.config) if args.config else dm.RunConfig()
    for f in fields(dm.RunConfig):
        if f.name.startswith("_"):
            continue
        override = getattr(args, f"cfg_{f.name}", None)
        if override is not None:
            setattr(cfg, f.name, override)
    if getattr(args, "seed", None) is not None:
        cfg.rng_seed = args.seed
    return cfg.validate()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_gen(args, cfg):
    out = _out_dir(args, "data")
    spec = SynthSpec(n_circles=args.n_circles, dim=args.dim,
                     noise_scale=args.noise_scale)
    generate_synthetic_city(spec, cfg.rng_seed, out)
    return {"outputs": [str(out)],
            "params": {"n_circles": args.n_circles, "dim": args.dim,
                       "noise_scale": args.noise_scale}}


def cmd_encode(args, cfg):
    data = _need(args.data, "dataset directory")
    out = _out_dir(args, "encode")
    ds = dm.load_dataset(data)
    res = train_encoders(ds, cfg)
    for m in MODALITIES:
        dm.write_matrix(out / ENCODE_FILES[m], res.projected[m])
    dm.write_checkpoint(out / ENCODE_FILES["heads"], res.checkpoint_arrays())
    _write_json(out / ENCODE_FILES["losses"], res.loss_curves)
    _write_json(out / ENCODE_FILES["meta"], {
        "circle_ids": [c.id for c in ds.circles],
        "embed_dim": cfg.embed_dim,
        "config_hash": cfg.hash(),
    })
    rows = []
    for name, values in res.loss_curves.items():
        rows.extend((name, i + 1, v) for i, v in enumerate(values))
    rep.write_csv(out / "loss_curves.csv", ["stage", "epoch", "loss"], rows)
    rep.fig_loss_curves(res.loss_curves, out / "loss_curves.png")
    return {"inputs": [str(data)], "outputs": [str(out)]}


def cmd_spatial(args, cfg):
    data = _need(args.data, "dataset directory")
    out = _out_dir(args, "spatial")
    ds = dm.load_dataset(data)
    ctx = build_spatial_context(ds.circles, ds.pois, ds.vocabulary, cfg.top_k)
    for key, mat in (("S", ctx.S), ("D", ctx.D), ("F", ctx.F)):
        dm.write_matrix(out / SPATIAL_FILES[key], mat)
    _write_json(out / SPATIAL_FILES["topk"], {
        "k": cfg.top_k,
        "circle_ids": [c.id for c in ds.circles],
        "topk": [[int(j) for j in row] for row in ctx.topk],
    })
    return {"inputs": [str(data)], "outputs": [str(out)]}


def _load_spatial(spatial_dir) -> tuple:
    spat = _need(spatial_dir, "spatial artifacts")
    meta = json.loads(_need(spat / SPATIAL_FILES["topk"], "top-K sidecar")
                      .read_text(encoding="utf-8"))
    s = dm.read_matrix(spat / SPATIAL_FILES["S"], kind="image").data.astype(np.float64)
    d = dm.read_matrix(spat / SPATIAL_FILES["D"], kind="image").data.astype(np.float64)
    f = dm.read_matrix(spat / SPATIAL_FILES["F"], kind="image").data.astype(np.float64)
    ctx = SpatialContext(n=s.shape[0], D=d, F=f, S=s, topk=meta["topk"])
    return ctx, meta["circle_ids"]


def _load_encoded(encode_dir) -> tuple:
    enc = _need(encode_dir, "encode artifacts")
    meta = json.loads(_need(enc / ENCODE_FILES["meta"], "encode metadata")
                      .read_text(encoding="utf-8"))
    projected = {m: dm.read_matrix(enc / ENCODE_FILES[m], kind="image")
                 .data.astype(np.float64) for m in MODALITIES}
    return projected, meta


def cmd_graph(args, cfg):
    out = _out_dir(args, "graph")
    projected, meta = _load_encoded(args.encode)
    ctx, _ = _load_spatial(args.spatial)
    graph = build_graph(projected, ctx, cfg.top_k)
    p_tilde = renormalized_laplacian(graph)
    rep.write_csv(out / GRAPH_FILES["edges"], ["u", "v", "weight", "kind"],
                  [(u, v, repr(w), kind) for u, v, w, kind in graph.edges])
    dm.write_matrix(out / GRAPH_FILES["ptilde"], p_tilde)
    _write_json(out / GRAPH_FILES["meta"], {
        "circle_ids": meta["circle_ids"],
        "modalities": list(graph.modalities),
        "n_nodes": graph.n_nodes,
        "k": cfg.top_k,
    })
    return {"inputs": [str(args.encode), str(args.spatial)], "outputs": [str(out)]}


def cmd_train(args, cfg):
    out = _out_dir(args, "train")
    graph_dir = _need(args.graph, "graph artifacts")
    meta = json.loads(_need(graph_dir / GRAPH_FILES["meta"], "graph metadata")
                      .read_text(encoding="utf-8"))
    p_tilde = dm.read_matrix(graph_dir / GRAPH_FILES["ptilde"],
                             kind="image").data.astype(np.float64)
    projected, _ = _load_encoded(args.encode)
    ctx, _ = _load_spatial(args.spatial)
    modalities = tuple(meta["modalities"])
    h0 = np.concatenate([projected[m] for m in modalities], axis=0)
    state, table, losses = smgcn.train(p_tilde, h0, ctx.S, cfg, modalities,
                                       meta["circle_ids"])
    dm.write_matrix(out / TRAIN_FILES["fused"], table.fused)
    for m in modalities:
        dm.write_matrix(out / TRAIN_FILES[m], table.modal[m])
    dm.write_checkpoint(out / TRAIN_FILES["model"], state.checkpoint_arrays())
    _write_json(out / TRAIN_FILES["losses"], {"objective": losses})
    _write_json(out / TRAIN_FILES["meta"], {
        "circle_ids": meta["circle_ids"],
        "modalities": list(modalities),
        "config_hash": cfg.hash(),
    })
    rep.write_csv(out / "loss.csv", ["epoch", "loss"],
                  list(enumerate(losses, start=1)))
    rep.fig_loss_curves({"objective": losses}, out / "loss.png")
    return {"inputs": [str(graph_dir), str(args.encode), str(args.spatial)],
            "outputs": [str(out)]}


def _load_embeddings(train_dir) -> tuple:
    tr = _need(train_dir, "training artifacts")
    meta_path = tr / TRAIN_FILES["meta"]
    emb_path = tr / TRAIN_FILES["fused"]
    if not meta_path.exists() or not emb_path.exists():
        raise ValidationError(f"missing training artifacts in {tr}; run 'train' first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    emb = dm.read_matrix(emb_path, kind="image").data.astype(np.float64)
    return emb, meta["circle_ids"]


def _labels_by_disease(ds, circle_ids) -> dict:
    missing = [cid for cid in circle_ids if cid not in ds.labels]
    if missing:
        raise ValidationError(f"labels missing for circles {missing[:3]}...")
    return {d: np.array([getattr(ds.labels[cid], d) for cid in circle_ids])
            for d in dm.DISEASES}


def _write_report(report, out):
    _write_json(out / "report.json", report.to_dict())
    rows = []
    for disease, block in report.per_disease.items():
        for i, f in enumerate(block["folds"]):
            rows.append((disease, i, f["mae"], f["rmse"], f["r2"]))
        m = block["mean"]
        rows.append((disease, "mean", m["mae"], m["rmse"], m["r2"]))
    rep.write_csv(out / "report.csv", ["disease", "fold", "mae", "rmse", "r2"], rows)
    rep.fig_eval_metrics(report.to_dict(), out / "metrics.png")


def cmd_eval(args, cfg):
    out = _out_dir(args, "eval")
    emb, circle_ids = _load_embeddings(args.train)
    ds = dm.load_dataset(_need(args.data, "dataset directory"))
    labels = _labels_by_disease(ds, circle_ids)
    report = ev.evaluate_embeddings(emb, labels, cfg, tag="full")
    _write_report(report, out)
    return {"inputs": [str(args.train), str(args.data)], "outputs": [str(out)]}


def cmd_ablate(args, cfg):
    tag = ABLATION_SLUGS.get(args.tag, args.tag)
    if tag not in ev.ABLATION_TAGS:
        raise ValidationError(f"unknown ablation tag '{args.tag}' "
                              f"(choose from {sorted(ABLATION_SLUGS)})")
    out = _out_dir(args, "ablate")
    slug = next(s for s, t in ABLATION_SLUGS.items() if t == tag)
    sub = out / slug
    sub.mkdir(parents=True, exist_ok=True)
    projected, meta = _load_encoded(args.encode)
    ctx, _ = _load_spatial(args.spatial)
    ds = dm.load_dataset(_need(args.data, "dataset directory"))
    labels = _labels_by_disease(ds, meta["circle_ids"])
    report = ev.run_ablation(tag, projected, ctx, labels, meta["circle_ids"], cfg)
    _write_report(report, sub)
    return {"inputs": [str(args.encode), str(args.spatial), str(args.data)],
            "outputs": [str(sub)]}


def cmd_cluster(args, cfg):
    out = _out_dir(args, "cluster")
    emb, circle_ids = _load_embeddings(args.train)
    assign, inertia = ev.kmeans(emb, args.k, cfg.rng_seed)
    try:
        lo, hi = (int(v) for v in args.k_range.split(":"))
    except ValueError as exc:
        raise ValidationError(f"--k-range must be lo:hi, got {args.k_range!r}") from exc
    curve = ev.elbow(emb, range(lo, hi + 1), cfg.rng_seed)
    _write_json(out / "clusters.json", {
        "k": args.k, "inertia": inertia,
        "assignments": {cid: int(a) for cid, a in zip(circle_ids, assign)},
        "elbow": [[k, v] for k, v in curve],
    })
    rep.write_csv(out / "clusters.csv", ["circle_id", "cluster"],
                  list(zip(circle_ids, (int(a) for a in assign))))
    rep.write_csv(out / "elbow.csv", ["k", "inertia"], curve)
    rep.fig_elbow(curve, out / "elbow.png")
    if emb.shape[1] >= 2 and emb.shape[0] > 2:
        points, _ = ev.pca_project(emb, 2)
        rep.fig_scatter(points, assign, out / "clusters.png")
    return {"inputs": [str(args.train)], "outputs": [str(out)]}


def cmd_similar(args, cfg):
    out = _out_dir(args, "similar")
    emb, circle_ids = _load_embeddings(args.train)
    ranked = ev.similar_circles(args.query, circle_ids, emb, args.top)
    _write_json(out / "similar.json", {
        "query": args.query,
        "results": [{"circle_id": cid, "cosine": score} for cid, score in ranked],
    })
    rep.write_csv(out / "similar.csv", ["rank", "circle_id", "cosine"],
                  [(i + 1, cid, repr(score)) for i, (cid, score) in enumerate(ranked)])
    return {"inputs": [str(args.train)], "outputs": [str(out)]}


def cmd_pca(args, cfg):
    out = _out_dir(args, "pca")
    emb, circle_ids = _load_embeddings(args.train)
    points, ratios = ev.pca_project(emb, 2)
    _write_json(out / "pca.json", {"explained_variance_ratios": list(map(float, ratios))})
    rep.write_csv(out / "pca.csv", ["circle_id", "pc1", "pc2"],
                  [(cid, repr(float(p[0])), repr(float(p[1])))
                   for cid, p in zip(circle_ids, points)])
    rep.fig_scatter(points, None, out / "pca.png")
    return {"inputs": [str(args.train)], "outputs": [str(out)]}


def cmd_streets(args, cfg):
    out = _out_dir(args, "streets")
    emb, circle_ids = _load_embeddings(args.train)
    ds = dm.load_dataset(_need(args.data, "dataset directory"))
    if not ds.streets:
        raise ValidationError("dataset carries no street assignment")
    streets, rows = ev.aggregate_streets(emb, circle_ids, ds.streets)
    dm.write_matrix(out / "street_embeddings.cgf", rows)
    _write_json(out / "streets_meta.json", {"street_ids": streets})
    counts = {s: 0 for s in streets}
    for cid, street in ds.streets.items():
        if street in counts:
            counts[street] += 1
    rep.write_csv(out / "streets.csv", ["street_id", "n_circles"],
                  [(s, counts[s]) for s in streets])
    return {"inputs": [str(args.train), str(args.data)], "outputs": [str(out)]}


def cmd_pipeline(args, cfg):
    root = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "out"))
    root.mkdir(parents=True, exist_ok=True)
    manifest = []

    def record(stage, fn, stage_args):
        t0 = time.perf_counter()
        info = fn(stage_args, cfg)
        entry = {
            "stage": stage,
            "inputs": info.get("inputs", []),
            "outputs": info.get("outputs", []),
            "config_hash": cfg.hash(),
            "seed": cfg.rng_seed,
            "wall_time_s": round(time.perf_counter() - t0, 3),
        }
        if "params" in info:
            entry["params"] = info["params"]
        manifest.append(entry)

    ns = argparse.Namespace
    if args.data:
        data_dir = Path(args.data)
    else:
        data_dir = root / "data"
        record("gen", cmd_gen, ns(out=str(data_dir), n_circles=args.n_circles,
                                  dim=args.dim, noise_scale=args.noise_scale))
    record("encode", cmd_encode, ns(data=str(data_dir), out=str(root / "encode")))
    record("spatial", cmd_spatial, ns(data=str(data_dir), out=str(root / "spatial")))
    record("graph", cmd_graph, ns(encode=str(root / "encode"),
                                  spatial=str(root / "spatial"),
                                  out=str(root / "graph")))
    record("train", cmd_train, ns(graph=str(root / "graph"),
                                  encode=str(root / "encode"),
                                  spatial=str(root / "spatial"),
                                  out=str(root / "train")))
    record("eval", cmd_eval, ns(train=str(root / "train"), data=str(data_dir),
                                out=str(root / "eval")))
    _write_json(root / "manifest.json", manifest)
    return {"outputs": [str(root)]}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(prog="livingcircles",
                       description="Urban living-circle health embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_text, **inputs):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help="output directory for this stage")
        for flag, help_str in inputs.items():
            p.add_argument(f"--{flag}", required=True, help=help_str)
        _add_config_flags(p)
        return p

    p = stage("gen", "generate a synthetic city")
    p.add_argument("--n-circles", type=int, default=50)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--noise-scale", type=float, default=0.1)

    stage("encode", "train modality encoders", data="dataset directory")
    stage("spatial", "spatial context matrices", data="dataset directory")
    stage("graph", "build the multi-modal graph",
          encode="encode artifacts", spatial="spatial artifacts")
    stage("train", "train the graph network", graph="graph artifacts",
          encode="encode artifacts", spatial="spatial artifacts")
    stage("eval", "K-fold disease prediction", train="training artifacts",
          data="dataset directory")

    p = stage("ablate", "run one ablation end to end", data="dataset directory",
              encode="encode artifacts", spatial="spatial artifacts")
    p.add_argument("--tag", required=True,
                   help="full|wo-t|wo-v|wo-p|wo-topk|t-only|v-only|p-only")

    p = stage("cluster", "k-means over embeddings", train="training artifacts")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--k-range", default="2:8", help="elbow sweep lo:hi")

    p = stage("similar", "rank circles by cosine similarity",
              train="training artifacts")
    p.add_argument("--query", required=True)
    p.add_argument("--top", type=int, default=10)

    stage("pca", "2-D projection of embeddings", train="training artifacts")
    stage("streets", "aggregate embeddings per street",
          train="training artifacts", data="dataset directory")

    p = stage("pipeline", "run every stage into one output root")
    p.add_argument("--data", help="existing dataset directory (skips gen)")
    p.add_argument("--n-circles", type=int, default=50)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--noise-scale", type=float, default=0.1)

    return parser


COMMANDS = {
    "gen": cmd_gen, "encode": cmd_encode, "spatial": cmd_spatial,
    "graph": cmd_graph, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "cluster": cmd_cluster, "similar": cmd_similar,
    "pca": cmd_pca, "streets": cmd_streets, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
