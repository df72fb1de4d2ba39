"""Command-line pipeline driver.

Subcommands: synth-gen, lqc-train, lqc-bench, field-train, render, query,
eval, validate. All flags are long-form; values from --config JSON files are
overridden by explicit flags; every run writes a ``run_manifest.json`` beside
its outputs. Failures print a single machine-parsable JSON line to stderr and
exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__, evaluation, fields, lqc, query as query_mod, rawio, splat, synth
from .bundle import BundleValidationError, read_bundle, write_bundle
from .optim import TrainingDivergedError


def _setup_workers(args) -> None:
    workers = getattr(args, "workers", None)
    if workers is None:
        env = os.environ.get("LANGFIELD_WORKERS")
        workers = int(env) if env else None
    if getattr(args, "deterministic", False):
        workers = 1          # reproducibility forces single-threaded reductions
    if workers is not None:
        torch.set_num_threads(max(1, workers))


def _write_run_manifest(out_dir: Path, command: str, config: dict, seed=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rawio.write_json(out_dir / "run_manifest.json", {
        "command": command,
        "config": config,
        "seed": seed if seed is not None else config.get("seed"),
        "versions": {
            "langfield": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    })


def _write_curve_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in columns])


def _merge_config(defaults: dict, args, keys: list[str]) -> dict:
    """defaults <- --config file <- explicit flags."""
    resolved = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        file_cfg = json.loads(Path(cfg_path).read_text())
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            resolved[key] = val
    return resolved


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def _float_list(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip() != ""]


# ---------------------------------------------------------------------------
# synth-gen

SYNTH_DEFAULTS = {
    "preset": "two-sphere-box", "views": 17, "size": 128, "points": 2200,
    "feature_channels": 512, "feature_downsample": 2, "seed": 0,
    "emit_eval": False, "eval_views": None,
}


def cmd_synth_gen(args) -> dict:
    cfg = dict(SYNTH_DEFAULTS)
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if args.show_config:
        return cfg
    if args.spec:
        scene = synth.scene_from_spec(json.loads(Path(args.spec).read_text()))
    else:
        scene = synth.two_spheres_box(views=cfg["views"], size=cfg["size"],
                                      feature_channels=cfg["feature_channels"],
                                      n_points=cfg["points"])
        scene.feature_downsample = cfg["feature_downsample"]
    bundle = synth.generate(scene, seed=cfg["seed"])
    out = Path(args.out)
    write_bundle(bundle, out)

    labels = scene.labels()
    dictionary = scene.label_dictionary or synth.make_label_dictionary(
        labels, scene.feature_channels, cfg["seed"], scene.dictionary_cos_max)
    ids = [f"label_{lab}" for lab in labels]
    bank = evaluation.QueryBank(ids=ids, embeddings=np.stack([dictionary[lab] for lab in labels]))
    evaluation.save_query_bank(bank, out / "queries.f32")

    if cfg["emit_eval"]:
        eval_views = cfg["eval_views"] if cfg["eval_views"] is not None else list(range(len(bundle.frames)))
        gt_dir = out / "gt"
        gt_dir.mkdir(exist_ok=True)
        lid_of = {lab: i + 1 for i, lab in enumerate(labels)}
        case_rows = []
        for vi in eval_views:
            lmask = bundle.frames[vi].masks.levels["l"]
            for lab in labels:
                gt = (lmask == lid_of[lab]).astype(np.uint8) * 255
                name = f"v{vi:03d}_label_{lab}.png"
                cv2.imwrite(str(gt_dir / name), gt)
                case_rows.append({"view": vi, "query": f"label_{lab}", "gt_mask": f"gt/{name}"})
        evaluation.save_cases(out / "eval_cases.json", case_rows, scene.name)
    _write_run_manifest(out, "synth-gen", cfg)
    print(f"wrote bundle with {len(bundle.frames)} frames to {out}")
    return cfg


# ---------------------------------------------------------------------------
# lqc-train

LQC_DEFAULTS = {
    "steps": 1500, "codebook_size": 64, "latent": 3, "hidden": 256,
    "batch_pixels": 512, "lr": 1e-3, "lambda1": 1.0, "lambda2": 0.2, "lambda3": 0.5,
    "beta": 0.0, "dead_code_steps": 2000, "seed": 0, "log_every": 1,
}


def _load_text_bank(path: Path | None, bundles: list, channels: int, seed: int) -> lqc.TextBank:
    if path and Path(path).exists():
        bank = evaluation.load_query_bank(path)
        return lqc.TextBank(queries=bank.embeddings)
    for b in bundles:
        candidate = Path(b) / "queries.f32"
        if candidate.exists():
            bank = evaluation.load_query_bank(candidate)
            return lqc.TextBank(queries=bank.embeddings)
    rng = np.random.default_rng(np.random.PCG64(seed ^ 0x7E57))
    q = rng.standard_normal((32, channels))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return lqc.TextBank(queries=q)


def cmd_lqc_train(args) -> dict:
    cfg = _merge_config(LQC_DEFAULTS, args, list(LQC_DEFAULTS))
    if args.show_config:
        return cfg
    bundles = [read_bundle(p) for p in args.bundle]
    channels = bundles[0].meta.feature_channels
    bank = _load_text_bank(args.queries, args.bundle, channels, cfg["seed"])
    dataset = [(fr.clip_features.data, bank) for b in bundles for fr in b.frames]
    tcfg = lqc.LqcTrainConfig(
        channels=channels, latent=cfg["latent"], hidden=cfg["hidden"],
        codebook_size=cfg["codebook_size"],
        lambdas=(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]), beta=cfg["beta"],
        steps=cfg["steps"], batch_pixels=cfg["batch_pixels"], lr=cfg["lr"],
        dead_code_steps=cfg["dead_code_steps"], seed=cfg["seed"], log_every=cfg["log_every"],
    )
    model, curve = lqc.train_lqc(dataset, tcfg)
    out = Path(args.out)
    lqc.save_lqc(model, out)
    _write_curve_csv(out / "curve.csv", curve, ["step", "l_r", "l_emb", "l_mask", "l_lqc"])
    _write_run_manifest(out, "lqc-train", cfg)
    print(f"trained compressor: final L_r {curve[-1]['l_r']:.3e}, checkpoint at {out}")
    return cfg


# ---------------------------------------------------------------------------
# lqc-bench

BENCH_DEFAULTS = {
    "clusters": 32, "channels": 512, "samples_per_cluster": 64, "noise": 0.005,
    "steps": 2000, "codebook_size": 64, "latent": 3, "hidden": 256,
    "batch_pixels": 512, "lr": 1e-3, "lambda2": 0.2, "lambda3": 0.5,
    "dead_code_steps": 50, "seed": 0, "plot": False,
}


def make_cluster_features(clusters: int, channels: int, samples_per_cluster: int,
                          noise: float, seed: int) -> np.ndarray:
    """Unit-normalized synthetic features drawn around random unit cluster centers."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    centers = rng.standard_normal((clusters, channels))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    reps = np.repeat(centers, samples_per_cluster, axis=0)
    if noise > 0:
        reps = reps + rng.normal(0.0, noise, size=reps.shape)
    reps /= np.linalg.norm(reps, axis=1, keepdims=True)
    return reps.astype(np.float32)


def dataset_mse(model: lqc.LqcModel, feats: np.ndarray, quantized: bool = True) -> float:
    z = lqc.encode(model, feats)
    if quantized:
        z, _ = lqc.quantize(model.codebook, z)
    x_hat = lqc.decode(model, z)
    return float(np.mean((feats.astype(np.float64) - x_hat) ** 2))


def cmd_lqc_bench(args) -> dict:
    cfg = _merge_config(BENCH_DEFAULTS, args, list(BENCH_DEFAULTS))
    if args.show_config:
        return cfg
    feats = make_cluster_features(cfg["clusters"], cfg["channels"],
                                  cfg["samples_per_cluster"], cfg["noise"], cfg["seed"])
    rng = np.random.default_rng(np.random.PCG64(cfg["seed"] ^ 0xBE7C))
    q = rng.standard_normal((32, cfg["channels"]))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    bank = lqc.TextBank(queries=q)
    tcfg = lqc.LqcTrainConfig(
        channels=cfg["channels"], latent=cfg["latent"], hidden=cfg["hidden"],
        codebook_size=cfg["codebook_size"], lambdas=(1.0, cfg["lambda2"], cfg["lambda3"]),
        steps=cfg["steps"], batch_pixels=cfg["batch_pixels"], lr=cfg["lr"],
        dead_code_steps=cfg["dead_code_steps"], seed=cfg["seed"],
    )
    dataset = [(feats, bank)]
    model, curve = lqc.train_lqc(dataset, tcfg)
    ae_model, ae_curve = lqc.train_autoencoder_baseline(dataset, tcfg)
    lqc_mse = dataset_mse(model, feats, quantized=True)
    ae_mse = dataset_mse(ae_model, feats, quantized=False)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_curve_csv(out / "lqc_curve.csv", curve, ["step", "l_r", "l_emb", "l_mask", "l_lqc"])
    _write_curve_csv(out / "autoencoder_curve.csv", ae_curve, ["step", "l_r", "l_emb", "l_mask", "l_lqc"])
    summary = {
        "lqc_final_mse": lqc_mse, "autoencoder_final_mse": ae_mse,
        "lqc_beats_autoencoder": bool(lqc_mse < ae_mse),
        "steps": cfg["steps"], "codebook_size": cfg["codebook_size"], "latent": cfg["latent"],
    }
    rawio.write_json(out / "summary.json", summary)
    lqc.save_lqc(model, out / "lqc_model")
    if cfg["plot"]:
        _plot_bench(out, curve, ae_curve)
    _write_run_manifest(out, "lqc-bench", cfg)
    print(f"quantized {lqc_mse:.3e} vs autoencoder {ae_mse:.3e} "
          f"({'quantized wins' if lqc_mse < ae_mse else 'autoencoder wins'})")
    return cfg


def _plot_bench(out: Path, curve, ae_curve) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy([r["step"] for r in curve], [max(r["l_r"], 1e-12) for r in curve], label="quantized")
    ax.semilogy([r["step"] for r in ae_curve], [max(r["l_r"], 1e-12) for r in ae_curve], label="autoencoder")
    ax.set_xlabel("step")
    ax.set_ylabel("reconstruction MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# field-train

FIELD_DEFAULTS = {
    "phase1_steps": 5000, "phase2_steps": 5000, "t_n": 2000, "tau_deg": 30.0,
    "pair_samples": 32, "level": "l",
    "w_rgb": 1.0, "w_normal": 0.05, "w_latent": 1.0, "w_s2d": 0.1, "w_s3d": 0.1,
    "lr_position": 2e-4, "lr_scale": 5e-3, "lr_rotation": 1e-3, "lr_opacity": 5e-2,
    "lr_color": 1e-2, "lr_normal": 1e-2, "lr_feature": 2.5e-2,
    "prune_every": 1000, "prune_opacity": 0.005, "assign_every": 500,
    "seed": 0, "background": [0.0, 0.0, 0.0], "holdout": [],
    "eval_every": 0, "checkpoint_every": 0, "log_every": 1,
}


def _field_config(cfg: dict) -> fields.FieldConfig:
    return fields.FieldConfig(
        phase1_steps=cfg["phase1_steps"], phase2_steps=cfg["phase2_steps"],
        t_n=cfg["t_n"], tau_thr=math.radians(cfg["tau_deg"]),
        pair_samples=cfg["pair_samples"], level=cfg["level"],
        w_rgb=cfg["w_rgb"], w_normal=cfg["w_normal"], w_latent=cfg["w_latent"],
        w_s2d=cfg["w_s2d"], w_s3d=cfg["w_s3d"],
        lr_position=cfg["lr_position"], lr_scale=cfg["lr_scale"],
        lr_rotation=cfg["lr_rotation"], lr_opacity=cfg["lr_opacity"],
        lr_color=cfg["lr_color"], lr_normal=cfg["lr_normal"], lr_feature=cfg["lr_feature"],
        prune_every=cfg["prune_every"], prune_opacity=cfg["prune_opacity"],
        assign_every=cfg["assign_every"], seed=cfg["seed"],
        background=tuple(cfg["background"]), holdout_views=tuple(cfg["holdout"]),
        eval_every=cfg["eval_every"], checkpoint_every=cfg["checkpoint_every"],
        log_every=cfg["log_every"],
    )


def cmd_field_train(args) -> dict:
    cfg = _merge_config(FIELD_DEFAULTS, args, list(FIELD_DEFAULTS))
    if args.show_config:
        return cfg
    bundle = read_bundle(args.bundle)
    model = lqc.load_lqc(args.lqc)
    fconfig = _field_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint_cb(step, cloud_snapshot):
        splat.save_cloud(cloud_snapshot, out / "checkpoints" / f"step_{step + 1:06d}")

    cloud, history = fields.train_field(bundle, model, fconfig,
                                        checkpoint_cb=checkpoint_cb if cfg["checkpoint_every"] else None)
    splat.save_cloud(cloud, out / "cloud")
    cols = ["step", "phase", "l_rgb", "l_normal", "l_latent", "l_s2d", "l_s3d", "total", "psnr_holdout"]
    _write_curve_csv(out / "loss_curve.csv", history, cols)
    _write_run_manifest(out, "field-train", cfg)
    msg = f"trained field with {cloud.size} Gaussians, checkpoint at {out / 'cloud'}"
    if cfg["holdout"]:
        msg += f"; holdout PSNR {fields.evaluate_psnr(cloud, bundle, fconfig):.2f} dB"
    print(msg)
    return cfg


# ---------------------------------------------------------------------------
# render / query / eval / validate

RENDER_DEFAULTS = {"view": 0, "background": [0.0, 0.0, 0.0]}


def cmd_render(args) -> dict:
    cfg = _merge_config(RENDER_DEFAULTS, args, list(RENDER_DEFAULTS))
    if args.show_config:
        return cfg
    bundle = read_bundle(args.bundle)
    cloud = splat.load_cloud(args.cloud)
    cam = bundle.frames[cfg["view"]].camera
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = splat.render(cloud, cam, background=tuple(cfg["background"]), dtype=torch.float32)
    rawio.write_rgb8_png(out_dir / "rgb.png", result.rgb)
    rawio.write_unit16_png(out_dir / "normal.png", result.normal)
    cv2.imwrite(str(out_dir / "alpha.png"),
                np.clip(np.rint(result.alpha[..., 0] * 255), 0, 255).astype(np.uint8))
    rawio.write_f32(out_dir / "depth.f32", result.depth)
    rawio.write_f32(out_dir / "feature.f32", result.feature)
    rawio.write_json(out_dir / "render_meta.json", {
        "view": cfg["view"], "height": cam.height, "width": cam.width,
        "feature_channels": int(result.feature.shape[2]),
    })
    _write_run_manifest(out_dir, "render", cfg, seed=getattr(args, "seed", None))
    print(f"rendered view {cfg['view']} to {out_dir}")
    return cfg


QUERY_DEFAULTS = {"view": 0, "threshold": 0.4, "background": [0.0, 0.0, 0.0], "query_id": None}


def _resolve_negatives(args_negatives, bank, qid, cloud, model):
    if args_negatives and args_negatives != "auto":
        neg_bank = evaluation.load_query_bank(args_negatives)
        return neg_bank.embeddings
    extra = evaluation.background_negative(cloud, model)
    return evaluation.case_negatives(bank, qid, extra)


def cmd_query(args) -> dict:
    cfg = _merge_config(QUERY_DEFAULTS, args, list(QUERY_DEFAULTS))
    if args.show_config:
        return cfg
    bundle = read_bundle(args.bundle)
    cloud = splat.load_cloud(args.cloud)
    model = lqc.load_lqc(args.lqc)
    bank = evaluation.load_query_bank(args.queries)
    qids = [cfg["query_id"]] if cfg["query_id"] else list(bank.ids)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cam = bundle.frames[cfg["view"]].camera
    result = splat.render(cloud, cam, background=tuple(cfg["background"]), dtype=torch.float32)
    summary = []
    for qid in qids:
        emb = bank.get(qid)
        if emb is None:
            raise ValueError(f"query id {qid!r} not in {args.queries}")
        negs = _resolve_negatives(args.negatives, bank, qid, cloud, model)
        spec = query_mod.QuerySpec(query_embedding=emb, canonical_negatives=negs,
                                   threshold=cfg["threshold"])
        rmap = query_mod.relevancy_map(result, model, spec)
        mask = query_mod.mask_from_relevancy(rmap, cfg["threshold"])
        peak = query_mod.localize(rmap)
        rawio.write_f32(out_dir / f"{qid}_relevancy.f32", rmap.values)
        heat = cv2.applyColorMap((np.clip(rmap.values, 0, 1) * 255).astype(np.uint8),
                                 cv2.COLORMAP_JET)
        cv2.imwrite(str(out_dir / f"{qid}_relevancy.png"), heat)
        cv2.imwrite(str(out_dir / f"{qid}_mask.png"), mask.astype(np.uint8) * 255)
        summary.append({"query": qid, "peak": [int(peak[0]), int(peak[1])],
                        "max_relevancy": float(rmap.values.max()),
                        "mask_pixels": int(mask.sum())})
    rawio.write_json(out_dir / "query_results.json", {"view": cfg["view"], "results": summary})
    _write_run_manifest(out_dir, "query", cfg, seed=getattr(args, "seed", None))
    for s in summary:
        print(f"{s['query']}: peak {tuple(s['peak'])}, max relevancy {s['max_relevancy']:.3f}, "
              f"{s['mask_pixels']} px above threshold")
    return cfg


EVAL_DEFAULTS = {"threshold": 0.4, "background": [0.0, 0.0, 0.0]}


def cmd_eval(args) -> dict:
    cfg = _merge_config(EVAL_DEFAULTS, args, list(EVAL_DEFAULTS))
    if args.show_config:
        return cfg
    bundle = read_bundle(args.bundle)
    cloud = splat.load_cloud(args.cloud)
    model = lqc.load_lqc(args.lqc)
    bank = evaluation.load_query_bank(args.queries)
    cases = evaluation.load_cases(args.cases)
    report = evaluation.evaluate_scene(
        cloud, model, bundle, cases, bank,
        threshold=cfg["threshold"], background=tuple(cfg["background"]))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_csv(out_dir / "report.csv", [report])
    table = evaluation.format_report_table([report])
    (out_dir / "report.txt").write_text(table + "\n")
    rawio.write_json(out_dir / "report.json", report)
    _write_run_manifest(out_dir, "eval", cfg, seed=getattr(args, "seed", None))
    print(table)
    return cfg


def cmd_validate(args) -> dict:
    if args.show_config:
        return {}
    bundle = read_bundle(args.bundle)
    print(f"OK: {len(bundle.frames)} frames, C={bundle.meta.feature_channels}, "
          f"{bundle.init_points.shape[0]} init points")
    return {}


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langfield", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible runs")
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--show-config", action="store_true",
                        help="print the resolved configuration and exit")
        sp.add_argument("--config", default=None, help="JSON config file (flags override)")

    sp = sub.add_parser("synth-gen", help="generate a synthetic frame bundle with ground truth")
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=["two-sphere-box"], default=None)
    sp.add_argument("--spec", default=None, help="scene spec JSON (overrides --preset)")
    sp.add_argument("--views", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--points", type=int, default=None)
    sp.add_argument("--feature-channels", type=int, default=None)
    sp.add_argument("--feature-downsample", type=int, default=None)
    sp.add_argument("--emit-eval", action="store_true", default=None)
    sp.add_argument("--eval-views", type=_int_list, default=None)
    common(sp)
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("lqc-train", help="train the language quantized compressor")
    sp.add_argument("--bundle", action="append", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--queries", default=None, help="text bank blob (default: bundle/queries.f32)")
    for flag, typ in (("steps", int), ("codebook-size", int), ("latent", int), ("hidden", int),
                      ("batch-pixels", int), ("lr", float), ("lambda1", float), ("lambda2", float),
                      ("lambda3", float), ("beta", float), ("dead-code-steps", int),
                      ("log-every", int)):
        sp.add_argument(f"--{flag}", type=typ, default=None)
    common(sp)
    sp.set_defaults(func=cmd_lqc_train)

    sp = sub.add_parser("lqc-bench", help="quantized-vs-autoencoder comparison on synthetic clusters")
    sp.add_argument("--out", required=True)
    for flag, typ in (("clusters", int), ("channels", int), ("samples-per-cluster", int),
                      ("noise", float), ("steps", int), ("codebook-size", int), ("latent", int),
                      ("hidden", int), ("batch-pixels", int), ("lr", float),
                      ("lambda2", float), ("lambda3", float), ("dead-code-steps", int)):
        sp.add_argument(f"--{flag}", type=typ, default=None)
    sp.add_argument("--plot", action="store_true", default=None)
    common(sp)
    sp.set_defaults(func=cmd_lqc_bench)

    sp = sub.add_parser("field-train", help="fit a Gaussian surface field to a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--lqc", required=True)
    sp.add_argument("--out", required=True)
    for flag, typ in (("phase1-steps", int), ("phase2-steps", int), ("t-n", int),
                      ("tau-deg", float), ("pair-samples", int),
                      ("w-rgb", float), ("w-normal", float), ("w-latent", float),
                      ("w-s2d", float), ("w-s3d", float),
                      ("lr-position", float), ("lr-scale", float), ("lr-rotation", float),
                      ("lr-opacity", float), ("lr-color", float), ("lr-normal", float),
                      ("lr-feature", float), ("prune-every", int), ("prune-opacity", float),
                      ("assign-every", int), ("eval-every", int), ("checkpoint-every", int),
                      ("log-every", int)):
        sp.add_argument(f"--{flag}", type=typ, default=None)
    sp.add_argument("--level", choices=["s", "m", "l"], default=None)
    sp.add_argument("--holdout", type=_int_list, default=None)
    sp.add_argument("--background", type=_float_list, default=None)
    common(sp)
    sp.set_defaults(func=cmd_field_train)

    sp = sub.add_parser("render", help="render a trained cloud from a bundle camera")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--view", type=int, default=None)
    sp.add_argument("--background", type=_float_list, default=None)
    common(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("query", help="open-vocabulary text query against a trained field")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--lqc", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--queries", required=True, help="query embedding blob (.f32 + .json sidecar)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--query-id", default=None, help="single id from the bank (default: all)")
    sp.add_argument("--view", type=int, default=None)
    sp.add_argument("--threshold", type=float, default=None)
    sp.add_argument("--negatives", default="auto",
                    help="'auto' (other bank entries + background) or a negatives blob")
    sp.add_argument("--background", type=_float_list, default=None)
    common(sp)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("eval", help="mIoU/mAcc benchmark over an eval case list")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--lqc", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--cases", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=None)
    sp.add_argument("--background", type=_float_list, default=None)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("validate", help="validate a frame bundle directory")
    sp.add_argument("--bundle", required=True)
    common(sp)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_workers(args)
    try:
        cfg = args.func(args)
        if args.show_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    except (BundleValidationError, TrainingDivergedError, ValueError, OSError) as e:
        print(json.dumps({"error": str(e), "type": type(e).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
