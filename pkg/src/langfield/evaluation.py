"""Open-vocabulary segmentation metrics and the scene benchmark harness.

Produces per-query IoU and localization hits, per-scene mIoU/mAcc, and an
unweighted overall mean across scenes, serialized as CSV plus an
aligned-column text table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .bundle import FrameBundle
from .lqc import LqcModel, decode
from .query import QuerySpec, localize, mask_from_relevancy, relevancy_from_features
from .splat import GaussianCloud, RenderConfig, render

DEFAULT_SWEEP = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class EvalCase:
    view: int
    query_id: str
    gt_mask: np.ndarray | None = None       # (H, W) bool
    box: tuple | None = None                # (r0, c0, r1, c1), inclusive

    def validate(self, shape: tuple[int, int]) -> None:
        if self.gt_mask is None and self.box is None:
            raise ValueError(f"case (view {self.view}, {self.query_id}): needs a mask or a box")
        if self.gt_mask is not None and self.gt_mask.shape != shape:
            raise ValueError(
                f"case (view {self.view}, {self.query_id}): mask shape {self.gt_mask.shape} != render {shape}"
            )


@dataclass
class QueryBank:
    ids: list[str]
    embeddings: np.ndarray    # (Q, C), unit rows

    def get(self, qid: str) -> np.ndarray | None:
        try:
            return self.embeddings[self.ids.index(qid)]
        except ValueError:
            return None


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty, 0.0 when exactly one is."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def localization_hit(point: tuple[int, int], case: EvalCase) -> bool:
    """True iff the peak point lies inside the ground-truth region (boundary inclusive)."""
    r, c = int(point[0]), int(point[1])
    if case.gt_mask is not None:
        return bool(case.gt_mask[r, c])
    r0, c0, r1, c1 = case.box
    return r0 <= r <= r1 and c0 <= c <= c1


def background_negative(cloud: GaussianCloud, lqc: LqcModel) -> np.ndarray | None:
    """Unit direction the empty background decodes to, used as a canonical negative."""
    fb = cloud.feature_background
    if fb is None:
        fb = np.zeros(cloud.latent_channels)
    vec = decode(lqc, fb.reshape(1, 1, -1)).reshape(-1)
    n = np.linalg.norm(vec)
    if n < 1e-12:
        return None
    return vec / n


def case_negatives(bank: QueryBank, qid: str, extra: np.ndarray | None) -> np.ndarray:
    rows = [bank.embeddings[i] for i, other in enumerate(bank.ids) if other != qid]
    if extra is not None:
        rows.append(extra)
    if not rows:
        # single-query bank with a void background: fall back to a fixed
        # direction orthogonal to the query
        q = bank.get(qid)
        probe = np.ones_like(q)
        probe -= (probe @ q) * q
        if np.linalg.norm(probe) < 1e-6:
            probe = np.zeros_like(q)
            probe[int(np.argmin(np.abs(q)))] = 1.0
            probe -= (probe @ q) * q
        rows.append(probe / np.linalg.norm(probe))
    return np.stack(rows)


def evaluate_scene(cloud: GaussianCloud, lqc: LqcModel, bundle: FrameBundle,
                   cases: list[EvalCase], bank: QueryBank, *,
                   threshold: float = 0.4, sweep: tuple = DEFAULT_SWEEP,
                   negatives: np.ndarray | None = None,
                   background=(0.0, 0.0, 0.0),
                   render_config: RenderConfig | None = None) -> dict:
    """Run every case against rendered feature images; returns the scene report.

    Negatives default to the other bank entries plus the decoded-background
    direction; pass an explicit (M, C) array to override. A case whose query
    embedding is missing from the bank is skipped and flagged.
    """
    rc = render_config or RenderConfig()
    bg_neg = background_negative(cloud, lqc) if negatives is None else None
    decoded_cache: dict[int, np.ndarray] = {}
    rows = []
    skipped = []
    for case in cases:
        emb = bank.get(case.query_id)
        if emb is None:
            skipped.append(case.query_id)
            rows.append({"view": case.view, "query": case.query_id, "skipped": True})
            continue
        if case.view not in decoded_cache:
            out = render(cloud, bundle.frames[case.view].camera, background=background, config=rc)
            decoded_cache[case.view] = decode(lqc, out.feature.astype(np.float64))
        decoded = decoded_cache[case.view]
        case.validate(decoded.shape[:2])
        negs = negatives if negatives is not None else case_negatives(bank, case.query_id, bg_neg)
        spec = QuerySpec(query_embedding=emb, canonical_negatives=negs, threshold=threshold)
        rmap = relevancy_from_features(decoded, spec)
        pred = mask_from_relevancy(rmap, threshold)
        peak = localize(rmap)
        gt = case.gt_mask if case.gt_mask is not None else _box_mask(case.box, rmap.values.shape)
        case_iou = iou(pred, gt)
        hit = bool(pred.any()) and localization_hit(peak, case)   # empty prediction counts as a miss
        sweep_ious = [iou(mask_from_relevancy(rmap, th), gt) for th in sweep]
        rows.append({
            "view": case.view, "query": case.query_id, "skipped": False,
            "iou": case_iou, "hit": hit, "peak": [int(peak[0]), int(peak[1])],
            "sweep_ious": sweep_ious,
        })
    live = [r for r in rows if not r["skipped"]]
    miou = float(np.mean([r["iou"] for r in live])) if live else 0.0
    macc = float(np.mean([1.0 if r["hit"] else 0.0 for r in live])) if live else 0.0
    if live:
        by_thr = [float(np.mean([r["sweep_ious"][k] for r in live])) for k in range(len(sweep))]
        best_k = int(np.argmax(by_thr))
        miou_best, best_thr = by_thr[best_k], float(sweep[best_k])
    else:
        by_thr, miou_best, best_thr = [], 0.0, threshold
    return {
        "scene": bundle.meta.scene, "threshold": threshold, "rows": rows,
        "miou": miou, "macc": macc,
        "sweep_thresholds": list(sweep), "miou_by_threshold": by_thr,
        "miou_best": miou_best, "best_threshold": best_thr,
        "skipped": skipped,
    }


def _box_mask(box, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    r0, c0, r1, c1 = box
    m[r0:r1 + 1, c0:c1 + 1] = True
    return m


def aggregate_reports(reports: list[dict]) -> dict:
    """Unweighted mean over scenes, mirroring an Overall table row."""
    return {
        "overall_miou": float(np.mean([r["miou"] for r in reports])) if reports else 0.0,
        "overall_macc": float(np.mean([r["macc"] for r in reports])) if reports else 0.0,
        "overall_miou_best": float(np.mean([r["miou_best"] for r in reports])) if reports else 0.0,
    }


def write_report_csv(path, reports: list[dict]) -> None:
    overall = aggregate_reports(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "view", "query", "iou", "hit", "peak_row", "peak_col", "skipped"])
        for rep in reports:
            for r in rep["rows"]:
                if r["skipped"]:
                    w.writerow([rep["scene"], r["view"], r["query"], "", "", "", "", "yes"])
                else:
                    w.writerow([rep["scene"], r["view"], r["query"], repr(r["iou"]),
                                int(r["hit"]), r["peak"][0], r["peak"][1], "no"])
        w.writerow([])
        w.writerow(["scene", "mAcc", "mIoU", "mIoU_best", "best_threshold"])
        for rep in reports:
            w.writerow([rep["scene"], repr(rep["macc"]), repr(rep["miou"]),
                        repr(rep["miou_best"]), repr(rep["best_threshold"])])
        w.writerow(["Overall", repr(overall["overall_macc"]), repr(overall["overall_miou"]),
                    repr(overall["overall_miou_best"]), ""])


def format_report_table(reports: list[dict]) -> str:
    overall = aggregate_reports(reports)
    rows = [("Scene", "mAcc(%)", "mIoU", "mIoU@best", "thr")]
    for rep in reports:
        rows.append((rep["scene"], f"{100 * rep['macc']:.2f}", f"{rep['miou']:.4f}",
                     f"{rep['miou_best']:.4f}", f"{rep['best_threshold']:.2f}"))
    rows.append(("Overall", f"{100 * overall['overall_macc']:.2f}",
                 f"{overall['overall_miou']:.4f}", f"{overall['overall_miou_best']:.4f}", ""))
    widths = [max(len(r[k]) for r in rows) for k in range(5)]
    lines = ["  ".join(val.ljust(widths[k]) for k, val in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# on-disk formats

def load_query_bank(blob_path, ids_path=None) -> QueryBank:
    """Load a (Q, C) little-endian float32 embedding blob plus its ids sidecar."""
    blob_path = Path(blob_path)
    ids_path = Path(ids_path) if ids_path else blob_path.with_suffix(".json")
    meta = json.loads(Path(ids_path).read_text())
    ids = [str(s) for s in meta["ids"]]
    channels = int(meta["channels"])
    raw = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if raw.size != len(ids) * channels:
        raise ValueError(f"{blob_path}: expected {len(ids)}x{channels} floats, got {raw.size}")
    return QueryBank(ids=ids, embeddings=raw.reshape(len(ids), channels).astype(np.float64))


def save_query_bank(bank: QueryBank, blob_path) -> None:
    blob_path = Path(blob_path)
    blob_path.write_bytes(np.ascontiguousarray(bank.embeddings, dtype="<f4").tobytes())
    blob_path.with_suffix(".json").write_text(json.dumps(
        {"ids": bank.ids, "channels": int(bank.embeddings.shape[1])}, indent=2) + "\n")


def load_cases(path) -> list[EvalCase]:
    """Case list JSON: [{"view": int, "query": str, "gt_mask": relpath?, "box": [r0,c0,r1,c1]?}]."""
    path = Path(path)
    payload = json.loads(path.read_text())
    cases = []
    for entry in payload["cases"]:
        gt = None
        if entry.get("gt_mask"):
            raw = cv2.imread(str(path.parent / entry["gt_mask"]), cv2.IMREAD_UNCHANGED)
            if raw is None:
                raise ValueError(f"cannot read ground-truth mask {entry['gt_mask']}")
            gt = raw.astype(bool) if raw.ndim == 2 else raw[..., 0].astype(bool)
        cases.append(EvalCase(
            view=int(entry["view"]), query_id=str(entry["query"]),
            gt_mask=gt, box=tuple(entry["box"]) if entry.get("box") else None,
        ))
    return cases


def save_cases(path, cases: list[dict], scene: str) -> None:
    Path(path).write_text(json.dumps({"scene": scene, "cases": cases}, indent=2) + "\n")
