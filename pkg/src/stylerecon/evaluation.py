"""Occupancy voxelization, 3D IoU and model evaluation reports."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import Mesh

RESOLUTION = 32
BOUNDS = (-1.0, 1.0)
# ray offsets (fractions of the extent) keep rays off shared edges and vertices
_JITTER = (1.0e-7 * 2 ** 0.5, 1.0e-7 * 3 ** 0.5)


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray       # (R, R, R) bool indexed [x, y, z]
    bounds: tuple = BOUNDS
    non_watertight: bool = False

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    def fraction(self) -> float:
        return float(self.occupancy.mean())


def cell_centers(resolution: int = RESOLUTION, bounds=BOUNDS) -> np.ndarray:
    lo, hi = bounds
    return lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution


def is_watertight(mesh: Mesh) -> bool:
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def voxelize(mesh: Mesh, bounds=BOUNDS, resolution: int = RESOLUTION) -> VoxelGrid:
    """Cell is occupied iff its centre is inside the mesh (parity of +x ray crossings)."""
    occ = np.zeros((resolution,) * 3, dtype=bool)
    if mesh.num_faces == 0:
        return VoxelGrid(occ, tuple(bounds))
    watertight = is_watertight(mesh)
    if not watertight:
        warnings.warn("voxelizing a non-watertight mesh; inside test may be unreliable")
    lo, hi = bounds
    ext = hi - lo
    centers = cell_centers(resolution, bounds)
    yy, zz = np.meshgrid(centers + _JITTER[0] * ext, centers + _JITTER[1] * ext, indexing="ij")
    ray_y, ray_z = yy.ravel(), zz.ravel()                       # ray r <-> (y index, z index)

    tri = mesh.vertices[mesh.faces]                             # (F, 3, 3)
    ay, az = tri[:, 0, 1], tri[:, 0, 2]
    by, bz = tri[:, 1, 1], tri[:, 1, 2]
    cy, cz = tri[:, 2, 1], tri[:, 2, 2]
    area = (by - ay) * (cz - az) - (bz - az) * (cy - ay)
    keep = np.abs(area) > 1e-15
    tri, ay, az, by, bz, cy, cz, area = (a[keep] for a in (tri, ay, az, by, bz, cy, cz, area))

    counts = np.zeros((len(ray_y), resolution + 1), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, len(tri)))
    for start in range(0, len(ray_y), chunk):
        py = ray_y[start:start + chunk, None]
        pz = ray_z[start:start + chunk, None]
        w0 = ((by - py) * (cz - pz) - (bz - pz) * (cy - py)) / area
        w1 = ((cy - py) * (az - pz) - (cz - pz) * (ay - py)) / area
        w2 = 1.0 - w0 - w1
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        r_idx, f_idx = np.nonzero(hit)
        x_hit = (w0[r_idx, f_idx] * tri[f_idx, 0, 0] + w1[r_idx, f_idx] * tri[f_idx, 1, 0]
                 + w2[r_idx, f_idx] * tri[f_idx, 2, 0])
        slot = np.searchsorted(centers, x_hit)                 # centres strictly left of the hit
        np.add.at(counts, (r_idx + start, slot), 1)
    total = counts.sum(1, keepdims=True)
    crossings_right = total - np.cumsum(counts, axis=1)[:, :resolution]   # hits with x > centre_i
    inside = (crossings_right % 2 == 1).reshape(resolution, resolution, resolution)  # [y, z, x]
    occ = inside.transpose(2, 0, 1)
    return VoxelGrid(occ, tuple(bounds), non_watertight=not watertight)


def iou3d(a: VoxelGrid, b: VoxelGrid) -> float:
    if tuple(a.bounds) != tuple(b.bounds) or a.occupancy.shape != b.occupancy.shape:
        raise ValueError("voxel grids differ in bounds or resolution")
    union = np.logical_or(a.occupancy, b.occupancy).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a.occupancy, b.occupancy).sum() / union)


# -- model evaluation -----------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list              # dicts: object_id, class, view, iou
    skipped: int = 0
    non_watertight: int = 0

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r["iou"] for r in self.rows])) if self.rows else float("nan")

    def per_class(self) -> dict:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["class"], []).append(r["iou"])
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}

    def summary(self) -> dict:
        per_class = self.per_class()
        return {"mean_iou": self.mean_iou,
                "class_mean_iou": float(np.mean(list(per_class.values()))) if per_class else float("nan"),
                "per_class": per_class, "num_rows": len(self.rows), "skipped": self.skipped,
                "non_watertight": self.non_watertight}

    def write(self, directory, prefix: str = "eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{prefix}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["object_id", "class", "view", "iou"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        json_path = directory / f"{prefix}.json"
        json_path.write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        return csv_path, json_path


def evaluate_meshes(items, predicted_vertices, faces, meshes=None) -> EvalReport:
    """Score predicted vertex arrays (one per item) against the items' ground truth.

    ``meshes`` optionally gives one predicted mesh per item (with its own
    faces) instead of ``predicted_vertices`` on shared ``faces``.
    """
    gt_cache: dict[str, VoxelGrid] = {}
    rows, skipped, open_meshes = [], 0, 0
    if meshes is None:
        meshes = [Mesh(np.asarray(v, dtype=np.float64), faces) for v in predicted_vertices]
    for item, pred_mesh in zip(items, meshes):
        if item.mesh is None:
            skipped += 1
            continue
        if item.object_id not in gt_cache:
            gt_cache[item.object_id] = voxelize(item.mesh)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pred = voxelize(pred_mesh)
        open_meshes += pred.non_watertight
        rows.append({"object_id": item.object_id, "class": item.class_id, "view": item.view,
                     "iou": iou3d(pred, gt_cache[item.object_id])})
    rows.sort(key=lambda r: (r["object_id"], r["view"]))
    return EvalReport(rows, skipped, open_meshes)


def predict_vertices(model, items, batch_size: int = 64) -> list[np.ndarray]:
    """Eval-mode reconstruction of every item image; deterministic given the weights."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(items), batch_size):
                imgs = torch.stack([it.image for it in items[start:start + batch_size]])
                out += list(model.vertices(imgs).double().numpy())
    finally:
        model.train(was_training)
    return out


def evaluate_model(model, items, batch_size: int = 64) -> EvalReport:
    """Reconstruct, voxelize and score every item against its ground-truth mesh."""
    usable = [it for it in items if it.mesh is not None]
    report = evaluate_meshes(usable, predict_vertices(model, usable, batch_size), model.template.faces)
    report.skipped += len(items) - len(usable)
    return report


def template_baseline(items, template: Mesh) -> EvalReport:
    """IoU of the undeformed template against every item (the untrained-model score)."""
    return evaluate_meshes(items, [template.vertices] * len(items), template.faces)


def _mean(values) -> float:
    values = list(values)
    if all(v == values[0] for v in values):   # identical runs average to themselves exactly
        return float(values[0])
    return math.fsum(values) / len(values)


def average_reports(reports) -> dict:
    """Per-run summaries and their average (runs are e.g. different seeds)."""
    summaries = [r.summary() for r in reports]
    classes = sorted({c for s in summaries for c in s["per_class"]})
    avg = {"mean_iou": _mean(s["mean_iou"] for s in summaries),
           "class_mean_iou": _mean(s["class_mean_iou"] for s in summaries),
           "per_class": {c: _mean(s["per_class"][c] for s in summaries if c in s["per_class"])
                         for c in classes}}
    return {"runs": summaries, "average": avg}


def silhouette_iou(model, records, views=(0,), smoothing: float | None = None) -> float:
    """Mean binary IoU between thresholded renderings of reconstructions and stored silhouettes.

    Reconstructs from each listed view and renders back into that same view.
    """
    from .renderer import DEFAULT_SMOOTHING, CameraBatch, render_batch

    smoothing = DEFAULT_SMOOTHING if smoothing is None else smoothing
    items = [it for it in _items_for(records, views)]
    verts = torch.as_tensor(np.stack(predict_vertices(model, [it for it, _, _ in items])))
    cams = CameraBatch.from_views([view for _, view, _ in items])
    with torch.no_grad():
        alpha = render_batch(verts, model.template.faces, cams, smoothing=smoothing)[:, 3].numpy()
    scores = []
    for a, (_, _, sil) in zip(alpha, items):
        pred, gt = a > 0.5, sil > 0.5
        union = np.logical_or(pred, gt).sum()
        scores.append(np.logical_and(pred, gt).sum() / union if union else 1.0)
    return float(np.mean(scores))


def _items_for(records, views):
    from .data import EvalItem, pad_alpha

    for r in records:
        for k in views:
            img = torch.as_tensor(pad_alpha(r.images[k]), dtype=torch.float32).permute(2, 0, 1)
            yield EvalItem(r.object_id, r.class_id, int(k), img, r.mesh), r.views[k], r.silhouettes[k]
