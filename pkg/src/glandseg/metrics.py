"""Pixel- and object-level segmentation quality measures.

Pixel scores come from the binary confusion counts; the object score is a
detection F1 where predicted and ground-truth 4-connected components are
greedily matched by descending IoU and a pair counts once its IoU clears
the threshold.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int


def confusion(pred: np.ndarray, gt: np.ndarray) -> Confusion:
    """Pixel counts of the four binary outcomes."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return Confusion(tp=int(np.sum(p & g)), fp=int(np.sum(p & ~g)),
                     fn=int(np.sum(~p & g)), tn=int(np.sum(~p & ~g)))


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2*TP / (2*TP + FP + FN); 1.0 when both masks are empty."""
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of foreground and background IoU; an absent class scores 1.0."""
    c = confusion(pred, gt)
    fg_denom = c.tp + c.fp + c.fn
    bg_denom = c.tn + c.fp + c.fn
    iou_fg = 1.0 if fg_denom == 0 else c.tp / fg_denom
    iou_bg = 1.0 if bg_denom == 0 else c.tn / bg_denom
    return 0.5 * (iou_fg + iou_bg)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of a binary mask, labeled 1..n in raster order."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for r0 in range(h):
        for c0 in range(w):
            if mask[r0, c0] and labels[r0, c0] == 0:
                count += 1
                labels[r0, c0] = count
                queue = deque([(r0, c0)])
                while queue:
                    r, c = queue.popleft()
                    for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] \
                                and labels[rr, cc] == 0:
                            labels[rr, cc] = count
                            queue.append((rr, cc))
    return labels, count


def object_f1(pred: np.ndarray, gt: np.ndarray, iou_threshold: float = 0.5) -> float:
    """Detection F1 over 4-connected objects at the given IoU threshold.

    Pairs are visited in descending IoU (ties by lowest predicted then
    ground-truth component id), each object matched at most once, and a
    pair counts only when its IoU strictly exceeds the threshold. Both
    masks empty scores 1.0; exactly one empty scores 0.0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    pl, np_ = connected_components(pred.astype(bool))
    gl, ng = connected_components(gt.astype(bool))
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    both = (pl > 0) & (gl > 0)
    joint = pl[both].astype(np.int64) * (ng + 1) + gl[both]
    inter = np.bincount(joint, minlength=(np_ + 1) * (ng + 1))
    p_area = np.bincount(pl.ravel(), minlength=np_ + 1)
    g_area = np.bincount(gl.ravel(), minlength=ng + 1)
    cand = []
    for pid in range(1, np_ + 1):
        for gid in range(1, ng + 1):
            i = int(inter[pid * (ng + 1) + gid])
            if i > 0:
                iou = i / (int(p_area[pid]) + int(g_area[gid]) - i)
                cand.append((-iou, pid, gid, iou))
    cand.sort()
    used_p = set()
    used_g = set()
    matches = 0
    for _, pid, gid, iou in cand:
        if pid in used_p or gid in used_g or iou <= iou_threshold:
            continue
        used_p.add(pid)
        used_g.add(gid)
        matches += 1
    if matches == 0:
        return 0.0
    precision = matches / np_
    recall = matches / ng
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ImageEval:
    name: str
    f1: float
    dice: float
    miou: float


@dataclass(frozen=True)
class EvalReport:
    """Per-image scores plus arithmetic means over the dataset."""

    images: tuple[ImageEval, ...]
    mean_f1: float
    mean_dice: float
    mean_miou: float
    fingerprint: str = ""

    @property
    def count(self) -> int:
        return len(self.images)


def evaluate_dataset(pairs, iou_threshold: float = 0.5,
                     fingerprint: str = "") -> EvalReport:
    """Score (name, pred, gt) triples; ordering by name, means unweighted."""
    rows = []
    for name, pred, gt in sorted(pairs, key=lambda t: t[0]):
        rows.append(ImageEval(name=name,
                              f1=object_f1(pred, gt, iou_threshold),
                              dice=dice(pred, gt),
                              miou=miou(pred, gt)))
    n = len(rows)
    return EvalReport(
        images=tuple(rows),
        mean_f1=sum(r.f1 for r in rows) / n if n else 0.0,
        mean_dice=sum(r.dice for r in rows) / n if n else 0.0,
        mean_miou=sum(r.miou for r in rows) / n if n else 0.0,
        fingerprint=fingerprint)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "count": report.count,
        "fingerprint": report.fingerprint,
        "mean": {"f1": report.mean_f1, "dice": report.mean_dice,
                 "miou": report.mean_miou},
        "images": [{"image": r.name, "f1": r.f1, "dice": r.dice, "miou": r.miou}
                   for r in report.images],
    }


def write_report_json(report: EvalReport, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("image,f1,dice,miou\n")
        for r in report.images:
            fh.write(f"{r.name},{r.f1:.6f},{r.dice:.6f},{r.miou:.6f}\n")
        fh.write(f"MEAN,{report.mean_f1:.6f},{report.mean_dice:.6f},"
                 f"{report.mean_miou:.6f}\n")
