"""Evaluation protocols: segmentation (ARI, split ratios), retrieval,
QA accuracy, referring-expression recall, and scene-graph concept
quantification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .scene import SceneRecord
from .programs import Program


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmentationEval:
    ari: float
    gt_split: float
    pred_split: float
    coverage: float


@dataclass(frozen=True)
class SceneGraphEval:
    precision: float
    recall: float
    threshold: float


def pixel_assign(masks: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over slot masks (K, H, W); ties go to the lowest slot."""
    if masks.ndim != 3 or masks.shape[0] < 1:
        raise ValueError("masks must be a non-empty (K, H, W) array")
    return np.argmax(masks, axis=0)


def ari(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    exclude: Optional[np.ndarray] = None,
) -> float:
    """Adjusted Rand Index via the contingency-table formula.

    `exclude` marks pixels left out of the computation (by convention, the
    ground-truth background).
    """
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    if pred.shape != gt.shape:
        raise ValueError("label maps must have the same shape")
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool).ravel()
        pred, gt = pred[keep], gt[keep]
    n = pred.size
    if n < 2:
        raise EvaluationError("ARI undefined on fewer than 2 included pixels")
    _, pred_c = np.unique(pred, return_inverse=True)
    _, gt_c = np.unique(gt, return_inverse=True)
    table = np.zeros((gt_c.max() + 1, pred_c.max() + 1), dtype=np.int64)
    np.add.at(table, (gt_c, pred_c), 1)

    def comb2(x):
        x = x.astype(np.float64)
        return x * (x - 1.0) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = n * (n - 1.0) / 2.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def gt_label_map(record: SceneRecord) -> np.ndarray:
    """Integer label map: 0 for background, i+1 for object i."""
    labels = np.zeros(record.shape, dtype=np.int64)
    for i, obj in enumerate(record.objects):
        labels[obj.mask] = i + 1
    return labels


def split_ratios(
    masks: np.ndarray, gt_objects: Sequence[np.ndarray], coverage: float = 0.2
) -> tuple[float, float]:
    """GT Split and Pred Split ratios at a coverage threshold.

    A prediction mask covers an object if, in the pixel-assignment map, it
    holds at least `coverage` of the object's pixels.
    """
    if not (0.0 < coverage <= 1.0):
        raise ValueError("coverage must lie in (0, 1]")
    if len(gt_objects) == 0:
        raise ValueError("gt_objects must be non-empty")
    assign = pixel_assign(masks)
    K = masks.shape[0]
    covers = np.zeros((K, len(gt_objects)), dtype=bool)
    for j, obj in enumerate(gt_objects):
        area = obj.sum()
        for k in range(K):
            covers[k, j] = ((assign == k) & obj).sum() >= coverage * area
    objects_covered = covers.sum(axis=0)
    masks_covering = covers.sum(axis=1)
    gt_denom = (objects_covered > 0).sum()
    pred_denom = (masks_covering > 0).sum()
    gt_split = float((objects_covered > 1).sum() / gt_denom) if gt_denom else 0.0
    pred_split = float((masks_covering > 1).sum() / pred_denom) if pred_denom else 0.0
    return gt_split, pred_split


def segmentation_eval(
    masks: np.ndarray, record: SceneRecord, coverage: float = 0.2,
    include_background: bool = False,
) -> SegmentationEval:
    assign = pixel_assign(masks)
    exclude = None if include_background else record.background
    return SegmentationEval(
        ari=ari(assign, gt_label_map(record), exclude=exclude),
        gt_split=split_ratios(masks, [o.mask for o in record.objects], coverage)[0],
        pred_split=split_ratios(masks, [o.mask for o in record.objects], coverage)[1],
        coverage=coverage,
    )


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def retrieval_eval(
    encodings: Sequence,
    records: Sequence[SceneRecord],
    k: int,
    n_samples: int = 1000,
    iou_min: float = 0.75,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Mean fraction of k nearest neighbours (Euclidean over slot latents)
    sharing the query slot's matched object category.

    Only slots whose assigned-pixel region reaches `iou_min` IoU with some
    ground-truth object are candidates.
    """
    rng = rng or np.random.default_rng(0)
    feats, cats = [], []
    for enc, record in zip(encodings, records):
        masks = np.asarray(enc.m.detach().cpu(), dtype=np.float64)
        z = np.asarray(enc.z.detach().cpu(), dtype=np.float64)
        assign = pixel_assign(masks)
        for slot in range(masks.shape[0]):
            region = assign == slot
            if not region.any():
                continue
            best_iou, best_obj = 0.0, None
            for obj in record.objects:
                iou = mask_iou(region, obj.mask)
                if iou > best_iou:
                    best_iou, best_obj = iou, obj
            if best_iou >= iou_min and best_obj is not None:
                feats.append(z[slot])
                cats.append(best_obj.attributes.get("category") or best_obj.attributes.get("part"))
    feats = np.array(feats)
    if len(feats) < k + 1:
        raise EvaluationError(
            f"retrieval needs at least {k + 1} candidate slots, found {len(feats)}"
        )
    cats = np.array(cats)
    queries = rng.integers(0, len(feats), size=n_samples)
    fractions = []
    for q in queries:
        d = np.linalg.norm(feats - feats[q], axis=1)
        d[q] = np.inf
        nn = np.argpartition(d, k)[:k]
        fractions.append(float((cats[nn] == cats[q]).mean()))
    return float(np.mean(fractions))


def qa_accuracy(predicted: Sequence[Any], gold: Sequence[Any]) -> float:
    """Exact-match accuracy of argmax answers against gold answers."""
    if len(predicted) == 0:
        raise EvaluationError("QA accuracy undefined on an empty set")
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold lengths differ")
    return float(np.mean([p == g for p, g in zip(predicted, gold)]))


def refexp_recall(
    expressions: Sequence[tuple[Program, int]],
    encodings: Sequence,
    records: Sequence[SceneRecord],
    space,
    iou: float = 0.5,
) -> float:
    """Recall of referred objects at an IoU threshold.

    Each expression is (filter/relate chain, scene index). The executor's
    slot selection is multiplied into the decoded slot masks; an object is
    recalled if some resulting mask, binarized at 0.5, reaches `iou` with it.
    """
    from .executor import execute_chain
    from .symbolic import referents

    total, recalled = 0, 0
    for program, scene_idx in expressions:
        enc, record = encodings[scene_idx], records[scene_idx]
        slot_mask = execute_chain(program, enc, space)
        sel = np.asarray(slot_mask.detach().cpu(), dtype=np.float64)
        m = np.asarray(enc.m.detach().cpu(), dtype=np.float64)
        out_masks = (sel[:, None, None] * m) > 0.5
        for obj_idx in referents(program, record):
            total += 1
            obj = record.objects[obj_idx]
            if any(mask_iou(out_masks[kk], obj.mask) >= iou for kk in range(m.shape[0])):
                recalled += 1
    if total == 0:
        raise EvaluationError("no referents in the expression set")
    return recalled / total


def hungarian_max_weight(weights: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-weight bipartite matching over a (rows, cols) weight matrix."""
    rows, cols = linear_sum_assignment(weights, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def _slot_concept_sets(enc, space, use_objectness: bool) -> list[frozenset]:
    """Concept set per kept slot: concepts with positive cosine similarity."""
    sets = []
    z = enc.z
    s = np.asarray(enc.s.detach().cpu(), dtype=np.float64)
    for k in range(z.shape[0]):
        concepts = frozenset(space.positive_concepts(z[k]))
        if not concepts:
            continue
        if use_objectness and s[k] < 0.5:
            continue
        sets.append(concepts)
    return sets


def concept_quantification(
    encodings: Sequence,
    space,
    records: Sequence[SceneRecord],
    thresholds: Sequence[float] = (0.5, 0.75, 1.0),
    use_objectness: bool = True,
) -> list[SceneGraphEval]:
    """Scene-graph precision/recall via concept-set IoU and maximum-weight
    matching, per IoU threshold."""
    per_threshold = {t: {"precision": [], "recall": []} for t in thresholds}
    for enc, record in zip(encodings, records):
        detected = _slot_concept_sets(enc, space, use_objectness)
        gt = [frozenset(o.attributes.values()) for o in record.objects]
        iou_matrix = np.zeros((len(gt), len(detected)))
        for i, ci in enumerate(gt):
            for j, cj in enumerate(detected):
                iou_matrix[i, j] = len(ci & cj) / len(ci | cj)
        matches = hungarian_max_weight(iou_matrix) if len(gt) and len(detected) else []
        for t in thresholds:
            n_matched = sum(1 for i, j in matches if iou_matrix[i, j] >= t)
            if detected:
                per_threshold[t]["precision"].append(n_matched / len(detected))
            if gt:
                per_threshold[t]["recall"].append(n_matched / len(gt))
    return [
        SceneGraphEval(
            precision=float(np.mean(per_threshold[t]["precision"])) if per_threshold[t]["precision"] else 0.0,
            recall=float(np.mean(per_threshold[t]["recall"])) if per_threshold[t]["recall"] else 0.0,
            threshold=float(t),
        )
        for t in thresholds
    ]
