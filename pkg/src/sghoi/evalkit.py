"""Role mean-average-precision evaluation.

A detection is a true positive when an unmatched ground truth of the same
interaction class overlaps it above the IoU threshold on the human box and
(unless the action is object-less) on the object box.  Matching is greedy in
descending score with ties broken by input order; among eligible ground
truths the one maximizing min(iou_h, iou_o) wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .datamodel import AnnotationSet, ContractError, GroundTruthHOI, HOIDetection, iou


@dataclass
class MatchResult:
    """Per-detection TP flags and matches, per-ground-truth coverage."""

    det_is_tp: List[bool]
    det_match: List[Optional[int]]
    gt_covered: List[bool]
    order: List[int]  # detection indices in processing (score) order


def match_detections(
    dets: Sequence[HOIDetection],
    gts: Sequence[GroundTruthHOI],
    iou_thresh: float = 0.5,
) -> MatchResult:
    """Greedy matching for one image; classes never match across ids."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    det_is_tp = [False] * len(dets)
    det_match: List[Optional[int]] = [None] * len(dets)
    gt_covered = [False] * len(gts)
    for det_idx in order:
        det = dets[det_idx]
        best_gt, best_key = None, None
        for gt_idx, gt in enumerate(gts):
            if gt_covered[gt_idx] or gt.interaction_id != det.interaction_id:
                continue
            iou_h = iou(det.human_box, gt.human_box)
            if iou_h <= iou_thresh:
                continue
            if gt.object_box is None:
                key = iou_h  # object-less action: human condition only
            else:
                iou_o = iou(det.object_box, gt.object_box)
                if iou_o <= iou_thresh:
                    continue
                key = min(iou_h, iou_o)
            if best_key is None or key > best_key:
                best_gt, best_key = gt_idx, key
        if best_gt is not None:
            det_is_tp[det_idx] = True
            det_match[det_idx] = best_gt
            gt_covered[best_gt] = True
    return MatchResult(det_is_tp, det_match, gt_covered, order)


def average_precision(flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """Area under the all-point interpolated precision-recall curve.

    ``flags`` must already be in descending score order.  A class with no
    ground truth and no detections is excluded (None); with detections but
    no ground truth the AP is 0.
    """
    if num_gt < 0:
        raise ContractError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope, then sum increments at recall change points
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, precision):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


@dataclass
class EvalReport:
    """Per-class APs plus Full / Rare / Non-Rare means for one setting."""

    setting: str
    per_class_ap: Dict[int, Optional[float]]
    map_full: float
    map_rare: Optional[float]
    map_non_rare: Optional[float]
    num_classes_scored: int

    def payload(self) -> dict:
        return {
            "setting": self.setting,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "mAP_full": self.map_full,
            "mAP_rare": self.map_rare,
            "mAP_non_rare": self.map_non_rare,
            "classes_scored": self.num_classes_scored,
        }


def _class_object_categories(
    gts_by_image: Dict[str, Sequence[GroundTruthHOI]]
) -> Dict[int, Set[int]]:
    cats: Dict[int, Set[int]] = {}
    for gts in gts_by_image.values():
        for gt in gts:
            if gt.object_category is not None:
                cats.setdefault(gt.interaction_id, set()).add(gt.object_category)
    return cats


def map_role(
    dets_by_image: Dict[str, Sequence[HOIDetection]],
    gts_by_image: Dict[str, Sequence[GroundTruthHOI]],
    setting: str = "default",
    rare_ids: Optional[Sequence[int]] = None,
    num_interactions: Optional[int] = None,
    iou_thresh: float = 0.5,
) -> EvalReport:
    """Pool per-image matches into per-class APs and split means.

    Known-object mode restricts each class's pool to images whose ground
    truth contains an object category observed with that class anywhere in
    the corpus (image-level pooling).
    """
    if setting not in ("default", "known"):
        raise ContractError(f"setting must be 'default' or 'known', got {setting!r}")
    images = sorted(set(gts_by_image) | set(dets_by_image))
    observed = [
        d.interaction_id for dets in dets_by_image.values() for d in dets
    ] + [g.interaction_id for gts in gts_by_image.values() for g in gts]
    if num_interactions is None:
        num_interactions = max(observed, default=-1) + 1
    for class_id in observed:
        if class_id >= num_interactions or class_id < 0:
            raise ContractError(
                f"interaction id {class_id} outside vocabulary of {num_interactions}"
            )
    rare: Set[int] = set(int(r) for r in rare_ids) if rare_ids else set()

    class_cats = _class_object_categories(gts_by_image)
    image_categories: Dict[str, Set[int]] = {}
    for image_id in images:
        image_categories[image_id] = {
            gt.object_category
            for gt in gts_by_image.get(image_id, [])
            if gt.object_category is not None
        }

    # per-image greedy matching over all classes at once
    matches: Dict[str, MatchResult] = {}
    for image_id in images:
        matches[image_id] = match_detections(
            list(dets_by_image.get(image_id, [])),
            list(gts_by_image.get(image_id, [])),
            iou_thresh,
        )

    per_class_ap: Dict[int, Optional[float]] = {}
    for k in range(num_interactions):
        scored: List[Tuple[float, int, int, bool]] = []
        num_gt = 0
        for image_index, image_id in enumerate(images):
            if setting == "known":
                cats = class_cats.get(k)
                if cats is not None and not (cats & image_categories[image_id]):
                    continue
            dets = list(dets_by_image.get(image_id, []))
            gts = list(gts_by_image.get(image_id, []))
            num_gt += sum(1 for g in gts if g.interaction_id == k)
            result = matches[image_id]
            for det_idx, det in enumerate(dets):
                if det.interaction_id == k:
                    scored.append((det.score, image_index, det_idx, result.det_is_tp[det_idx]))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        per_class_ap[k] = average_precision([s[3] for s in scored], num_gt)

    def mean_over(class_ids) -> Optional[float]:
        values = [per_class_ap[k] for k in class_ids if per_class_ap.get(k) is not None]
        return float(np.mean(values)) if values else None

    all_ids = list(range(num_interactions))
    full = mean_over(all_ids)
    return EvalReport(
        setting=setting,
        per_class_ap=per_class_ap,
        map_full=full if full is not None else 0.0,
        map_rare=mean_over([k for k in all_ids if k in rare]),
        map_non_rare=mean_over([k for k in all_ids if k not in rare]),
        num_classes_scored=sum(1 for v in per_class_ap.values() if v is not None),
    )


def report_table(report: EvalReport, interaction_names: Optional[Sequence[str]] = None) -> str:
    """Plain-text table mirroring the benchmark's column layout."""
    lines = [
        f"setting: {report.setting}",
        f"{'class':>5}  {'name':<16} {'AP':>8}",
    ]
    for k, ap in sorted(report.per_class_ap.items()):
        name = interaction_names[k] if interaction_names and k < len(interaction_names) else ""
        lines.append(f"{k:>5}  {name:<16} " + (f"{ap:8.4f}" if ap is not None else "     n/a"))
    lines.append("-" * 32)
    lines.append(f"mAP Full     {report.map_full:8.4f}")
    lines.append(
        "mAP Rare     " + (f"{report.map_rare:8.4f}" if report.map_rare is not None else "     n/a")
    )
    lines.append(
        "mAP Non-Rare "
        + (f"{report.map_non_rare:8.4f}" if report.map_non_rare is not None else "     n/a")
    )
    return "\n".join(lines)


def annotations_to_gt_map(annotations: Sequence[AnnotationSet]) -> Dict[str, List[GroundTruthHOI]]:
    return {ann.image_id: list(ann.hois) for ann in annotations}
