"""Detection post-processing, PR/AP scoring, and the crop-scoring baseline.

AP uses the area under the precision envelope over all recall points by
default; an 11-point variant is available behind a flag.  Classes with no
ground-truth boxes in the evaluation set are excluded from the mean and
listed in the report instead of contributing a meaningless zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxF, iou
from .errors import ArgumentError, NumericError
from .synthesis import ImageSample
from .vocab import ClassVocab

DEFAULT_MIN_SCORE = 0.05
DEFAULT_NMS_IOU = 0.3
DEFAULT_MATCH_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    box: BoxF
    class_id: int
    score: float


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression: highest score first (ties: lower index), drop
    later boxes overlapping a kept box at IoU >= threshold."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    suppressed = [False] * len(detections)
    keep: list[int] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if not suppressed[j] and iou(detections[i].box, detections[j].box) >= iou_threshold:
                suppressed[j] = True
    return [detections[i] for i in keep]


def detect(model, image: np.ndarray, proposals: list[BoxF],
           min_score: float = DEFAULT_MIN_SCORE,
           nms_threshold: float = DEFAULT_NMS_IOU,
           source: str = "refinement") -> list[Detection]:
    """Score proposals with the model and reduce them to per-class detections."""
    if not proposals:
        return []
    scores = model.scores(image, proposals, source=source)
    if not np.isfinite(scores).all():
        raise NumericError("detector produced non-finite proposal scores")
    out: list[Detection] = []
    for c in range(scores.shape[1]):
        cand = [Detection(box=proposals[i], class_id=c, score=float(scores[i, c]))
                for i in range(len(proposals)) if scores[i, c] >= min_score]
        out.extend(nms(cand, nms_threshold))
    out.sort(key=lambda d: -d.score)
    return out


def average_precision(tp_flags: list[bool], n_gt: int, eleven_point: bool = False) -> float:
    """AP from detection outcomes already sorted by descending score.

    tp_flags[i] marks whether the i-th ranked detection matched a
    previously unmatched ground-truth box.
    """
    if n_gt <= 0:
        raise ArgumentError("average_precision needs at least one ground-truth box")
    if not tp_flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in tp_flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in tp_flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    if eleven_point:
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r
            ap += precision[mask].max() if mask.any() else 0.0
        return float(ap / 11.0)
    # Envelope: precision at each recall level is the max over >= that recall.
    r = np.concatenate(([0.0], recall, [recall[-1]]))
    p = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def match_class_detections(per_image_dets: list[list[Detection]],
                           per_image_gt: list[list[BoxF]],
                           iou_threshold: float) -> tuple[list[bool], int]:
    """Greedy matching for one class across images.

    Detections are ranked globally by score (ties: earlier image, then
    earlier position).  Each one claims the highest-IoU still-unmatched
    ground-truth box in its own image, if that IoU reaches the threshold.
    """
    ranked = sorted(
        ((d.score, img_i, k) for img_i, dets in enumerate(per_image_dets)
         for k, d in enumerate(dets)),
        key=lambda t: (-t[0], t[1], t[2]))
    used = [ [False] * len(g) for g in per_image_gt ]
    flags: list[bool] = []
    for _score, img_i, k in ranked:
        det = per_image_dets[img_i][k]
        gts = per_image_gt[img_i]
        best, best_iou = -1, iou_threshold
        for gi, gbox in enumerate(gts):
            if used[img_i][gi]:
                continue
            ov = iou(det.box, gbox)
            if ov > best_iou or (ov == best_iou and best < 0 and ov >= iou_threshold):
                best, best_iou = gi, ov
        if best >= 0:
            used[img_i][best] = True
            flags.append(True)
        else:
            flags.append(False)
    n_gt = sum(len(g) for g in per_image_gt)
    return flags, n_gt


@dataclass
class EvalReport:
    iou_threshold: float
    per_class_ap: dict[int, float]
    mean_ap: float
    n_images: int
    n_gt_per_class: dict[int, int] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)
    method: str = "all_points"

    def to_json(self) -> str:
        obj = {
            "iou_threshold": self.iou_threshold,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "mAP": self.mean_ap,
            "n_images": self.n_images,
            "n_gt_per_class": {str(k): v for k, v in sorted(self.n_gt_per_class.items())},
            "excluded_classes": sorted(self.excluded_classes),
            "method": self.method,
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(iou_threshold=obj["iou_threshold"],
                   per_class_ap={int(k): v for k, v in obj["per_class_ap"].items()},
                   mean_ap=obj["mAP"], n_images=obj["n_images"],
                   n_gt_per_class={int(k): v for k, v in obj.get("n_gt_per_class", {}).items()},
                   excluded_classes=list(obj["excluded_classes"]),
                   method=obj["method"])


def evaluate_detections(all_dets: list[list[Detection]],
                        samples: list[ImageSample],
                        n_classes: int,
                        iou_threshold: float = DEFAULT_MATCH_IOU,
                        eleven_point: bool = False) -> EvalReport:
    """Score pre-computed per-image detections against sample ground truth."""
    if len(all_dets) != len(samples):
        raise ArgumentError("detections and samples length mismatch")
    per_class_ap: dict[int, float] = {}
    n_gt_per_class: dict[int, int] = {}
    excluded: list[int] = []
    for c in range(n_classes):
        gt = [[b for b, cid in (s.gt_boxes or []) if cid == c] for s in samples]
        if sum(len(g) for g in gt) == 0:
            excluded.append(c)
            continue
        dets = [[d for d in dlist if d.class_id == c] for dlist in all_dets]
        flags, n_gt = match_class_detections(dets, gt, iou_threshold)
        per_class_ap[c] = average_precision(flags, n_gt, eleven_point=eleven_point)
        n_gt_per_class[c] = n_gt
    if not per_class_ap:
        raise ArgumentError("no class has ground-truth boxes; nothing to evaluate")
    mean_ap = float(np.mean(list(per_class_ap.values())))
    return EvalReport(iou_threshold=iou_threshold, per_class_ap=per_class_ap,
                      mean_ap=mean_ap, n_images=len(samples),
                      n_gt_per_class=n_gt_per_class, excluded_classes=excluded,
                      method="11_point" if eleven_point else "all_points")


def evaluate(model, samples: list[ImageSample], proposals: list[list[BoxF]],
             iou_threshold: float = DEFAULT_MATCH_IOU,
             min_score: float = DEFAULT_MIN_SCORE,
             nms_threshold: float = DEFAULT_NMS_IOU,
             source: str = "refinement",
             eleven_point: bool = False) -> EvalReport:
    if len(samples) != len(proposals):
        raise ArgumentError("samples and proposals length mismatch")
    all_dets = [detect(model, s.pixels, props, min_score=min_score,
                       nms_threshold=nms_threshold, source=source)
                for s, props in zip(samples, proposals)]
    return evaluate_detections(all_dets, samples, model.n_classes,
                               iou_threshold=iou_threshold,
                               eleven_point=eleven_point)


# --- crop-scoring baseline harness -------------------------------------

def warp_crop(image: np.ndarray, box: BoxF, side: int = 32) -> np.ndarray:
    """Nearest-neighbour warp of an axis-aligned crop to a square patch."""
    w, h = image.shape[1], image.shape[2]
    x1 = min(max(int(np.floor(box.x1)), 0), w - 1)
    y1 = min(max(int(np.floor(box.y1)), 0), h - 1)
    x2 = min(max(int(np.ceil(box.x2)), x1 + 1), w)
    y2 = min(max(int(np.ceil(box.y2)), y1 + 1), h)
    xs = x1 + ((np.arange(side) + 0.5) * (x2 - x1) / side).astype(int).clip(0, x2 - x1 - 1)
    ys = y1 + ((np.arange(side) + 0.5) * (y2 - y1) / side).astype(int).clip(0, y2 - y1 - 1)
    return image[:, xs[:, None], ys[None, :]]


class ProposalScorer:
    """Scores a warped crop against a class prompt; higher is better."""

    def begin_image(self, sample: ImageSample) -> None:
        pass

    def score(self, crop: np.ndarray, prompt: str, box: BoxF | None = None) -> float:
        raise NotImplementedError


class OracleScorer(ProposalScorer):
    """Reference scorer: best overlap with a ground-truth box of the
    prompted class.  An upper harness bound, not a learned model."""

    def __init__(self, vocab: ClassVocab):
        self.vocab = vocab
        self._gt: list[tuple[BoxF, int]] = []

    def begin_image(self, sample: ImageSample) -> None:
        if sample.gt_boxes is None:
            raise ArgumentError("oracle scorer needs ground-truth boxes")
        self._gt = list(sample.gt_boxes)

    def score(self, crop: np.ndarray, prompt: str, box: BoxF | None = None) -> float:
        if box is None:
            raise ArgumentError("oracle scorer needs the proposal box")
        cid = self.vocab.id_of(prompt)
        best = 0.0
        for gbox, gcid in self._gt:
            if gcid == cid:
                best = max(best, iou(box, gbox))
        return best


class RandomScorer(ProposalScorer):
    """Seeded uniform scores; the floor any learned scorer must beat."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def score(self, crop: np.ndarray, prompt: str, box: BoxF | None = None) -> float:
        return float(self._rng.random())


def baseline_detect(scorer: ProposalScorer, sample: ImageSample,
                    proposals: list[BoxF], vocab: ClassVocab,
                    max_proposals: int = 1000,
                    min_score: float = DEFAULT_MIN_SCORE,
                    nms_threshold: float = DEFAULT_NMS_IOU,
                    crop_side: int = 32, log=None) -> list[Detection]:
    """Score each proposal crop against every class prompt, keep the argmax
    class, then suppress per class.  Proposals whose scorer call fails are
    skipped and counted, not fatal."""
    props = proposals[:max_proposals]
    scorer.begin_image(sample)
    per_class: dict[int, list[Detection]] = {c: [] for c in range(len(vocab))}
    prompts = vocab.to_list()
    skipped = 0
    for box in props:
        crop = warp_crop(sample.pixels, box, side=crop_side)
        try:
            scores = [scorer.score(crop, p, box=box) for p in prompts]
        except ArgumentError:
            raise
        except Exception:
            skipped += 1
            continue
        c = int(np.argmax(scores))
        if scores[c] >= min_score:
            per_class[c].append(Detection(box=box, class_id=c, score=float(scores[c])))
    if skipped and log is not None:
        log(f"scorer failed on {skipped}/{len(props)} proposals; skipped")
    out: list[Detection] = []
    for c in range(len(vocab)):
        out.extend(nms(per_class[c], nms_threshold))
    out.sort(key=lambda d: -d.score)
    return out


def random_box_detections(sample: ImageSample, n_classes: int, rng,
                          n_boxes: int = 20) -> list[Detection]:
    """Seeded uniform boxes with uniform classes and scores: the detector
    any trained model must dominate."""
    w, h = sample.width, sample.height
    out = []
    for _ in range(n_boxes):
        x1 = rng.uniform(0, w - 2)
        y1 = rng.uniform(0, h - 2)
        x2 = rng.uniform(x1 + 1, w)
        y2 = rng.uniform(y1 + 1, h)
        out.append(Detection(box=BoxF(x1, y1, x2, y2),
                             class_id=int(rng.integers(0, n_classes)),
                             score=float(rng.random())))
    return sorted(out, key=lambda d: -d.score)


def export_features(model, samples: list[ImageSample],
                    proposals: list[list[BoxF]], path: str,
                    n_per_class: int = 50, log=None) -> int:
    """Write one CSV row per (class, image): the representation of that
    image's top-scoring proposal for the class.  Returns rows written."""
    if len(samples) != len(proposals):
        raise ArgumentError("samples and proposals length mismatch")
    d = model.d
    rows: list[str] = []
    header = "class_id,provenance," + ",".join(f"f{i}" for i in range(d))
    counts = {c: 0 for c in range(model.n_classes)}
    for sample, props in zip(samples, proposals):
        if not props or not sample.class_labels:
            continue
        feats = model.proposal_feats(sample.pixels, props).value
        scores = model.scores(sample.pixels, props)
        for c in sorted(sample.class_labels):
            if c >= model.n_classes or counts[c] >= n_per_class:
                continue
            top = int(np.argmax(scores[:, c]))
            vec = ",".join(repr(float(v)) for v in feats[top])
            rows.append(f"{c},{sample.provenance},{vec}")
            counts[c] += 1
    empty = [c for c, n in counts.items() if n == 0]
    if empty and log is not None:
        log(f"no feature rows for classes {empty}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(r + "\n")
    return len(rows)
