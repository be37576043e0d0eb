"""Detection heads: instance-classification branch and refinement stages.

The instance branch scores every proposal twice: softmax over classes per
proposal (x_c) and softmax over proposals per class (x_r). Their product
x_m sums over proposals into image-level class scores s, trained with
binary cross entropy against image labels. Refinement stages turn the
branch's best proposal per present class into pseudo ground truth and
train a (|C|+1)-way classifier over proposals against it, weighted by
pseudo-box confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, parameter
from .boxes import BoxF, iou
from .errors import ArgumentError, NumericError
from .seeds import OFF_PARAM_INIT, rng_for

SCORE_CLAMP = 1e-6


@dataclass
class ScoreMatrices:
    x_c: Tensor        # (P, C) rows sum to 1
    x_r: Tensor        # (P, C) columns sum to 1
    x_m: Tensor        # elementwise product
    s: Tensor          # (C,) image scores, s_c in (0, 1]


@dataclass
class PgtEntry:
    box: BoxF
    class_id: int
    score: float
    index: int | None = None    # proposal index when selected from x_m


@dataclass
class RefinementTargets:
    labels: np.ndarray          # (P,) in [0, n_classes]; n_classes = background
    weights: np.ndarray         # (P,) floats
    n_classes: int


@dataclass
class HeadParams:
    w_cls: Tensor               # (d, C)
    b_cls: Tensor
    w_prop: Tensor              # (d, C)
    b_prop: Tensor
    refs: list                  # [(w: (d, C+1), b: (C+1,))] per stage

    @property
    def n_classes(self) -> int:
        return self.w_cls.value.shape[1]

    @property
    def n_stages(self) -> int:
        return len(self.refs)

    def parameters(self) -> list:
        named = [("head.cls.w", self.w_cls), ("head.cls.b", self.b_cls),
                 ("head.prop.w", self.w_prop), ("head.prop.b", self.b_prop)]
        for k, (w, b) in enumerate(self.refs):
            named.append((f"head.ref{k}.w", w))
            named.append((f"head.ref{k}.b", b))
        return named


def init_heads(seed: int, d: int, n_classes: int, k_stages: int = 1) -> HeadParams:
    if n_classes < 1:
        raise ArgumentError("need at least one class")
    if k_stages < 0:
        raise ArgumentError("k_stages must be >= 0")
    rng = rng_for(seed + 1, OFF_PARAM_INIT)   # offset from the encoder's stream
    bound = 1.0 / np.sqrt(d)

    def lin(cols):
        return (parameter(rng.uniform(-bound, bound, size=(d, cols))),
                parameter(np.zeros(cols)))

    w_cls, b_cls = lin(n_classes)
    w_prop, b_prop = lin(n_classes)
    refs = [lin(n_classes + 1) for _ in range(k_stages)]
    return HeadParams(w_cls=w_cls, b_cls=b_cls, w_prop=w_prop, b_prop=b_prop, refs=refs)


def mil_forward(features: Tensor, params: HeadParams) -> ScoreMatrices:
    """features: (P, d) -> ScoreMatrices. P must be >= 1."""
    if features.value.ndim != 2 or features.value.shape[0] < 1:
        raise ArgumentError(f"need (P>=1, d) features, got {features.value.shape}")
    logits_c = features @ params.w_cls + params.b_cls
    logits_r = features @ params.w_prop + params.b_prop
    x_c = logits_c.softmax(axis=1)
    x_r = logits_r.softmax(axis=0)
    x_m = x_c * x_r
    s = x_m.sum(axis=0)
    return ScoreMatrices(x_c=x_c, x_r=x_r, x_m=x_m, s=s)


def mil_loss(s: Tensor, y: np.ndarray) -> Tensor:
    """Binary cross entropy of image scores against multi-hot labels."""
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(s.value).any():
        raise NumericError(f"NaN in image scores: {s.value}")
    sc = s.clip(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = sc.log() * y + (1.0 - sc).log() * (1.0 - y)
    return -loss.sum()


def refinement_forward(features: Tensor, params: HeadParams, stage: int) -> Tensor:
    """(P, C+1) softmax rows for one refinement stage."""
    w, b = params.refs[stage]
    return (features @ w + b).softmax(axis=1)


def select_pgt(x_m: np.ndarray, present_classes, proposals) -> list:
    """Highest-scoring proposal per present class; ties take the lowest index.

    Selection reads scores as plain numbers: supervision derived from them
    is treated as constant by the losses.
    """
    x_m = np.asarray(x_m)
    entries = []
    for c in sorted(present_classes):
        idx = int(np.argmax(x_m[:, c]))
        entries.append(PgtEntry(box=proposals[idx], class_id=int(c),
                                score=float(x_m[idx, c]), index=idx))
    return entries


def assign_refinement_targets(proposals, entries, n_classes: int,
                              iou_threshold: float = 0.5) -> RefinementTargets:
    """Label each proposal by its best-overlapping pseudo box.

    IoU >= threshold adopts the box's class and confidence; otherwise the
    proposal trains toward background, weighted by the nearest box's
    confidence. Selected pseudo boxes always keep their own class (last
    write wins if one proposal is pseudo for several classes).
    """
    if not entries:
        raise ArgumentError("no pseudo ground truth to assign")
    p = len(proposals)
    labels = np.full(p, n_classes, dtype=np.int64)
    weights = np.zeros(p, dtype=np.float64)
    overlaps = np.zeros((p, len(entries)))
    for j, e in enumerate(entries):
        for i, prop in enumerate(proposals):
            overlaps[i, j] = iou(prop, e.box)
    best = overlaps.argmax(axis=1)                    # ties: first entry
    best_iou = overlaps[np.arange(p), best]
    for i in range(p):
        e = entries[int(best[i])]
        weights[i] = e.score
        if best_iou[i] >= iou_threshold:
            labels[i] = e.class_id
    for e in entries:
        if e.index is not None:
            labels[e.index] = e.class_id
            weights[e.index] = e.score
    return RefinementTargets(labels=labels, weights=weights, n_classes=n_classes)


def refinement_loss(ref_probs: Tensor, targets: RefinementTargets) -> Tensor:
    """Weighted cross entropy, averaged over proposals."""
    p, cols = ref_probs.value.shape
    if len(targets.labels) != p or cols != targets.n_classes + 1:
        raise ArgumentError("targets do not match score matrix")
    onehot = np.zeros((p, cols))
    onehot[np.arange(p), targets.labels] = 1.0
    picked = (ref_probs.clip(SCORE_CLAMP, 1.0).log() * onehot).sum(axis=1)
    weighted = picked * targets.weights
    return weighted.sum() * (-1.0 / p)


def total_loss(mil: Tensor, refs: list) -> Tensor:
    out = mil
    for r in refs:
        out = out + r
    return out


def supervised_head_loss(ref_probs: Tensor, proposals, boxed_targets,
                         n_classes: int, iou_threshold: float = 0.5) -> Tensor:
    """Box-supervised variant of the refinement loss.

    boxed_targets: list of (BoxF, class_id) with weight 1 (ground truth) or
    PgtEntry (teacher pseudo boxes keeping their confidence). Empty target
    list contributes zero loss.
    """
    if not boxed_targets:
        return Tensor(0.0)
    entries = []
    for t in boxed_targets:
        if isinstance(t, PgtEntry):
            entries.append(PgtEntry(box=t.box, class_id=t.class_id, score=t.score))
        else:
            box, cid = t
            entries.append(PgtEntry(box=box, class_id=int(cid), score=1.0))
    targets = assign_refinement_targets(proposals, entries, n_classes, iou_threshold)
    return refinement_loss(ref_probs, targets)
