"""Training loops for the three supervision regimes.

- label-only training on generated images (optionally mixed 50/50 with a
  weakly labeled real source),
- teacher-student training on a small box-labeled set plus an unlabeled
  pool, with the teacher tracking the student by exponential moving
  average and emitting confident pseudo boxes.

Generated samples are consumed through their class labels only; their
renderer boxes stay untouched (the dataset module counts any such read, and
training keeps that counter at zero).
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxF
from .config import config_hash
from .errors import ArgumentError, ConfigurationError
from .evaluation import detect
from .features import DEFAULT_CHANNELS
from .heads import (PgtEntry, assign_refinement_targets, mil_loss,
                    refinement_forward, refinement_loss, select_pgt,
                    supervised_head_loss, total_loss)
from .model import DetectorModel, build_model, save_checkpoint
from .proposals import SelectiveSearchParams, ensure_proposals
from .vocab import ClassVocab

MODES = ("isod", "wsod_mixed", "ssod")
LR_DECAY_FRACTION = 0.75
LR_DECAY_FACTOR = 0.1
TRAIN_STREAM = 2  # rng sub-stream for sampling/augmentation draws


@dataclass
class TrainConfig:
    mode: str = "isod"
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hflip: bool = True
    scale_jitter: bool = True
    k_stages: int = 1
    ema_momentum: float = 0.999
    pgt_confidence_threshold: float = 0.7
    burn_in_steps: int | None = None  # None -> 20% of steps
    max_proposals: int = 500
    d: int = 128
    channels: tuple = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr < 0:
            # lr 0 is legal: it freezes parameters, which tests rely on.
            raise ConfigurationError("lr must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ConfigurationError("ema_momentum must be in [0, 1]")
        if not (0.0 < self.pgt_confidence_threshold < 1.0):
            raise ConfigurationError("pgt_confidence_threshold must be in (0, 1)")
        if self.burn_in_steps is not None and not (0 <= self.burn_in_steps <= self.steps):
            raise ConfigurationError("burn_in_steps must be in [0, steps]")
        if self.k_stages < 0:
            raise ConfigurationError("k_stages must be >= 0")
        if self.max_proposals < 1:
            raise ConfigurationError("max_proposals must be >= 1")
        if self.d < 1:
            raise ConfigurationError("d must be >= 1")
        self.channels = tuple(int(c) for c in self.channels)

    def resolved_burn_in(self) -> int:
        if self.burn_in_steps is not None:
            return self.burn_in_steps
        return int(round(0.2 * self.steps))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["channels"] = list(self.channels)
        return out

    def hash(self) -> str:
        return config_hash(self.to_dict())


def lr_at(step: int, config: TrainConfig) -> float:
    if step >= LR_DECAY_FRACTION * config.steps:
        return config.lr * LR_DECAY_FACTOR
    return config.lr


class SgdMomentum:
    """Gradient descent with momentum and decoupled-from-nothing classic
    L2 weight decay folded into the gradient."""

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.value) for name, t in self.named}

    def step(self, lr: float) -> None:
        for name, t in self.named:
            g = t.grad if t.grad is not None else np.zeros_like(t.value)
            g = g + self.weight_decay * t.value
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            t.value = t.value - lr * v
            t.grad = None


# --- augmentation -----------------------------------------------------------

def hflip_image(pixels: np.ndarray, box_groups):
    """Mirror along x; boxes map to (W - x2, y1, W - x1, y2)."""
    w = pixels.shape[1]
    flipped = pixels[:, ::-1, :].copy()
    groups = [[BoxF(w - b.x2, b.y1, w - b.x1, b.y2) for b in g] for g in box_groups]
    return flipped, groups


def scale_image(pixels: np.ndarray, box_groups, u: float):
    """Nearest-neighbour resize by factor u; boxes scale by the realized
    integer-size ratio so they stay inside the new canvas."""
    w, h = pixels.shape[1], pixels.shape[2]
    nw, nh = max(8, int(round(w * u))), max(8, int(round(h * u)))
    if (nw, nh) == (w, h):
        return pixels, [list(g) for g in box_groups]
    sx, sy = nw / w, nh / h
    xs = np.clip(((np.arange(nw) + 0.5) / sx).astype(int), 0, w - 1)
    ys = np.clip(((np.arange(nh) + 0.5) / sy).astype(int), 0, h - 1)
    resized = pixels[:, xs[:, None], ys[None, :]]
    groups = [[BoxF(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in g]
              for g in box_groups]
    return resized, groups


def augment(pixels: np.ndarray, box_groups, rng,
            hflip: bool = True, scale_jitter: bool = True):
    """Random flip (p=0.5) then random rescale (u in [0.8, 1.2]); every box
    group gets the identical transform.  Labels are the caller's and are
    never touched."""
    groups = [list(g) for g in box_groups]
    if hflip and rng.random() < 0.5:
        pixels, groups = hflip_image(pixels, groups)
    if scale_jitter:
        u = float(rng.uniform(0.8, 1.2))
        pixels, groups = scale_image(pixels, groups, u)
    return pixels, groups


# --- sampling ---------------------------------------------------------------

def mixed_sampler(imaginary, real, mode: str, rng):
    """Infinite (source, index) stream.

    isod: generated source only.  wsod_mixed: fair coin between sources,
    then uniform within the chosen one.
    """
    if mode not in ("isod", "wsod_mixed"):
        raise ArgumentError(f"sampler supports isod/wsod_mixed, got {mode!r}")
    if imaginary is None or len(imaginary) == 0:
        raise ConfigurationError("imaginary source is required and must be non-empty")
    if mode == "wsod_mixed" and (real is None or len(real) == 0):
        raise ConfigurationError("wsod_mixed requires a non-empty real source")
    while True:
        if mode == "wsod_mixed" and rng.random() >= 0.5:
            yield "real", int(rng.integers(0, len(real)))
        else:
            yield "imaginary", int(rng.integers(0, len(imaginary)))


class _Corpus:
    """Lazy image/label/proposal cache over a dataset directory.

    Proposal extraction results are persisted next to the dataset so
    repeated runs skip the segmentation work.  The cache stores this run's
    truncation; wipe it before raising max_proposals.
    """

    def __init__(self, handle, config: TrainConfig, with_boxes: bool = False):
        self.handle = handle
        self.with_boxes = with_boxes
        self.max_proposals = config.max_proposals
        self.params = SelectiveSearchParams(max_proposals=config.max_proposals)
        self._items: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.handle)

    def item(self, i: int):
        if i not in self._items:
            sample = self.handle.load_sample(i, with_boxes=self.with_boxes)
            pset = ensure_proposals(self.handle.root, i, sample.pixels, self.params)
            props = list(pset.boxes)[: self.max_proposals]
            self._items[i] = (sample.pixels, sample.class_labels or set(),
                              sample.gt_boxes, props)
        return self._items[i]


# --- per-image losses -------------------------------------------------------

def weak_image_loss(model: DetectorModel, pixels, labels, proposals):
    """Label-only loss: image-level BCE plus chained per-stage box losses.

    Stage 0 surrogate boxes come from the product matrix; stage k>0 reads
    the previous stage's class columns.  Surrogate selection and weights
    are plain numbers, constant within the step.
    """
    feats, sm, refs = model.forward(pixels, proposals)
    y = np.zeros(model.n_classes)
    present = sorted(c for c in labels if 0 <= c < model.n_classes)
    y[present] = 1.0
    l_mil = mil_loss(sm.s, y)
    ref_losses = []
    source = sm.x_m.value
    for ref in refs:
        if present:
            entries = select_pgt(source, present, proposals)
            targets = assign_refinement_targets(proposals, entries, model.n_classes)
            ref_losses.append(refinement_loss(ref, targets))
        source = ref.value[:, : model.n_classes]
    loss = total_loss(l_mil, ref_losses)
    return loss, float(l_mil.value), float(sum(r.value for r in ref_losses))


def boxed_image_loss(model: DetectorModel, pixels, targets, proposals):
    """Box-supervised loss over all refinement stages; no image-level term."""
    feats = model.proposal_feats(pixels, proposals)
    losses = [supervised_head_loss(refinement_forward(feats, model.heads, k),
                                   proposals, targets, model.n_classes)
              for k in range(model.heads.n_stages)]
    loss = losses[0]
    for l in losses[1:]:
        loss = loss + l
    return loss


def teacher_pgt(teacher: DetectorModel, pixels, proposals,
                threshold: float, nms_threshold: float = 0.3) -> list:
    """Confident teacher detections (suppressed first, thresholded after)
    as weighted pseudo boxes."""
    dets = detect(teacher, pixels, proposals, min_score=0.0,
                  nms_threshold=nms_threshold)
    return [PgtEntry(box=d.box, class_id=d.class_id, score=d.score)
            for d in dets if d.score > threshold]


# --- histories and run directories ------------------------------------------

@dataclass
class TrainHistory:
    mode: str
    seed: int
    records: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def write_run_dir(out_dir: str, config: TrainConfig, model: DetectorModel,
                  history: TrainHistory, teacher: DetectorModel | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cfg = config.to_dict()
    cfg["config_hash"] = config.hash()
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    history.write_jsonl(os.path.join(out_dir, "history.jsonl"))
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.bin"))
    if teacher is not None:
        save_checkpoint(teacher, os.path.join(out_dir, "teacher.bin"))
    # Timing lives outside history.jsonl so reruns stay byte-comparable.
    with open(os.path.join(out_dir, "runinfo.json"), "w", encoding="utf-8") as fh:
        json.dump({"mode": config.mode, "seed": config.seed,
                   "wall_time_s": history.wall_time_s}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- training loops ----------------------------------------------------------

def _train_weak(config: TrainConfig, imaginary, real_weak, vocab: ClassVocab,
                out_dir: str | None, log, history_mode: str) -> tuple:
    model = build_model(seed=config.seed, vocab=vocab, d=config.d,
                        k_stages=config.k_stages, channels=config.channels,
                        config_hash=config.hash())
    opt = SgdMomentum(model.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, TRAIN_STREAM])

    corpora = {"imaginary": _Corpus(imaginary, config)}
    sampler_mode = "isod"
    if history_mode == "wsod_mixed":
        if real_weak is not None and len(real_weak) > 0:
            corpora["real"] = _Corpus(real_weak, config)
            sampler_mode = "wsod_mixed"
        else:
            if log:
                log("real source empty; mixing degenerates to generated-only training")
    stream = mixed_sampler(corpora["imaginary"], corpora.get("real"),
                           sampler_mode, rng)

    history = TrainHistory(mode=history_mode, seed=config.seed)
    t0 = time.monotonic()
    for step in range(config.steps):
        lr = lr_at(step, config)
        losses, mil_sum, ref_sum = [], 0.0, 0.0
        counts = {"imaginary": 0, "real": 0}
        for _ in range(config.batch_size):
            source, idx = next(stream)
            pixels, labels, _gt, props = corpora[source].item(idx)
            if not props:
                continue
            pixels, (props_t,) = augment(pixels, (props,), rng,
                                         config.hflip, config.scale_jitter)
            loss, mval, rval = weak_image_loss(model, pixels, labels, props_t)
            losses.append(loss)
            mil_sum += mval
            ref_sum += rval
            counts[source] += 1
        if not losses:
            raise ConfigurationError("no sample in the batch produced proposals")
        batch_loss = total_loss(losses[0], losses[1:]) * (1.0 / len(losses))
        batch_loss.backward()
        opt.step(lr)
        history.records.append({
            "step": step, "lr": lr, "loss": float(batch_loss.value),
            "mil": mil_sum / len(losses), "ref": ref_sum / len(losses),
            "n_imaginary": counts["imaginary"], "n_real": counts["real"],
        })
    history.wall_time_s = time.monotonic() - t0
    model.check_finite()
    if out_dir is not None:
        write_run_dir(out_dir, config, model, history)
    return model, history


def train_isod(config: TrainConfig, imaginary, vocab: ClassVocab,
               out_dir: str | None = None, log=None) -> tuple:
    if config.mode != "isod":
        raise ConfigurationError(f"config.mode is {config.mode!r}, expected 'isod'")
    return _train_weak(config, imaginary, None, vocab, out_dir, log, "isod")


def train_wsod_mixed(config: TrainConfig, imaginary, real_weak,
                     vocab: ClassVocab, out_dir: str | None = None,
                     log=None) -> tuple:
    if config.mode != "wsod_mixed":
        raise ConfigurationError(f"config.mode is {config.mode!r}, expected 'wsod_mixed'")
    return _train_weak(config, imaginary, real_weak, vocab, out_dir, log, "wsod_mixed")


def ema_update(teacher_params, student_params, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    if not (0.0 <= m <= 1.0):
        raise ArgumentError(f"ema momentum must be in [0, 1], got {m}")
    teacher_params = list(teacher_params)
    student_params = list(student_params)
    if len(teacher_params) != len(student_params):
        raise ArgumentError("teacher/student parameter lists differ in length")
    for (tn, t), (sn, s) in zip(teacher_params, student_params):
        if t.value.shape != s.value.shape:
            raise ArgumentError(f"shape mismatch at {tn}: {t.value.shape} vs {s.value.shape}")
        t.value = m * t.value + (1.0 - m) * s.value


def train_ssod(config: TrainConfig, real_boxed, real_unlabeled=None,
               imaginary=None, vocab: ClassVocab | None = None,
               out_dir: str | None = None, log=None) -> tuple:
    """Teacher-student loop.  Returns (student, teacher, history).

    Student burns in supervised on the boxed set; afterwards each step adds
    pseudo-box losses from the teacher on the unlabeled pool, and the
    teacher tracks the student by EMA.
    """
    if config.mode != "ssod":
        raise ConfigurationError(f"config.mode is {config.mode!r}, expected 'ssod'")
    if vocab is None:
        raise ConfigurationError("ssod training needs a class vocabulary")
    if real_boxed is None or len(real_boxed) == 0:
        raise ConfigurationError("ssod requires a non-empty box-labeled source")

    student = build_model(seed=config.seed, vocab=vocab, d=config.d,
                          k_stages=config.k_stages, channels=config.channels,
                          config_hash=config.hash())
    opt = SgdMomentum(student.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, TRAIN_STREAM])

    boxed = _Corpus(real_boxed, config, with_boxes=True)
    pool: list[tuple[_Corpus, int]] = []
    for source in (real_unlabeled, imaginary):
        if source is not None and len(source) > 0:
            corpus = _Corpus(source, config)
            pool.extend((corpus, i) for i in range(len(source)))
    if not pool and log:
        log("unlabeled pool empty; training stays purely supervised")

    burn_in = config.resolved_burn_in()
    teacher: DetectorModel | None = None
    history = TrainHistory(mode="ssod", seed=config.seed)
    t0 = time.monotonic()
    for step in range(config.steps):
        lr = lr_at(step, config)
        teaching = step >= burn_in and bool(pool)
        if teaching and teacher is None:
            teacher = student.clone()

        losses = []
        sup_sum = 0.0
        for idx in rng.integers(0, len(boxed), config.batch_size):
            pixels, _labels, gt, props = boxed.item(int(idx))
            if not props:
                continue
            gt = gt or []
            pixels_t, groups = augment(pixels, (props, [b for b, _c in gt]), rng,
                                       config.hflip, config.scale_jitter)
            props_t, gt_boxes_t = groups
            targets = list(zip(gt_boxes_t, [c for _b, c in gt]))
            loss = boxed_image_loss(student, pixels_t, targets, props_t)
            losses.append(loss)
            sup_sum += float(loss.value)
        if not losses:
            raise ConfigurationError("no boxed sample in the batch produced proposals")
        n_sup = len(losses)

        pseudo_sum, n_pgt = 0.0, 0
        if teaching:
            for k in rng.integers(0, len(pool), config.batch_size):
                corpus, idx = pool[int(k)]
                pixels, _labels, _gt, props = corpus.item(idx)
                if not props:
                    continue
                pgt = teacher_pgt(teacher, pixels, props,
                                  config.pgt_confidence_threshold)
                pixels_t, groups = augment(
                    pixels, (props, [e.box for e in pgt]), rng,
                    config.hflip, config.scale_jitter)
                props_t, pgt_boxes_t = groups
                pgt_t = [PgtEntry(box=b, class_id=e.class_id, score=e.score)
                         for b, e in zip(pgt_boxes_t, pgt)]
                n_pgt += len(pgt_t)
                if pgt_t:
                    loss = boxed_image_loss(student, pixels_t, pgt_t, props_t)
                    losses.append(loss)
                    pseudo_sum += float(loss.value)

        batch_loss = total_loss(losses[0], losses[1:]) * (1.0 / len(losses))
        batch_loss.backward()
        opt.step(lr)
        if teacher is not None:
            ema_update(teacher.parameters(), student.parameters(),
                       config.ema_momentum)
        history.records.append({
            "step": step, "lr": lr, "loss": float(batch_loss.value),
            "supervised": sup_sum / n_sup,
            "pseudo": pseudo_sum / max(1, len(losses) - n_sup),
            "n_pgt": n_pgt,
            "phase": "teach" if teaching else "burn_in",
        })
    history.wall_time_s = time.monotonic() - t0
    student.check_finite()
    if teacher is None:
        teacher = student.clone()
    if out_dir is not None:
        write_run_dir(out_dir, config, student, history, teacher=teacher)
    return student, teacher, history


def select_ensemble_classes(ap_with: dict, ap_baseline: dict) -> set:
    """Classes where adding generated data strictly improved AP.  An empty
    result means the caller should fall back to the full vocabulary."""
    if set(ap_with) != set(ap_baseline):
        raise ArgumentError("per-class AP maps cover different classes")
    return {c for c in ap_with if ap_with[c] > ap_baseline[c]}
