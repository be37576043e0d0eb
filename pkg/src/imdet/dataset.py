"""Dataset directories: PNG images plus a JSONL manifest.

Layout:
    <dir>/images/<idx>.png
    <dir>/manifest.jsonl     one JSON object per line
    <dir>/dataset.json       generation summary (requested/achieved counts)
    <dir>/proposals/<idx>.json   optional proposal cache (see proposals.py)

Loading a sample normally drops ground-truth boxes. Boxes attached to
imaginary-provenance samples are oracle boxes: materializing them bumps a
global read counter so training modes that must never see them can prove
they did not (the counter stays 0 across a training run).
"""

from __future__ import annotations

import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .boxes import BoxF
from .errors import ArgumentError, ConfigurationError, FormatError, GenerationError, ImdetError
from .imagination import LmClientConfig, build_prefix, describe, sample_class
from .synthesis import (ImageSample, SynthClient, SynthRequest,
                        pixels_to_png_bytes, png_bytes_to_pixels, synthesize)
from .vocab import ClassVocab

ROLES = ("imaginary", "real_weak", "real_boxed", "real_unlabeled")

_oracle_lock = threading.Lock()
_oracle_box_reads = 0


def oracle_box_reads() -> int:
    return _oracle_box_reads


def reset_oracle_box_reads() -> None:
    global _oracle_box_reads
    with _oracle_lock:
        _oracle_box_reads = 0


def _count_oracle_read() -> None:
    global _oracle_box_reads
    with _oracle_lock:
        _oracle_box_reads += 1


def record_to_json_line(rec: dict) -> str:
    """Canonical manifest line; fixed key order, compact separators."""
    ordered = {"idx": rec["idx"], "file": rec["file"], "provenance": rec["provenance"],
               "class_labels": sorted(rec["class_labels"])}
    if rec.get("gt_boxes") is not None:
        ordered["gt_boxes"] = rec["gt_boxes"]
    if rec.get("description") is not None:
        ordered["description"] = rec["description"]
    if rec.get("seed") is not None:
        ordered["seed"] = rec["seed"]
    return json.dumps(ordered, separators=(",", ":"), ensure_ascii=False)


@dataclass
class DatasetHandle:
    """A manifest plus the role its annotations play during training."""
    root: str
    role: str = "imaginary"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown dataset role {self.role!r}")
        self.manifest_path = os.path.join(self.root, "manifest.jsonl")
        if not os.path.isfile(self.manifest_path):
            raise ConfigurationError(f"no manifest at {self.manifest_path}")
        self.records = []
        with open(self.manifest_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{self.manifest_path}:{lineno + 1}: bad JSON") from exc
                self.records.append(rec)
        if not self.records:
            raise ConfigurationError(f"{self.manifest_path} is empty")
        self._check_role()

    def _check_role(self):
        for rec in self.records:
            if self.role == "imaginary" and rec.get("provenance") != "imaginary":
                raise ConfigurationError(
                    f"{self.root}: role imaginary but record {rec.get('idx')} has "
                    f"provenance {rec.get('provenance')!r}")
            if self.role == "real_weak" and not rec.get("class_labels"):
                raise ConfigurationError(
                    f"{self.root}: role real_weak needs class_labels on every record")
            if self.role == "real_boxed" and not rec.get("gt_boxes"):
                raise ConfigurationError(
                    f"{self.root}: role real_boxed needs gt_boxes on every record")

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, i: int) -> str:
        return os.path.join(self.root, self.records[i]["file"])

    def load_sample(self, i: int, with_boxes: bool = False) -> ImageSample:
        """Load pixels and annotations for record i.

        with_boxes=False drops gt_boxes entirely; that is the only mode the
        image-level training paths use. Reading boxes off an imaginary
        record counts as an oracle read.
        """
        rec = self.records[i]
        with open(self.image_path(i), "rb") as fh:
            pixels = png_bytes_to_pixels(fh.read())
        gt = None
        if with_boxes and rec.get("gt_boxes"):
            gt = [(BoxF(b[0], b[1], b[2], b[3]), int(b[4])) for b in rec["gt_boxes"]]
            if rec.get("provenance") == "imaginary":
                _count_oracle_read()
        return ImageSample(
            pixels=pixels,
            provenance=rec["provenance"],
            class_labels=set(int(c) for c in rec.get("class_labels", [])) or None,
            gt_boxes=gt,
            description=rec.get("description"),
            seed=rec.get("seed"),
        )


def _generate_one(vocab: ClassVocab, lm_client, synth_client, base_seed: int, idx: int,
                  width: int, height: int, provenance: str, restrict):
    sample_seed = base_seed + idx
    class_rng = np.random.default_rng([sample_seed, 0])
    cid = sample_class(vocab, class_rng, restrict=restrict)
    prompt = build_prefix(vocab, cid)
    desc = describe(prompt, lm_client, sample_seed)
    sample = synthesize(synth_client, desc,
                        SynthRequest(prompt=desc.text, seed=sample_seed,
                                     width=width, height=height))
    png = pixels_to_png_bytes(sample.pixels)
    rec = {
        "idx": idx,
        "file": f"images/{idx}.png",
        "provenance": provenance,
        "class_labels": sorted(sample.class_labels or {cid}),
        "gt_boxes": [[b.x1, b.y1, b.x2, b.y2, c] for b, c in sample.gt_boxes]
        if sample.gt_boxes else None,
        "description": desc.text,
        "seed": sample_seed,
    }
    return rec, png


def generate_dataset(vocab: ClassVocab, lm_client: LmClientConfig | None,
                     synth_client: SynthClient, n_samples: int, seed: int,
                     out_dir: str, width: int = 64, height: int = 64,
                     provenance: str = "imaginary", restrict_classes=None,
                     workers: int = 1, log=None) -> dict:
    """Write n_samples records under out_dir; returns the summary dict.

    Per-sample seeds are seed + index, so any worker count produces the
    same bytes. Failed samples are skipped and logged; more than 10%
    failures aborts the run.
    """
    if n_samples < 1:
        raise ArgumentError("n_samples must be >= 1")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    results: dict[int, tuple] = {}
    failures: dict[int, str] = {}

    def work(idx):
        return _generate_one(vocab, lm_client, synth_client, seed, idx,
                             width, height, provenance, restrict_classes)

    if workers <= 1:
        for idx in range(n_samples):
            try:
                results[idx] = work(idx)
            except ImdetError as exc:
                failures[idx] = str(exc)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {idx: pool.submit(work, idx) for idx in range(n_samples)}
            for idx, fut in futures.items():
                try:
                    results[idx] = fut.result()
                except ImdetError as exc:
                    failures[idx] = str(exc)

    if failures and log is not None:
        for idx in sorted(failures):
            log(f"sample {idx} skipped: {failures[idx]}")
    if len(failures) > 0.1 * n_samples:
        raise GenerationError(
            f"{len(failures)}/{n_samples} samples failed; first error: "
            f"{failures[min(failures)]}")

    lines = []
    for idx in sorted(results):
        rec, png = results[idx]
        with open(os.path.join(out_dir, rec["file"]), "wb") as fh:
            fh.write(png)
        lines.append(record_to_json_line(rec))
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    summary = {
        "requested": n_samples,
        "achieved": len(results),
        "skipped": len(failures),
        "seed": seed,
        "provenance": provenance,
        "width": width,
        "height": height,
        "backend": synth_client.endpoint,
        "lm": lm_client.endpoint if lm_client is not None else "off",
        "vocab": vocab.to_list(),
        "restrict_classes": sorted(restrict_classes) if restrict_classes else None,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
