"""Full detector: encoder + heads + vocabulary, and checkpoint IO.

Checkpoints are a fixed binary container (magic, JSON header, raw
little-endian float64 buffers) rather than a zip so identical parameters
always serialize to identical bytes, with no embedded timestamps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, parameter
from .errors import FormatError, NumericError
from .features import (DEFAULT_CHANNELS, DEFAULT_POOL, EncoderParams, encode,
                       init_encoder, proposal_representation, roi_pool_batch)
from .heads import HeadParams, init_heads, mil_forward, refinement_forward
from .vocab import ClassVocab

MAGIC = b"IMDETCKPT1\n"


@dataclass
class DetectorModel:
    encoder: EncoderParams
    heads: HeadParams
    vocab: ClassVocab
    config_hash: str = ""

    @property
    def n_classes(self) -> int:
        return len(self.vocab)

    @property
    def d(self) -> int:
        return self.encoder.d

    def parameters(self) -> list:
        return self.encoder.parameters() + self.heads.parameters()

    def check_finite(self) -> None:
        for name, t in self.parameters():
            if not np.isfinite(t.value).all():
                raise NumericError(f"non-finite values in parameter {name}")

    def proposal_feats(self, image, boxes) -> Tensor:
        fmap = encode(self.encoder, image)
        pooled = roi_pool_batch(fmap, boxes, self.encoder.pool_size)
        return proposal_representation(self.encoder, pooled)

    def forward(self, image, boxes):
        """Differentiable pass: (features, ScoreMatrices, [ref prob tensors])."""
        feats = self.proposal_feats(image, boxes)
        sm = mil_forward(feats, self.heads)
        refs = [refinement_forward(feats, self.heads, k)
                for k in range(self.heads.n_stages)]
        return feats, sm, refs

    def scores(self, image, boxes, source: str = "refinement") -> np.ndarray:
        """(P, C) detection scores as plain numbers.

        refinement: class columns averaged over stages (background dropped);
        mil: the product matrix x_m.
        """
        _feats, sm, refs = self.forward(image, boxes)
        if source == "mil" or not refs:
            return sm.x_m.value.copy()
        stack = np.stack([r.value[:, : self.n_classes] for r in refs])
        return stack.mean(axis=0)

    def clone(self) -> "DetectorModel":
        blob = checkpoint_bytes(self)
        return model_from_bytes(blob)


def build_model(seed: int, vocab: ClassVocab, d: int = 128, k_stages: int = 1,
                channels: tuple = DEFAULT_CHANNELS, pool_size: int = DEFAULT_POOL,
                config_hash: str = "") -> DetectorModel:
    encoder = init_encoder(seed=seed, d=d, channels=channels, pool_size=pool_size)
    heads = init_heads(seed=seed, d=d, n_classes=len(vocab), k_stages=k_stages)
    return DetectorModel(encoder=encoder, heads=heads, vocab=vocab,
                         config_hash=config_hash)


def checkpoint_bytes(model: DetectorModel) -> bytes:
    named = model.parameters()
    arrays = []
    offset = 0
    for name, t in named:
        nbytes = t.value.size * 8
        arrays.append({"name": name, "shape": list(t.value.shape),
                       "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": 1,
        "d": model.encoder.d,
        "pool_size": model.encoder.pool_size,
        "channels": [w.value.shape[0] for w, _b in model.encoder.convs],
        "k_stages": model.heads.n_stages,
        "vocab": model.vocab.to_list(),
        "config_hash": model.config_hash,
        "dtype": "<f8",
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, len(hbytes).to_bytes(8, "little"), hbytes]
    for _name, t in named:
        parts.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: DetectorModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def model_from_bytes(blob: bytes) -> DetectorModel:
    if not blob.startswith(MAGIC):
        raise FormatError("not a checkpoint: bad magic")
    hlen = int.from_bytes(blob[len(MAGIC):len(MAGIC) + 8], "little")
    hstart = len(MAGIC) + 8
    try:
        header = json.loads(blob[hstart:hstart + hlen])
    except ValueError as exc:
        raise FormatError("checkpoint header is not valid JSON") from exc
    if header.get("format") != 1:
        raise FormatError(f"unsupported checkpoint format {header.get('format')!r}")
    base = hstart + hlen
    values = {}
    for a in header["arrays"]:
        start = base + a["offset"]
        raw = blob[start:start + a["nbytes"]]
        if len(raw) != a["nbytes"]:
            raise FormatError(f"checkpoint truncated at array {a['name']}")
        values[a["name"]] = np.frombuffer(raw, dtype="<f8").reshape(a["shape"]).copy()

    vocab = ClassVocab.from_list(header["vocab"])
    d = header["d"]
    pool = header["pool_size"]
    channels = header["channels"]
    k = header["k_stages"]
    try:
        convs = [(parameter(values[f"enc.conv{i}.w"]), parameter(values[f"enc.conv{i}.b"]))
                 for i in range(len(channels))]
        encoder = EncoderParams(
            convs=convs,
            w1=parameter(values["enc.proj.w1"]), b1=parameter(values["enc.proj.b1"]),
            w2=parameter(values["enc.proj.w2"]), b2=parameter(values["enc.proj.b2"]),
            d=d, pool_size=pool)
        heads = HeadParams(
            w_cls=parameter(values["head.cls.w"]), b_cls=parameter(values["head.cls.b"]),
            w_prop=parameter(values["head.prop.w"]), b_prop=parameter(values["head.prop.b"]),
            refs=[(parameter(values[f"head.ref{i}.w"]), parameter(values[f"head.ref{i}.b"]))
                  for i in range(k)])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing array {exc}") from exc
    return DetectorModel(encoder=encoder, heads=heads, vocab=vocab,
                         config_hash=header.get("config_hash", ""))


def load_checkpoint(path: str) -> DetectorModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
