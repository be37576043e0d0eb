"""Backend configuration and the built-in deterministic mock models.

Real model wrappers can be registered per backend name; the mock pair is
always available and is byte-deterministic for a fixed request.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import png

LM_BACKENDS = ("mock", "gpt2-like")
T2I_BACKENDS = ("mock", "dalle-mini-like", "stable-diffusion-like")


class BackendError(RuntimeError):
    """The backend failed while handling a valid request (HTTP 500)."""


class NotReadyError(RuntimeError):
    """The backend's models are not loadable/loaded (HTTP 503)."""


@dataclass
class BackendConfig:
    lm_backend: str = "mock"
    t2i_backend: str = "mock"
    device: str = "cpu"
    max_concurrent: int = 4

    def __post_init__(self):
        if self.lm_backend not in LM_BACKENDS:
            raise ValueError(f"lm_backend must be one of {LM_BACKENDS}, "
                             f"got {self.lm_backend!r}")
        if self.t2i_backend not in T2I_BACKENDS:
            raise ValueError(f"t2i_backend must be one of {T2I_BACKENDS}, "
                             f"got {self.t2i_backend!r}")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")

    @property
    def name(self) -> str:
        if self.lm_backend == self.t2i_backend == "mock":
            return "mock"
        return f"{self.lm_backend}/{self.t2i_backend}"


_FRAGMENTS = (
    "on a wooden table", "in a sunlit room", "next to a tall window.",
    "under a cloudy sky", "beside a red brick wall.", "on fresh green grass",
    "in the middle of a quiet street.", "near a small pond at dawn",
    "surrounded by fallen autumn leaves.", "on a sandy beach at noon",
    "under warm evening light.", "in front of an old wooden bookshelf",
)


class MockLm:
    """Seeded continuation built from a fixed fragment pool."""

    def extend(self, prefix: str, max_tokens: int, seed: int) -> str:
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF,
                                     zlib.crc32(prefix.encode("utf-8"))])
        words = []
        while len(words) < max_tokens:
            words.extend(_FRAGMENTS[int(rng.integers(0, len(_FRAGMENTS)))].split())
        out = prefix
        appended = 0
        for token in words:
            out = out + " " + token
            appended += 1
            # stop at the sentence terminator or the token budget
            if token.endswith(".") or appended >= max_tokens:
                break
        return out


class MockT2i:
    """Seeded smooth color field rendered straight to PNG bytes."""

    def synthesize(self, prompt: str, seed: int, width: int, height: int) -> bytes:
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF,
                                     zlib.crc32(prompt.encode("utf-8"))])
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        img = np.empty((height, width, 3))
        for c in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            img[..., c] = 0.5 + 0.45 * np.sin(
                2.0 * np.pi * (fx * xx / width + fy * yy / height) + phase)
        img += rng.normal(0.0, 0.02, size=img.shape)
        return png.encode_rgb((np.clip(img, 0.0, 1.0) * 255).astype(np.uint8))


def load_lm(config: BackendConfig):
    if config.lm_backend == "mock":
        return MockLm()
    raise NotReadyError(
        f"lm backend {config.lm_backend!r} requires model weights that are "
        f"not installed in this environment")


def load_t2i(config: BackendConfig):
    if config.t2i_backend == "mock":
        return MockT2i()
    raise NotReadyError(
        f"t2i backend {config.t2i_backend!r} requires model weights that are "
        f"not installed in this environment")
