"""Class sampling and scene descriptions.

A sample starts from a uniformly drawn class id, becomes a fixed-template
prompt ("A photo of a {name}") and is optionally extended to a full scene
description by a language-model client. Clients are addressed by endpoint:
an ``http(s)://`` URL speaks the wire protocol (POST /extend), while
``mock:<name>`` selects a built-in deterministic generator so the whole
pipeline runs offline.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import requests

from .errors import ConfigurationError, ProtocolError, TransportError
from .vocab import ClassVocab

PREFIX_TEMPLATE = "A photo of a {name}"

# Scene continuations for the "mock:scene" backend. Each ends in a full stop
# so generation terminates on its own; the token cap still applies.
_SCENE_PHRASES = (
    "in a sunny park with tall trees.",
    "on a quiet street at noon.",
    "next to an old wooden fence.",
    "under a cloudy sky at dusk.",
    "standing on wet grass after rain.",
    "near a lake with calm water.",
    "in front of a brick wall.",
    "on a sandy beach in summer.",
    "beside a red bicycle on the road.",
    "in a bright kitchen by the window.",
    "surrounded by fallen autumn leaves.",
    "on a snowy hill in the morning.",
    "at the edge of a busy market.",
    "inside a large empty warehouse.",
    "in a garden full of flowers.",
    "crossing an empty parking lot.",
)


@dataclass(frozen=True)
class PromptText:
    text: str
    class_id: int


@dataclass(frozen=True)
class Description:
    text: str
    class_id: int
    lm_used: bool


@dataclass
class LmClientConfig:
    endpoint: str = "mock:scene"
    max_tokens: int = 15
    request_timeout: float = 10.0
    retries: int = 3
    retry_backoff: float = 0.25

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ConfigurationError("max_tokens must be >= 1")


def sample_class(vocab: ClassVocab, rng: np.random.Generator, restrict=None) -> int:
    """Draw a class id uniformly, optionally restricted to a subset of ids."""
    ids = list(vocab.ids()) if restrict is None else sorted(restrict)
    if not ids:
        raise ConfigurationError("no classes to sample from")
    for c in ids:
        if not (0 <= c < len(vocab)):
            raise ConfigurationError(f"restricted class id {c} not in vocab")
    return int(ids[rng.integers(0, len(ids))])


def build_prefix(vocab: ClassVocab, class_id: int) -> PromptText:
    """Apply the literal prompt template; no a/an article correction."""
    name = vocab.name_of(class_id)
    return PromptText(text=PREFIX_TEMPLATE.format(name=name), class_id=class_id)


def _append_tokens(prefix: str, continuation: str, max_tokens: int) -> str:
    """Append whitespace tokens until the first '.' or the token cap."""
    out = prefix
    appended = 0
    for token in continuation.split():
        if appended >= max_tokens:
            break
        dot = token.find(".")
        if dot >= 0:
            out = out + " " + token[: dot + 1]
            return out
        out = out + " " + token
        appended += 1
    return out


def _mock_continuation(name: str, prompt: PromptText, seed: int) -> str:
    if name == "echo":
        return ""
    if name.startswith("suffix:"):
        return name[len("suffix:"):]
    if name == "scene":
        rng = np.random.default_rng(int(seed))
        return _SCENE_PHRASES[int(rng.integers(0, len(_SCENE_PHRASES)))]
    raise ConfigurationError(f"unknown mock LM backend {name!r}")


def _post_json(url: str, payload: dict, timeout: float, retries: int, backoff: float) -> dict:
    """POST with bounded retries on transport-level failures."""
    attempt = 0
    while True:
        attempt += 1
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            if attempt >= retries:
                raise TransportError(f"{url} unreachable after {attempt} attempts: {exc}",
                                     attempts=attempt) from exc
            time.sleep(backoff * (2 ** (attempt - 1)))
            continue
        if resp.status_code >= 500:
            if attempt >= retries:
                raise TransportError(f"{url} failed with {resp.status_code} after {attempt} attempts",
                                     attempts=attempt)
            time.sleep(backoff * (2 ** (attempt - 1)))
            continue
        if resp.status_code != 200:
            raise ProtocolError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise ProtocolError(f"{url} returned non-JSON body") from exc


def extend_description(client: LmClientConfig, prompt: PromptText, seed: int) -> Description:
    """Extend the prompt into a full scene description via the LM client."""
    if client.endpoint.startswith("mock:"):
        continuation = _mock_continuation(client.endpoint[len("mock:"):], prompt, seed)
        text = _append_tokens(prompt.text, continuation, client.max_tokens)
        return Description(text=text, class_id=prompt.class_id, lm_used=True)

    body = _post_json(
        client.endpoint.rstrip("/") + "/extend",
        {"prefix": prompt.text, "max_tokens": client.max_tokens, "seed": int(seed)},
        client.request_timeout, client.retries, client.retry_backoff,
    )
    text = body.get("text")
    if not isinstance(text, str):
        raise ProtocolError("/extend response missing string field 'text'")
    if not text.startswith(prompt.text):
        raise ProtocolError("/extend response does not preserve the prompt prefix")
    return Description(text=text, class_id=prompt.class_id, lm_used=True)


def describe(prompt: PromptText, client: LmClientConfig | None, seed: int) -> Description:
    """Full description, or the prompt passed through when the LM is off."""
    if client is None:
        return Description(text=prompt.text, class_id=prompt.class_id, lm_used=False)
    return extend_description(client, prompt, seed)
