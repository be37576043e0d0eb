"""Protocol conformance checker for any endpoint speaking protocol.md."""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import requests

from . import png

GOLDEN_PREFIX = "A photo of a dog"
GOLDEN_PROMPT = "A photo of a dog on a beach"


@dataclass
class CheckReport:
    endpoint: str
    checks: list = field(default_factory=list)     # (route, description)
    failures: list = field(default_factory=list)   # (route, detail)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"conformance against {self.endpoint}: "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        lines += [f"  ok   {route}: {desc}" for route, desc in self.checks]
        lines += [f"  FAIL {route}: {detail}" for route, detail in self.failures]
        return "\n".join(lines)


def _decode_image(body: dict) -> bytes:
    b64 = body.get("image_png_b64")
    if not isinstance(b64, str):
        raise ValueError("response missing string field 'image_png_b64'")
    return base64.b64decode(b64, validate=True)


def conformance_check(endpoint: str, timeout: float = 10.0) -> CheckReport:
    """Exercise /health, /extend, /synthesize with golden requests."""
    base = endpoint.rstrip("/")
    report = CheckReport(endpoint=endpoint)

    def run(route: str, desc: str, fn) -> bool:
        try:
            fn()
        except Exception as exc:
            report.failures.append((route, f"{desc}: {exc}"))
            return False
        report.checks.append((route, desc))
        return True

    backend = {}

    def check_health():
        resp = requests.get(f"{base}/health", timeout=timeout)
        if resp.status_code != 200:
            raise ValueError(f"status {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        if body.get("status") != "ok" or not isinstance(body.get("backend"), str):
            raise ValueError(f"schema violation: {body}")
        backend["name"] = body["backend"]

    if not run("/health", "200 with status=ok and backend name", check_health):
        return report  # unreachable or broken service; nothing else to try
    is_mock = backend["name"] == "mock"

    extend_req = {"prefix": GOLDEN_PREFIX, "max_tokens": 15, "seed": 1}
    texts = []

    def check_extend():
        resp = requests.post(f"{base}/extend", json=extend_req, timeout=timeout)
        if resp.status_code != 200:
            raise ValueError(f"status {resp.status_code}: {resp.text[:200]}")
        text = resp.json().get("text")
        if not isinstance(text, str):
            raise ValueError("response missing string field 'text'")
        if not text.startswith(GOLDEN_PREFIX):
            raise ValueError(f"prefix not preserved: {text[:80]!r}")
        texts.append(text)

    def check_extend_determinism():
        check_extend()
        if texts[0] != texts[-1]:
            raise ValueError("two identical requests returned different text")

    run("/extend", "returns text preserving the prefix", check_extend)
    if is_mock and texts:
        run("/extend", "mock determinism: identical request, identical text",
            check_extend_determinism)

    synth_req = {"prompt": GOLDEN_PROMPT, "seed": 7, "width": 64, "height": 48}
    images = []

    def check_synthesize():
        resp = requests.post(f"{base}/synthesize", json=synth_req, timeout=timeout)
        if resp.status_code != 200:
            raise ValueError(f"status {resp.status_code}: {resp.text[:200]}")
        raw = _decode_image(resp.json())
        w, h = png.inspect(raw)
        if (w, h) != (synth_req["width"], synth_req["height"]):
            raise ValueError(f"requested {synth_req['width']}x{synth_req['height']}, "
                             f"decoded {w}x{h}")
        images.append(raw)

    def check_synthesize_determinism():
        check_synthesize()
        if images[0] != images[-1]:
            raise ValueError("two identical requests returned different bytes")

    run("/synthesize", "returns a decodable PNG at the requested size",
        check_synthesize)
    if is_mock and images:
        run("/synthesize", "mock determinism: identical request, identical bytes",
            check_synthesize_determinism)

    def check_malformed():
        resp = requests.post(f"{base}/extend", json={}, timeout=timeout)
        if resp.status_code != 400:
            raise ValueError(f"expected 400, got {resp.status_code}")
        if not isinstance(resp.json().get("error"), str):
            raise ValueError("400 body missing string field 'error'")

    run("/extend", "malformed request rejected with 400 + error string",
        check_malformed)
    return report
