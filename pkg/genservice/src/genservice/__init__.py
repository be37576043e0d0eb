"""Generator microservice speaking the protocol in protocol.md.

Serves GET /health, POST /extend (prompt continuation), and
POST /synthesize (seeded PNG rendering) over mock or pluggable real
backends. `conformance_check` validates any endpoint against the
protocol contract.
"""

from .backends import BackendConfig, BackendError, NotReadyError
from .app import build_app, serve
from .conformance import CheckReport, conformance_check

__all__ = [
    "BackendConfig", "BackendError", "NotReadyError",
    "build_app", "serve",
    "CheckReport", "conformance_check",
]
