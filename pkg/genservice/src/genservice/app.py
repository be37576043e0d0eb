"""HTTP service implementing the routes documented in protocol.md."""

from __future__ import annotations

import asyncio
import base64

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
from starlette.concurrency import run_in_threadpool

from .backends import (BackendConfig, BackendError, NotReadyError, load_lm,
                       load_t2i)


class ExtendRequest(BaseModel):
    prefix: str
    max_tokens: int = Field(ge=1)
    seed: int


class SynthesizeRequest(BaseModel):
    prompt: str
    seed: int
    width: int = Field(ge=8)
    height: int = Field(ge=8)


def build_app(config: BackendConfig | None = None) -> FastAPI:
    config = config or BackendConfig()
    app = FastAPI(title="genservice", docs_url=None, redoc_url=None)
    sem = asyncio.Semaphore(config.max_concurrent)

    # Load at startup; a backend that cannot load leaves its routes at 503.
    lm = t2i = None
    load_errors: dict[str, str] = {}
    for role, loader in (("lm", load_lm), ("t2i", load_t2i)):
        try:
            loaded = loader(config)
        except NotReadyError as exc:
            load_errors[role] = str(exc)
            continue
        if role == "lm":
            lm = loaded
        else:
            t2i = loaded

    @app.exception_handler(RequestValidationError)
    async def on_bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(NotReadyError)
    async def on_not_ready(request: Request, exc: NotReadyError):
        return JSONResponse(status_code=503, content={"error": str(exc)})

    @app.exception_handler(BackendError)
    async def on_backend_failure(request: Request, exc: BackendError):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def on_unexpected(request: Request, exc: Exception):
        return JSONResponse(status_code=500,
                            content={"error": f"{type(exc).__name__}: {exc}"})

    @app.get("/health")
    async def health():
        if load_errors:
            detail = "; ".join(f"{role}: {msg}" for role, msg in load_errors.items())
            return JSONResponse(status_code=503, content={"error": detail})
        return {"status": "ok", "backend": config.name}

    @app.post("/extend")
    async def extend(req: ExtendRequest):
        if lm is None:
            raise NotReadyError(load_errors["lm"])
        async with sem:
            try:
                text = await run_in_threadpool(lm.extend, req.prefix,
                                               req.max_tokens, req.seed)
            except NotReadyError:
                raise
            except Exception as exc:
                raise BackendError(f"lm backend failed: {exc}") from exc
        return {"text": text}

    @app.post("/synthesize")
    async def synthesize(req: SynthesizeRequest):
        if t2i is None:
            raise NotReadyError(load_errors["t2i"])
        async with sem:
            try:
                raw = await run_in_threadpool(t2i.synthesize, req.prompt,
                                              req.seed, req.width, req.height)
            except NotReadyError:
                raise
            except Exception as exc:
                raise BackendError(f"t2i backend failed: {exc}") from exc
        return {"image_png_b64": base64.b64encode(raw).decode("ascii")}

    return app


def serve(config: BackendConfig | None = None, host: str = "127.0.0.1",
          port: int = 8008) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(build_app(config), host=host, port=port, log_level="warning")
