"""HTTP JSON service around the linker.

Endpoints
---------
POST /link     {text, spans?: [{start, end, label?}], top_k?, mode?} -> LinkResult JSON
GET  /health   503 while dependencies load, then {status, kb_entities, index_version}
GET  /stats    rolling latency percentiles over the most recent requests
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading
import time
from collections import deque
from collections.abc import Callable
from contextlib import asynccontextmanager
from dataclasses import replace

import numpy as np
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from .dense import EncoderMiss
from .errors import ElinkError, ValidationError
from .pipeline import RETRIEVAL_MODES, LinkerConfig, LinkerDeps, link_text, link_with_spans

logger = logging.getLogger(__name__)

DEFAULT_MAX_INFLIGHT = 32
LATENCY_WINDOW = 2048


class ServiceState:
    """Read-only deps plus request accounting. Deps are swapped in exactly once."""

    def __init__(
        self,
        config: LinkerConfig | None = None,
        deps: LinkerDeps | None = None,
        max_inflight: int = DEFAULT_MAX_INFLIGHT,
        window: int = LATENCY_WINDOW,
    ):
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        self.config = config or LinkerConfig()
        self.deps = deps
        self.max_inflight = max_inflight
        self.load_error: str | None = None
        self._latencies: deque[float] = deque(maxlen=window)
        self._lock = threading.Lock()
        self.requests = 0
        self.errors = 0

    @property
    def ready(self) -> bool:
        return self.deps is not None

    def record(self, ms: float | None) -> None:
        with self._lock:
            self.requests += 1
            if ms is None:
                self.errors += 1
            else:
                self._latencies.append(ms)

    def stats(self) -> dict:
        with self._lock:
            lat = np.asarray(self._latencies, dtype=np.float64)
            requests, errors = self.requests, self.errors
        out = {"requests": requests, "errors": errors, "window": int(lat.size)}
        if lat.size:
            p50, p95, p99 = np.percentile(lat, [50, 95, 99])
            out["latency_ms"] = {
                "p50": round(float(p50), 3),
                "p95": round(float(p95), 3),
                "p99": round(float(p99), 3),
                "mean": round(float(lat.mean()), 3),
                "max": round(float(lat.max()), 3),
            }
        else:
            out["latency_ms"] = None
        return out


def _error(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"type": kind, "message": message}})


def parse_link_request(body: bytes, base: LinkerConfig) -> tuple[str, list[tuple] | None, LinkerConfig]:
    """Validate a /link body. Raises ValidationError with a client-facing message."""
    try:
        payload = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"malformed JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValidationError("body must be a JSON object")
    text = payload.get("text")
    if not isinstance(text, str):
        raise ValidationError("'text' is required and must be a string")
    overrides = {}
    top_k = payload.get("top_k")
    if top_k is not None:
        if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
            raise ValidationError("'top_k' must be a positive integer")
        overrides["top_k"] = top_k
    mode = payload.get("mode")
    if mode is not None:
        if mode not in RETRIEVAL_MODES:
            raise ValidationError(f"'mode' must be one of {list(RETRIEVAL_MODES)}")
        overrides["retrieval_mode"] = mode
    spans = payload.get("spans")
    if spans is not None:
        if not isinstance(spans, list):
            raise ValidationError("'spans' must be a list")
        parsed = []
        for s in spans:
            if not isinstance(s, dict) or "start" not in s or "end" not in s:
                raise ValidationError("each span needs 'start' and 'end'")
            parsed.append((s["start"], s["end"], s.get("label")))
        spans = parsed
    config = replace(base, **overrides) if overrides else base
    return text, spans, config


def create_app(state: ServiceState, loader: Callable[[], LinkerDeps] | None = None) -> FastAPI:
    """Build the ASGI app. With ``loader``, deps load in a background thread at startup."""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if loader is not None and state.deps is None:

            def load():
                try:
                    state.deps = loader()
                    logger.info("dependencies loaded")
                except Exception as exc:  # surfaced through /health
                    logger.exception("dependency load failed")
                    state.load_error = str(exc)

            threading.Thread(target=load, name="elink-loader", daemon=True).start()
        yield

    app = FastAPI(title="elink", lifespan=lifespan)
    app.state.elink = state
    inflight = asyncio.Semaphore(state.max_inflight)

    @app.get("/health")
    async def health():
        if state.load_error is not None:
            return JSONResponse(status_code=503, content={"status": "error", "message": state.load_error})
        deps = state.deps
        if deps is None:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return {"status": "ok", "kb_entities": deps.kb.entity_count, "index_version": deps.index_version}

    @app.get("/stats")
    async def stats():
        return state.stats()

    @app.post("/link")
    async def link(request: Request):
        deps = state.deps
        if deps is None:
            return _error(503, "unavailable", "dependencies are still loading")
        try:
            text, spans, config = parse_link_request(await request.body(), state.config)
        except ValidationError as exc:
            state.record(None)
            return _error(400, "bad_request", str(exc))
        t0 = time.perf_counter()
        async with inflight:
            try:
                if spans is None:
                    result = await run_in_threadpool(link_text, text, config, deps)
                else:
                    result = await run_in_threadpool(link_with_spans, text, spans, config, deps)
            except ValidationError as exc:
                state.record(None)
                return _error(400, "bad_request", str(exc))
            except EncoderMiss as exc:
                state.record(None)
                return _error(422, "encoder_miss", str(exc.args[0]))
            except ElinkError as exc:
                state.record(None)
                logger.exception("link failed")
                return _error(500, type(exc).__name__, str(exc))
        state.record((time.perf_counter() - t0) * 1000.0)
        return result.to_dict()

    return app
