"""HTTP entry point for web shops.

Every request is authenticated against the auth service, routed by its first
path segment to a service instance picked round-robin from the registry, and
relayed unchanged. Endpoints are either ``http://host:port`` or
``asgi://<name>`` for apps mounted in the same process.
"""
from __future__ import annotations

import json
import logging
import uuid

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from cloudcraft.control_plane.registry import NoLiveInstance, ServiceRegistry

log = logging.getLogger(__name__)

ROUTES = {
    "auth": "auth",
    "models": "order",
    "orders": "order",
    "printers": "printer",
    "billing": "billing",
}
OPEN_PATHS = {("POST", "/auth/register"), ("POST", "/auth/login")}
INTERNAL_PATHS = {"/auth/validate"}
CORRELATION_HEADER = "X-Correlation-Id"

# Never forwarded: hop-by-hop headers, and identity headers a client might forge.
_DROP_REQUEST = {
    "host", "content-length", "connection", "keep-alive", "transfer-encoding", "upgrade",
    "authorization", "x-user-id", "x-user-role", "x-correlation-id",
}
_DROP_RESPONSE = {"content-length", "connection", "keep-alive", "transfer-encoding", "content-encoding"}
_METHODS = ["GET", "POST", "PUT", "PATCH", "DELETE"]


def _error(status: int, code: str, message: str, cid: str, **extra) -> JSONResponse:
    return JSONResponse(
        {"error": code, "message": message, **extra}, status_code=status, headers={CORRELATION_HEADER: cid}
    )


class ApiGateway:
    def __init__(self, registry: ServiceRegistry, *, timeout_s: float = 30.0):
        self.registry = registry
        self.timeout_s = timeout_s
        self._asgi: dict[str, httpx.AsyncClient] = {}
        self._http: httpx.AsyncClient | None = None
        self.app = FastAPI(title="api-gateway")
        self.app.add_api_route("/{path:path}", self._handle, methods=_METHODS, include_in_schema=False)
        self.app.router.on_shutdown.append(self.aclose)

    def mount(self, endpoint: str, app) -> str:
        """Make an in-process ASGI app reachable as ``endpoint`` (``asgi://...``)."""
        if not endpoint.startswith("asgi://"):
            raise ValueError("in-process endpoints must use the asgi:// scheme")
        self._asgi[endpoint] = httpx.AsyncClient(
            transport=httpx.ASGITransport(app=app), base_url="http://service", timeout=self.timeout_s
        )
        return endpoint

    def _client(self, endpoint: str) -> tuple[httpx.AsyncClient, str]:
        if endpoint.startswith("asgi://"):
            if endpoint not in self._asgi:
                raise httpx.ConnectError(f"{endpoint} is not mounted in this process")
            return self._asgi[endpoint], ""
        if self._http is None:
            self._http = httpx.AsyncClient(timeout=self.timeout_s)
        return self._http, endpoint.rstrip("/")

    async def aclose(self) -> None:
        for client in self._asgi.values():
            await client.aclose()
        if self._http is not None:
            await self._http.aclose()

    async def _send(self, service: str, method: str, path: str, *, headers: dict, content: bytes, params=None):
        endpoint = self.registry.resolve(service)
        client, base = self._client(endpoint)
        return endpoint, await client.request(method, base + path, headers=headers, content=content, params=params)

    async def _claims(self, request: Request, cid: str) -> tuple[str, str] | JSONResponse:
        header = request.headers.get("authorization", "")
        scheme, _, token = header.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            return _error(401, "Unauthorized", "missing bearer token", cid)
        body = json.dumps({"token": token.strip()}).encode()
        try:
            _, resp = await self._send(
                "auth", "POST", "/auth/validate",
                headers={"content-type": "application/json", CORRELATION_HEADER: cid}, content=body,
            )
        except NoLiveInstance as exc:
            return _error(503, "ServiceUnavailable", str(exc), cid)
        except httpx.TransportError as exc:
            return _error(503, "ServiceUnavailable", f"auth unreachable: {exc}", cid)
        if resp.status_code != 200:
            reason = resp.json().get("error", "InvalidToken") if resp.content else "InvalidToken"
            log.info("[%s] rejected token: %s", cid, reason)
            return _error(401, "Unauthorized", "invalid or expired token", cid, reason=reason)
        claims = resp.json()
        return claims["user_id"], claims["role"]

    async def _handle(self, request: Request, path: str) -> Response:
        cid = uuid.uuid4().hex
        full = "/" + path
        service = ROUTES.get(path.split("/", 1)[0])
        if service is None or full in INTERNAL_PATHS:
            log.info("[%s] %s %s -> BadRoute", cid, request.method, full)
            return _error(404, "BadRoute", f"no service handles {full}", cid)

        headers = {k: v for k, v in request.headers.items() if k.lower() not in _DROP_REQUEST}
        headers[CORRELATION_HEADER] = cid
        if (request.method, full) not in OPEN_PATHS:
            claims = await self._claims(request, cid)
            if isinstance(claims, Response):
                return claims
            headers["X-User-Id"], headers["X-User-Role"] = claims

        body = await request.body()
        try:
            endpoint, resp = await self._send(
                service, request.method, full, headers=headers, content=body, params=request.url.query or None
            )
        except NoLiveInstance as exc:
            log.warning("[%s] %s %s -> no live %s instance", cid, request.method, full, service)
            return _error(503, "ServiceUnavailable", str(exc), cid)
        except httpx.TransportError as exc:
            log.warning("[%s] %s %s -> %s unreachable: %s", cid, request.method, full, service, exc)
            return _error(503, "ServiceUnavailable", f"{service} unreachable", cid)
        log.info("[%s] %s %s -> %s %s", cid, request.method, full, endpoint, resp.status_code)
        out = {k: v for k, v in resp.headers.items() if k.lower() not in _DROP_RESPONSE}
        out[CORRELATION_HEADER] = cid
        return Response(resp.content, status_code=resp.status_code, headers=out)
