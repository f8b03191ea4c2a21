"""Identity headers, error mapping and authorization checks shared by the services."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from fastapi import FastAPI, Header, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from cloudcraft.auth import Action, Role, authorize
from cloudcraft.errors import CloudCraftError, Forbidden

USER_HEADER = "X-User-Id"
ROLE_HEADER = "X-User-Role"
CORRELATION_HEADER = "X-Correlation-Id"

log = logging.getLogger("cloudcraft.services")


class Unauthenticated(CloudCraftError):
    status = 401


@dataclass(frozen=True)
class Caller:
    user_id: str
    role: Role
    correlation_id: str

    def require(self, action: Action, *, own: bool = False) -> None:
        if not authorize(self.role, action, own=own):
            raise Forbidden(f"{self.role.value} may not {action.value}")


def caller(
    x_user_id: str | None = Header(None),
    x_user_role: str | None = Header(None),
    x_correlation_id: str | None = Header(None),
) -> Caller:
    if not x_user_id or not x_user_role:
        raise Unauthenticated("authentication required")
    try:
        role = Role(x_user_role)
    except ValueError:
        raise Unauthenticated(f"unknown role {x_user_role!r}") from None
    return Caller(x_user_id, role, x_correlation_id or "-")


def error_body(code: str, message: str, **extra) -> dict:
    return {"error": code, "message": message, **extra}


def install_error_handlers(app: FastAPI, service: str) -> None:
    @app.exception_handler(CloudCraftError)
    async def _domain_error(request: Request, exc: CloudCraftError):
        extra = exc.details()
        log.info(
            "%s %s %s -> %s %s [%s]",
            service, request.method, request.url.path, exc.status, exc.code,
            request.headers.get(CORRELATION_HEADER, "-"),
        )
        return JSONResponse(error_body(exc.code, str(exc), **extra), status_code=exc.status)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(error_body("ValidationError", "invalid request", detail=jsonable_encoder(exc.errors())), status_code=422)

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(error_body("BadRequest", str(exc)), status_code=400)

    @app.middleware("http")
    async def _log_hop(request: Request, call_next):
        response = await call_next(request)
        log.debug(
            "%s %s %s -> %s [%s]",
            service, request.method, request.url.path, response.status_code,
            request.headers.get(CORRELATION_HEADER, "-"),
        )
        return response
