from __future__ import annotations

from fastapi import FastAPI

from cloudcraft.auth import AuthService, Role
from cloudcraft.errors import Forbidden
from cloudcraft.services.common import install_error_handlers
from cloudcraft.services.schemas import (
    ClaimsResponse,
    LoginRequest,
    RegisterRequest,
    TokenResponse,
    UserResponse,
    ValidateRequest,
)


def create_auth_app(auth: AuthService) -> FastAPI:
    app = FastAPI(title="auth")
    install_error_handlers(app, "auth")

    @app.post("/auth/register", status_code=201, response_model=UserResponse)
    def register(req: RegisterRequest) -> UserResponse:
        # Operators of the platform itself are provisioned, never self-registered.
        if req.role is Role.PLATFORM_OPERATOR:
            raise Forbidden("PlatformOperator accounts cannot self-register")
        account = auth.register_user(req.name, req.credential, req.role, req.display_name)
        return UserResponse(user_id=account.user_id, display_name=account.display_name, role=account.role)

    @app.post("/auth/login", response_model=TokenResponse)
    def login(req: LoginRequest) -> TokenResponse:
        token = auth.login(req.name, req.credential)
        return TokenResponse(token=str(token), expires_at=token.expires_at, role=token.role)

    # Internal: the gateway asks here before forwarding any other request.
    @app.post("/auth/validate", response_model=ClaimsResponse)
    def validate(req: ValidateRequest) -> ClaimsResponse:
        user_id, role = auth.validate_token(req.token)
        return ClaimsResponse(user_id=user_id, role=role)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    return app
