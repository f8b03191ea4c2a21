"""Request and response bodies for the REST surface.

Euro amounts travel as decimal strings so no value passes through a float.
"""
from __future__ import annotations

from decimal import Decimal
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cloudcraft.auth import Role


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Auth -----------------------------------------------------------------------

class RegisterRequest(_Body):
    name: str = Field(min_length=1, max_length=128)
    credential: str
    role: Role
    display_name: Optional[str] = None


class UserResponse(BaseModel):
    user_id: str
    display_name: str
    role: Role


class LoginRequest(_Body):
    name: str
    credential: str


class TokenResponse(BaseModel):
    token: str
    token_type: str = "bearer"
    expires_at: float
    role: Role


class ValidateRequest(_Body):
    token: str


class ClaimsResponse(BaseModel):
    user_id: str
    role: Role


# Models and orders ------------------------------------------------------------

class ModelUpload(_Body):
    display_name: str = Field(min_length=1)
    payload: str = Field(min_length=1, description="CAD file content, opaque to the platform")
    required_material: str = Field(min_length=1)
    unit_filament_mass_g: float = Field(gt=0)
    model_id: Optional[str] = Field(None, min_length=1, max_length=128)


class OrderRequest(_Body):
    model_id: str
    sale_price: Decimal = Field(ge=0)
    customer_ref: str = ""
    latitude: float = Field(ge=-90, le=90)
    longitude: float = Field(ge=-180, le=180)
    customization: str = ""
    order_id: Optional[str] = Field(None, min_length=1, max_length=128)

    @field_validator("sale_price")
    @classmethod
    def _micro_precision(cls, v: Decimal) -> Decimal:
        if v != v.quantize(Decimal("0.000001")):
            raise ValueError("sale_price has sub-micro-euro precision")
        return v


# Printers -----------------------------------------------------------------------

class PrinterRegistration(_Body):
    profile: dict[str, Any]
    credential: str = Field(min_length=8)


# Billing ------------------------------------------------------------------------

class RedeemCodeRequest(_Body):
    """``percent`` is a percentage (10 means 10 %); ``fixed`` is euros off."""

    percent: Optional[Decimal] = None
    fixed: Optional[Decimal] = None
    expires_at: Optional[float] = None
    ttl_s: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one_discount(self):
        if (self.percent is None) == (self.fixed is None):
            raise ValueError("give exactly one of percent or fixed")
        if (self.expires_at is None) == (self.ttl_s is None):
            raise ValueError("give exactly one of expires_at or ttl_s")
        return self


class RedeemRequest(_Body):
    code: str
    order_id: str


class RedeemResponse(BaseModel):
    code: str
    order_id: str
    price: str
