from __future__ import annotations

from fastapi import Depends, FastAPI, Query
from fastapi.responses import PlainTextResponse

from cloudcraft.auth import Action
from cloudcraft.billing import Billing
from cloudcraft.domain import Money
from cloudcraft.errors import NotFound
from cloudcraft.services.common import Caller, caller, install_error_handlers
from cloudcraft.services.schemas import RedeemCodeRequest, RedeemRequest, RedeemResponse


def _ledger(billing: Billing, stakeholder_id: str | None, fmt: str):
    if fmt == "csv":
        return PlainTextResponse(billing.export_csv(stakeholder_id), media_type="text/csv")
    entries = billing.ledger_entries(stakeholder_id)
    body = {"entries": [e.to_doc() for e in entries]}
    if stakeholder_id is not None:
        body["stakeholder_id"] = stakeholder_id
        body["balance"] = sum((e.amount for e in entries), Money.zero()).format()
    return body


def create_billing_app(billing: Billing) -> FastAPI:
    app = FastAPI(title="billing")
    install_error_handlers(app, "billing")

    @app.post("/billing/redeem-codes", status_code=201)
    def create_code(req: RedeemCodeRequest, who: Caller = Depends(caller)) -> dict:
        who.require(Action.MANAGE_CODES)
        expires = req.expires_at if req.expires_at is not None else billing.clock.now() + req.ttl_s
        rc = billing.create_redeem_code(
            percent=req.percent / 100 if req.percent is not None else None,
            fixed=Money.eur(str(req.fixed)) if req.fixed is not None else None,
            expires_at=expires,
        )
        return rc.to_doc()

    @app.post("/billing/redeem", response_model=RedeemResponse)
    def redeem(req: RedeemRequest, who: Caller = Depends(caller)) -> RedeemResponse:
        who.require(Action.MANAGE_CODES)
        price = billing.redeem(req.code, req.order_id)
        return RedeemResponse(code=req.code, order_id=req.order_id, price=price.format())

    @app.get("/billing/ledger")
    def full_ledger(format: str = Query("json", pattern="^(json|csv)$"), who: Caller = Depends(caller)):
        who.require(Action.READ_LEDGER)
        return _ledger(billing, None, format)

    @app.get("/billing/ledger/{stakeholder_id}")
    def stakeholder_ledger(
        stakeholder_id: str, format: str = Query("json", pattern="^(json|csv)$"), who: Caller = Depends(caller)
    ):
        who.require(Action.READ_LEDGER, own=stakeholder_id == who.user_id)
        return _ledger(billing, stakeholder_id, format)

    @app.get("/billing/transactions/{order_id}")
    def transaction(order_id: str, who: Caller = Depends(caller)) -> dict:
        who.require(Action.READ_ORDER)
        txn = billing.find_transaction(order_id)
        if txn is None:
            raise NotFound(f"order {order_id!r} has not been settled")
        return txn.to_doc()

    return app
