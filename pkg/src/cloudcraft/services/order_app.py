from __future__ import annotations

from fastapi import Depends, FastAPI, Query

from cloudcraft.auth import Action
from cloudcraft.domain import GeoPoint, Money
from cloudcraft.fulfillment import Fulfillment
from cloudcraft.services.common import Caller, caller, install_error_handlers
from cloudcraft.services.schemas import ModelUpload, OrderRequest


def _order_doc(order) -> dict:
    doc = order.to_doc()
    doc["sale_price"] = order.sale_price.format()
    return doc


def create_order_app(fulfillment: Fulfillment) -> FastAPI:
    app = FastAPI(title="order")
    install_error_handlers(app, "order")

    @app.post("/models", status_code=201)
    def upload_model(req: ModelUpload, who: Caller = Depends(caller)) -> dict:
        who.require(Action.UPLOAD_MODEL)
        model = fulfillment.upload_model(
            who.user_id,
            req.display_name,
            req.payload.encode("utf-8"),
            req.required_material,
            req.unit_filament_mass_g,
            model_id=req.model_id,
        )
        return model.to_doc()

    @app.post("/orders", status_code=201)
    def create_order(req: OrderRequest, who: Caller = Depends(caller)) -> dict:
        who.require(Action.CREATE_ORDER)
        order = fulfillment.place_order(
            who.user_id,
            req.model_id,
            Money.eur(str(req.sale_price)),
            req.customer_ref,
            GeoPoint(req.latitude, req.longitude),
            order_id=req.order_id,
            customization=req.customization,
        )
        return _order_doc(order)

    @app.get("/orders/{order_id}")
    def get_order(order_id: str, who: Caller = Depends(caller)) -> dict:
        who.require(Action.READ_ORDER)
        return _order_doc(fulfillment.get_order(order_id))

    @app.get("/orders")
    def list_orders(prefix: str = Query(""), who: Caller = Depends(caller)) -> dict:
        who.require(Action.READ_ORDER)
        return {"orders": [_order_doc(o) for o in fulfillment.orders(prefix)]}

    return app
