from __future__ import annotations

from fastapi import Depends, FastAPI

from cloudcraft.auth import Action
from cloudcraft.domain import PrinterProfile
from cloudcraft.fulfillment import Fulfillment
from cloudcraft.services.common import Caller, caller, install_error_handlers
from cloudcraft.services.schemas import PrinterRegistration


def create_printer_app(fulfillment: Fulfillment) -> FastAPI:
    app = FastAPI(title="printer")
    install_error_handlers(app, "printer")

    @app.post("/printers", status_code=201)
    def register_printer(req: PrinterRegistration, who: Caller = Depends(caller)) -> dict:
        who.require(Action.REGISTER_PRINTER)
        try:
            profile = PrinterProfile.from_doc(req.profile)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad printer profile: missing or malformed {exc}") from None
        return fulfillment.register_printer(profile, who.user_id, req.credential).to_doc()

    # Fleet status is not tied to a matrix action: any authenticated caller may see it.
    @app.get("/printers")
    def list_printers(who: Caller = Depends(caller)) -> dict:
        return {"printers": [s.to_doc() for s in fulfillment.printers()]}

    @app.get("/printers/{printer_id}")
    def get_printer(printer_id: str, who: Caller = Depends(caller)) -> dict:
        return fulfillment.printer_status(printer_id).to_doc()

    return app
