"""HTTP services behind the API gateway.

Each service trusts the identity headers the gateway injects after it has
validated the bearer token, so these apps must only be reachable through it.
"""
from cloudcraft.services.auth_app import create_auth_app
from cloudcraft.services.billing_app import create_billing_app
from cloudcraft.services.order_app import create_order_app
from cloudcraft.services.printer_app import create_printer_app

__all__ = ["create_auth_app", "create_billing_app", "create_order_app", "create_printer_app"]
