"""Single-process deployment: store, core services, registry and both gateways."""
from __future__ import annotations

import asyncio
import errno
import logging
import socket
from typing import Callable

import uvicorn

from cloudcraft.auth import AuthService, Role
from cloudcraft.billing import Billing, BillingUnavailable
from cloudcraft.config import Config
from cloudcraft.control_plane.api_gateway import ApiGateway
from cloudcraft.control_plane.cloud_gateway import CloudGateway
from cloudcraft.control_plane.registry import NoLiveInstance, ServiceRegistry
from cloudcraft.domain import Clock, Store, SystemClock
from cloudcraft.errors import CloudCraftError
from cloudcraft.fulfillment import Fulfillment
from cloudcraft.services import create_auth_app, create_billing_app, create_order_app, create_printer_app

log = logging.getLogger(__name__)

SERVICES = ("auth", "order", "printer", "billing")


class PortInUse(CloudCraftError):
    def __init__(self, component: str, host: str, port: int):
        self.component = component
        super().__init__(f"{component}: {host}:{port} is already in use")


def bind(component: str, host: str, port: int) -> socket.socket:
    """Listening TCP socket, or ``PortInUse`` naming ``component``."""
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(128)
    except OSError as exc:
        sock.close()
        if exc.errno in (errno.EADDRINUSE, errno.EACCES):
            raise PortInUse(component, host, port) from None
        raise
    sock.setblocking(False)
    return sock


class DiscoveredSettler:
    """Settles through whichever billing instance discovery hands out.

    Instances run in this process, so the call itself is direct; what goes
    through the registry is the choice of instance and the liveness check.
    """

    def __init__(self, registry: ServiceRegistry, instances: dict[str, Billing]):
        self.registry = registry
        self.instances = instances

    def settle_order(self, *args, **kwargs):
        try:
            endpoint = self.registry.resolve("billing")
        except NoLiveInstance as exc:
            raise BillingUnavailable(str(exc)) from None
        return self.instances[endpoint].settle_order(*args, **kwargs)


class Platform:
    def __init__(self, config: Config, *, store: Store | None = None, clock: Clock | None = None):
        self.config = config
        self.clock = clock or SystemClock()
        self.store = store or Store(config.get("platform", "store"))
        self.auth = AuthService(
            self.store,
            config.get("auth", "signing_key"),
            self.clock,
            token_lifetime_s=config.number("auth", "token_lifetime_s"),
            hash_iterations=int(config.number("auth", "hash_iterations", integer=True)),
        )
        self.billing = Billing(
            self.store,
            self.clock,
            tariff=config.tariff,
            fixed=config.fixed_costs,
            weights=config.weights,
            platform_operator_id=config.get("platform", "operator_id"),
            mode=config.mode,
        )
        self.registry = ServiceRegistry(self.clock)
        instances = int(config.number("services", "instances", integer=True))
        self.fulfillment = Fulfillment(
            self.store,
            self.clock,
            settler=DiscoveredSettler(self.registry, {f"asgi://billing-{i + 1}": self.billing for i in range(instances)}),
            hash_iterations=int(config.number("auth", "hash_iterations", integer=True)),
        )
        self.cloud = CloudGateway(self.fulfillment, self.clock, agent_ttl_s=config.number("cloud_gateway", "agent_ttl_s"))
        self.fulfillment.link = self.cloud
        self.fulfillment.recover()

        self.api = ApiGateway(self.registry)
        self.ttl_s = config.number("discovery", "ttl_s")
        interval = config.get("discovery", "heartbeat_interval_s")
        self.heartbeat_s = float(interval) if interval else self.ttl_s / 3
        apps = {
            "auth": create_auth_app(self.auth),
            "order": create_order_app(self.fulfillment),
            "printer": create_printer_app(self.fulfillment),
            "billing": create_billing_app(self.billing),
        }
        self.instances: list[tuple[str, str]] = []
        for name in SERVICES:
            for i in range(instances):
                instance = f"{name}-{i + 1}"
                self.api.mount(f"asgi://{instance}", apps[name])
                self.instances.append((name, instance))
        self._bootstrap_operator()
        self._tasks: list[asyncio.Task] = []
        self._http: uvicorn.Server | None = None
        self.api_address: tuple[str, int] | None = None
        self.cloud_address: tuple[str, int] | None = None

    def _bootstrap_operator(self) -> None:
        credential = self.config.get("auth", "platform_credential")
        operator = self.config.get("platform", "operator_id")
        if credential and self.auth.get_user(operator) is None:
            self.auth.register_user(operator, str(credential), Role.PLATFORM_OPERATOR)

    def register_services(self) -> None:
        for name, instance in self.instances:
            self.registry.register(name, instance, f"asgi://{instance}", self.ttl_s)

    async def _heartbeats(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_s)
            for name, instance in self.instances:
                self.registry.heartbeat(name, instance)

    async def _retry_settlements(self) -> None:
        period = self.config.number("platform", "settlement_retry_s", positive=True, allow_zero=False)
        while True:
            await asyncio.sleep(period)
            if self.fulfillment.pending_settlements:
                done = await asyncio.to_thread(self.fulfillment.retry_settlements)
                if done:
                    log.info("settled %d deferred orders", len(done))

    async def start(
        self,
        *,
        api_port: int | None = None,
        cloud_port: int | None = None,
        announce: Callable[[str], None] = print,
    ) -> None:
        """Bind both gateways and start background tasks; returns once listening."""
        api_host = self.config.get("api_gateway", "host")
        cloud_host = self.config.get("cloud_gateway", "host")
        api_sock = bind("api_gateway", api_host, self.config.get("api_gateway", "port") if api_port is None else api_port)
        try:
            cloud_sock = bind(
                "cloud_gateway", cloud_host, self.config.get("cloud_gateway", "port") if cloud_port is None else cloud_port
            )
        except PortInUse:
            api_sock.close()
            raise
        self.api_address = api_sock.getsockname()[:2]
        self.cloud_address = cloud_sock.getsockname()[:2]

        announce("ready: registry")
        self.register_services()
        for name, instance in self.instances:
            announce(f"ready: {name} ({instance})")
        await self.cloud.start(sock=cloud_sock)
        announce(f"ready: cloud_gateway {self.cloud_address[0]}:{self.cloud_address[1]}")

        level = str(self.config.get("platform", "log_level", default="INFO")).lower()
        server_config = uvicorn.Config(
            self.api.app, lifespan="off", log_level=level, log_config=None, access_log=False
        )
        self._http = uvicorn.Server(server_config)
        self._tasks = [
            asyncio.create_task(self._http.serve(sockets=[api_sock])),
            asyncio.create_task(self._heartbeats()),
            asyncio.create_task(self._retry_settlements()),
        ]
        while not self._http.started:
            if self._tasks[0].done():
                self._tasks[0].result()
            await asyncio.sleep(0.01)
        announce(f"ready: api_gateway http://{self.api_address[0]}:{self.api_address[1]}")

    @property
    def api_url(self) -> str:
        host, port = self.api_address
        return f"http://{host}:{port}"

    @property
    def cloud_url(self) -> str:
        host, port = self.cloud_address
        return f"{host}:{port}"

    async def stop(self) -> None:
        if self._http is not None:
            self._http.should_exit = True
        for task in self._tasks[1:]:
            task.cancel()
        await self.cloud.stop()
        if self._tasks:
            try:
                await asyncio.wait_for(self._tasks[0], 5)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                pass
        await self.api.aclose()

    async def serve_forever(self, **kwargs) -> None:
        await self.start(**kwargs)
        try:
            await self._tasks[0]
        finally:
            await self.stop()
