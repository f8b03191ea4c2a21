"""Order settlement, the stakeholder profit ledger and promotional redeem codes."""
from __future__ import annotations

import csv
import io
import logging
import secrets
import threading
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Mapping

from cloudcraft import costmodel as cm
from cloudcraft.costmodel import CostBreakdown, EnergyTariff, FixedCosts, ProfitAllocation, RoundingMode, ShareRole, ShareWeights
from cloudcraft.domain import Clock, Namespace, Order, OrderState, Store, SystemClock, VersionConflict
from cloudcraft.domain.models import FilamentSpec, JobMetrics
from cloudcraft.domain.money import MICRO, Money, to_fraction
from cloudcraft.domain.store import Write
from cloudcraft.errors import CloudCraftError, Conflict, NotFound, Unavailable

log = logging.getLogger(__name__)

CODE_ALPHABET = "23456789ABCDEFGHJKLMNPQRSTUVWXYZ"
CODE_LENGTH = 12


class AlreadySettled(Conflict):
    def __init__(self, transaction: Transaction):
        self.transaction = transaction
        super().__init__(f"order {transaction.order_id} is already settled")


class InvalidState(Conflict):
    pass


class BillingUnavailable(Unavailable):
    pass


class BadDiscount(CloudCraftError):
    pass


class UnknownCode(NotFound):
    pass


class AlreadyRedeemed(Conflict):
    pass


class Expired(Conflict):
    pass


class CodeState(str, Enum):
    ACTIVE = "Active"
    REDEEMED = "Redeemed"
    EXPIRED = "Expired"


@dataclass(frozen=True)
class LedgerEntry:
    entry_id: str
    stakeholder_role: ShareRole
    stakeholder_id: str
    amount: Money
    txn_id: str

    def to_doc(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "stakeholder_role": self.stakeholder_role.value,
            "stakeholder_id": self.stakeholder_id,
            "amount": self.amount.format(),
            "txn_id": self.txn_id,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> LedgerEntry:
        return cls(
            doc["entry_id"], ShareRole(doc["stakeholder_role"]), doc["stakeholder_id"], Money.eur(doc["amount"]), doc["txn_id"]
        )


@dataclass(frozen=True)
class Transaction:
    txn_id: str
    order_id: str
    revenue: Money
    breakdown: CostBreakdown
    allocation: ProfitAllocation
    settled_at: float
    printer_id: str | None = None
    sale_price: Money | None = None
    discount: Money = Money.zero()

    def to_doc(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "order_id": self.order_id,
            "revenue": self.revenue.format(),
            "breakdown": self.breakdown.to_doc(),
            "allocation": self.allocation.to_doc(),
            "settled_at": self.settled_at,
            "printer_id": self.printer_id,
            "sale_price": self.sale_price.format() if self.sale_price is not None else None,
            "discount": self.discount.format(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> Transaction:
        return cls(
            txn_id=doc["txn_id"],
            order_id=doc["order_id"],
            revenue=Money.eur(doc["revenue"]),
            breakdown=CostBreakdown.from_doc(doc["breakdown"]),
            allocation=ProfitAllocation.from_doc(doc["allocation"]),
            settled_at=float(doc["settled_at"]),
            printer_id=doc.get("printer_id"),
            sale_price=Money.eur(doc["sale_price"]) if doc.get("sale_price") is not None else None,
            discount=Money.eur(doc.get("discount", "0")),
        )


@dataclass(frozen=True)
class RedeemCode:
    code: str
    state: CodeState
    expires_at: float
    percent: Fraction | None = None
    fixed: Money | None = None
    order_id: str | None = None

    def discount_on(self, price: Money) -> Money:
        """Amount taken off ``price``; never more than the price itself."""
        if self.percent is not None:
            off = price.scale(self.percent, MICRO)
        else:
            off = self.fixed or Money.zero()
        return min(off, price) if price.micros > 0 else Money.zero()

    def to_doc(self) -> dict:
        return {
            "code": self.code,
            "state": self.state.value,
            "expires_at": self.expires_at,
            "percent": str(self.percent) if self.percent is not None else None,
            "fixed": self.fixed.format() if self.fixed is not None else None,
            "order_id": self.order_id,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> RedeemCode:
        return cls(
            code=doc["code"],
            state=CodeState(doc["state"]),
            expires_at=float(doc["expires_at"]),
            percent=Fraction(doc["percent"]) if doc.get("percent") is not None else None,
            fixed=Money.eur(doc["fixed"]) if doc.get("fixed") is not None else None,
            order_id=doc.get("order_id"),
        )


def _txn_key(order_id: str) -> str:
    return f"txn:{order_id}"


def _redemption_key(order_id: str) -> str:
    return f"redemption:{order_id}"


class Billing:
    def __init__(
        self,
        store: Store,
        clock: Clock | None = None,
        *,
        tariff: EnergyTariff | None = None,
        fixed: FixedCosts | None = None,
        weights: ShareWeights | None = None,
        platform_operator_id: str = "platform",
        mode: RoundingMode = RoundingMode.PAPER,
    ):
        self.store = store
        self.clock = clock or SystemClock()
        self.tariff = tariff or EnergyTariff()
        self.fixed = fixed or FixedCosts()
        self.weights = weights or ShareWeights()
        self.platform_operator_id = platform_operator_id
        self.mode = mode
        # Single sequencer for ledger entry ids; appends are totally ordered.
        self._sequencer = threading.Lock()
        self._next_entry = self._recover_sequence()

    def _recover_sequence(self) -> int:
        entries = self.store.scan_prefix(Namespace.BILLING, "entry:")
        return int(entries[-1][0].split(":")[1]) + 1 if entries else 1

    # Settlement ----------------------------------------------------------

    def find_transaction(self, order_id: str) -> Transaction | None:
        found = self.store.find(Namespace.BILLING, _txn_key(order_id))
        return Transaction.from_doc(found[0]) if found else None

    def transactions(self) -> list[Transaction]:
        return [Transaction.from_doc(doc) for _, doc in self.store.scan_prefix(Namespace.BILLING, "txn:")]

    def discount_for(self, order_id: str) -> Money:
        found = self.store.find(Namespace.BILLING, _redemption_key(order_id))
        return Money.eur(found[0]["discount"]) if found else Money.zero()

    def settle_order(
        self,
        order: Order,
        metrics: JobMetrics,
        filament: FilamentSpec,
        parties: Mapping[ShareRole, str],
    ) -> Transaction:
        """Book one completed order: cost it from measured metrics, split the profit.

        ``parties`` names the stakeholder id for each role other than the
        platform operator, which billing supplies itself.
        """
        existing = self.find_transaction(order.order_id)
        if existing is not None:
            raise AlreadySettled(existing)
        if order.state is not OrderState.COMPLETED:
            raise InvalidState(f"order {order.order_id} is {order.state.value}, not Completed")

        discount = self.discount_for(order.order_id)
        revenue = max(order.sale_price - discount, Money.zero())
        cost = cm.breakdown(
            metrics.filament_g, filament, metrics.phases, self.tariff, self.fixed, self.mode, sale_price=revenue
        )
        profit = revenue - cost.total
        allocation = cm.allocate_shares(profit, self.weights, revenue=revenue, tco=cost.total, quantum=MICRO)
        txn = Transaction(
            txn_id=f"txn-{order.order_id}",
            order_id=order.order_id,
            revenue=revenue,
            breakdown=cost,
            allocation=allocation,
            settled_at=self.clock.now(),
            printer_id=order.assigned_printer,
            sale_price=order.sale_price,
            discount=discount,
        )
        ids = {ShareRole.PLATFORM: self.platform_operator_id, **parties}

        with self._sequencer:
            seq = self._next_entry
            writes = [Write(Namespace.BILLING, _txn_key(order.order_id), txn.to_doc(), expected_version=0)]
            for offset, role in enumerate(ShareRole):
                entry = LedgerEntry(f"e{seq + offset:010d}", role, ids[role], allocation.shares[role], txn.txn_id)
                writes.append(Write(Namespace.BILLING, f"entry:{seq + offset:010d}", entry.to_doc(), expected_version=0))
            try:
                self.store.put_many(writes)
            except VersionConflict:
                raise AlreadySettled(self.find_transaction(order.order_id)) from None
            self._next_entry = seq + len(ShareRole)
        log.info("settled %s: revenue %s total %s profit %s", order.order_id, revenue, cost.total, profit)
        return txn

    # Ledger --------------------------------------------------------------

    def ledger_entries(self, stakeholder_id: str | None = None) -> list[LedgerEntry]:
        entries = [LedgerEntry.from_doc(d) for _, d in self.store.scan_prefix(Namespace.BILLING, "entry:")]
        if stakeholder_id is not None:
            entries = [e for e in entries if e.stakeholder_id == stakeholder_id]
        return entries

    def ledger_balance(self, stakeholder_id: str) -> Money:
        return sum((e.amount for e in self.ledger_entries(stakeholder_id)), Money.zero())

    def balances(self) -> dict[tuple[ShareRole, str], Money]:
        out: dict[tuple[ShareRole, str], Money] = {}
        for e in self.ledger_entries():
            key = (e.stakeholder_role, e.stakeholder_id)
            out[key] = out.get(key, Money.zero()) + e.amount
        return out

    def export_csv(self, stakeholder_id: str | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["entry_id", "txn_id", "role", "stakeholder_id", "amount_eur"])
        for e in self.ledger_entries(stakeholder_id):
            writer.writerow([e.entry_id, e.txn_id, e.stakeholder_role.value, e.stakeholder_id, e.amount.format()])
        return buf.getvalue()

    # Redeem codes ----------------------------------------------------------

    def create_redeem_code(
        self, *, percent=None, fixed: Money | None = None, expires_at: float
    ) -> RedeemCode:
        if (percent is None) == (fixed is None):
            raise BadDiscount("give exactly one of percent or fixed")
        if percent is not None:
            percent = to_fraction(percent)
            if not 0 < percent <= 1:
                raise BadDiscount(f"percentage must be in (0, 1], got {percent}")
        elif fixed.micros < 0:
            raise BadDiscount("fixed discount must not be negative")
        while True:
            code = "".join(secrets.choice(CODE_ALPHABET) for _ in range(CODE_LENGTH))
            rc = RedeemCode(code, CodeState.ACTIVE, float(expires_at), percent=percent, fixed=fixed)
            try:
                self.store.put(Namespace.REDEEM_CODES, code, rc.to_doc(), expected_version=0)
                return rc
            except VersionConflict:
                continue

    def get_code(self, code: str) -> tuple[RedeemCode, int]:
        found = self.store.find(Namespace.REDEEM_CODES, code)
        if found is None:
            raise UnknownCode(f"unknown code {code!r}")
        return RedeemCode.from_doc(found[0]), found[1]

    def redeem(self, code: str, order_id: str) -> Money:
        """Spend ``code`` on ``order_id``; returns the discounted price."""
        rc, version = self.get_code(code)
        if rc.state is CodeState.REDEEMED:
            raise AlreadyRedeemed(f"code {code} was already redeemed")
        if rc.state is CodeState.EXPIRED or self.clock.now() >= rc.expires_at:
            raise Expired(f"code {code} has expired")
        found = self.store.find(Namespace.ORDERS, order_id)
        if found is None:
            raise NotFound(f"unknown order {order_id!r}")
        order = Order.from_doc(found[0])
        if self.find_transaction(order_id) is not None or order.state.terminal:
            raise InvalidState(f"order {order_id} can no longer be discounted")
        discount = rc.discount_on(order.sale_price)
        used = RedeemCode(rc.code, CodeState.REDEEMED, rc.expires_at, rc.percent, rc.fixed, order_id)
        try:
            self.store.put_many(
                [
                    Write(Namespace.REDEEM_CODES, code, used.to_doc(), expected_version=version),
                    Write(
                        Namespace.BILLING,
                        _redemption_key(order_id),
                        {"code": code, "discount": discount.format()},
                        expected_version=0,
                    ),
                ]
            )
        except VersionConflict as exc:
            if exc.namespace == Namespace.REDEEM_CODES.value:
                raise AlreadyRedeemed(f"code {code} was already redeemed") from None
            raise Conflict(f"order {order_id} already has a discount") from None
        return max(order.sale_price - discount, Money.zero())
