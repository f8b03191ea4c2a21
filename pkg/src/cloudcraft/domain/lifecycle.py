from enum import Enum

from cloudcraft.errors import Conflict


class OrderState(str, Enum):
    CREATED = "Created"
    ROUTED = "Routed"
    QUEUED = "Queued"
    PRINTING = "Printing"
    COMPLETED = "Completed"
    BILLED = "Billed"
    FAILED = "Failed"
    CANCELLED = "Cancelled"

    @property
    def terminal(self) -> bool:
        return self in (OrderState.BILLED, OrderState.FAILED, OrderState.CANCELLED)


class OrderEvent(str, Enum):
    ROUTE = "route"
    ENQUEUE = "enqueue"
    START_PRINT = "start_print"
    FINISH_PRINT = "finish_print"
    BILL = "bill"
    CANCEL = "cancel"
    FAIL = "fail"


S, E = OrderState, OrderEvent

EDGES: dict[tuple[OrderState, OrderEvent], OrderState] = {
    (S.CREATED, E.ROUTE): S.ROUTED,
    (S.ROUTED, E.ENQUEUE): S.QUEUED,
    (S.QUEUED, E.START_PRINT): S.PRINTING,
    (S.PRINTING, E.FINISH_PRINT): S.COMPLETED,
    (S.COMPLETED, E.BILL): S.BILLED,
    (S.CREATED, E.CANCEL): S.CANCELLED,
    (S.ROUTED, E.CANCEL): S.CANCELLED,
    (S.QUEUED, E.CANCEL): S.CANCELLED,
    (S.QUEUED, E.FAIL): S.FAILED,
    (S.PRINTING, E.FAIL): S.FAILED,
}

del S, E

# States whose orders may carry a non-empty phase log.
PHASE_LOG_STATES = frozenset(
    {OrderState.PRINTING, OrderState.COMPLETED, OrderState.BILLED, OrderState.FAILED}
)


class IllegalTransition(Conflict):
    def __init__(self, state: OrderState, event: OrderEvent):
        self.state = state
        self.event = event
        super().__init__(f"no transition from {state.value} on {event.value}")


def transition(state: OrderState, event: OrderEvent) -> OrderState:
    try:
        return EDGES[(OrderState(state), OrderEvent(event))]
    except KeyError:
        raise IllegalTransition(OrderState(state), OrderEvent(event)) from None
