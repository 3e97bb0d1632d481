"""Program states and the messages exchanged between firmware and coprocessor."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .simcore import SimTime


class ProgramState(str, Enum):
    IDLE = "IDLE"
    RF_ACCESS = "RF_ACCESS"
    COMPUTE_BASAL = "COMPUTE_BASAL"
    COMPUTE_BOLUS = "COMPUTE_BOLUS"
    INFUSE_INSULIN = "INFUSE_INSULIN"
    ALERT = "ALERT"


S = ProgramState

DEFAULT_EDGES: frozenset[tuple[ProgramState, ProgramState]] = frozenset(
    {
        (S.IDLE, S.RF_ACCESS),
        (S.IDLE, S.COMPUTE_BASAL),
        (S.RF_ACCESS, S.COMPUTE_BOLUS),
        (S.RF_ACCESS, S.IDLE),
        (S.COMPUTE_BASAL, S.INFUSE_INSULIN),
        (S.COMPUTE_BASAL, S.IDLE),
        (S.COMPUTE_BOLUS, S.INFUSE_INSULIN),
        (S.INFUSE_INSULIN, S.IDLE),
        (S.ALERT, S.IDLE),
    }
    | {(s, S.ALERT) for s in ProgramState if s is not S.ALERT}
)


# 16-bit amount field in the command frame
AMOUNT_FIELD_MAX = 0xFFFF


class Mode(str, Enum):
    BASAL = "BASAL"
    BOLUS = "BOLUS"


@dataclass(frozen=True)
class MessageSizes:
    """Frame lengths in bytes on the inter-microcontroller link."""

    transition: int = 8
    command: int = 240
    heartbeat: int = 4
    notice: int = 8


# IMC messages.  ``length`` is the frame size; snooped observations never
# travel on the link and carry length 0.


@dataclass(frozen=True)
class StateTransition:
    from_state: ProgramState
    to_state: ProgramState
    sent_at: SimTime = 0
    length: int = 8
    kind = "STATE_TRANSITION"


@dataclass(frozen=True)
class ActuatorCmd:
    """Pump command.

    ``amount`` is in pump units: a dose for BOLUS, a rate per hour for BASAL.
    """

    device: str
    amount: int
    mode: Mode
    cmd_id: int
    sent_at: SimTime = 0
    length: int = 240
    kind = "ACTUATOR_CMD"

    def __post_init__(self) -> None:
        if not isinstance(self.amount, int) or not 0 <= self.amount <= AMOUNT_FIELD_MAX:
            raise ValueError(f"actuator amount must be an integer in [0, {AMOUNT_FIELD_MAX}]")


@dataclass(frozen=True)
class Heartbeat:
    seq: int
    sent_at: SimTime = 0
    length: int = 4
    kind = "HEARTBEAT"


@dataclass(frozen=True)
class SensorSnoop:
    """Bus traffic observed directly by the coprocessor (CGM reading or RF read)."""

    device: str
    bg_reading: float | None = None
    sent_at: SimTime = 0
    length: int = 0
    kind = "SENSOR_SNOOP"


@dataclass(frozen=True)
class BlockNotice:
    """Coprocessor -> firmware: a command was dropped."""

    cmd_id: int
    rule_id: str
    sent_at: SimTime = 0
    length: int = 8
    kind = "BLOCK_NOTICE"


ImcMessage = StateTransition | ActuatorCmd | Heartbeat | SensorSnoop
