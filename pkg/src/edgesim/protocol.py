"""Event-based push-pull wire protocol between manager, clients, and edge.

Framing is deliberately simple: one UTF-8 JSON object per line, terminated
by LF, over TCP. Every frame carries exactly the fields ``type``, ``tick``,
``sender_id``, ``payload``. Generic events (tick commands, completions) are
pushed; bulky or per-process payloads (waypoint buffers, observations) are
pulled on demand. Numbers serialize with full round-trip precision so
determinism checks can diff logs textually.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, field
from typing import Optional

from .core import Control, ControlSource, VehicleState, Waypoint, WaypointBuffer

DEFAULT_PORT = 2000

# Envelope types
REGISTER = "REGISTER"
REGISTER_ACK = "REGISTER_ACK"
TICK_CMD = "TICK_CMD"
CLIENT_DONE = "CLIENT_DONE"
PULL_REQUEST = "PULL_REQUEST"
PULL_REPLY = "PULL_REPLY"
END = "END"
ERROR = "ERROR"

ENVELOPE_TYPES = frozenset({
    REGISTER, REGISTER_ACK, TICK_CMD, CLIENT_DONE,
    PULL_REQUEST, PULL_REPLY, END, ERROR,
})

# TICK_CMD payload commands
CMD_TICK = "TICK"
CMD_PULL_WAYPOINTS_AND_TICK = "PULL_WAYPOINTS_AND_TICK"
CMD_END = "END"
TICK_COMMANDS = frozenset({CMD_TICK, CMD_PULL_WAYPOINTS_AND_TICK, CMD_END})

# Pull kinds
KIND_WAYPOINTS = "waypoints"
KIND_OBSERVATION = "obs"
KIND_STATE = "state"
PULL_KINDS = frozenset({KIND_WAYPOINTS, KIND_OBSERVATION})


class ProtocolError(RuntimeError):
    """Contract violation on an otherwise well-formed stream."""


class DecodeError(ProtocolError):
    """Malformed frame; carries the offending line."""

    def __init__(self, message: str, line: str = ""):
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Envelope:
    type: str
    tick: int = 0
    sender_id: int = 0
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in ENVELOPE_TYPES:
            raise ProtocolError(f"unknown envelope type {self.type!r}")
        if self.type == TICK_CMD:
            command = self.payload.get("command")
            if command not in TICK_COMMANDS:
                raise ProtocolError(f"invalid TICK_CMD command {command!r}")


def encode(envelope: Envelope) -> bytes:
    """One LF-terminated UTF-8 JSON line per envelope."""
    obj = {
        "type": envelope.type,
        "tick": envelope.tick,
        "sender_id": envelope.sender_id,
        "payload": envelope.payload,
    }
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def decode(frame) -> Envelope:
    """Inverse of encode(); raises DecodeError on malformed input."""
    if isinstance(frame, bytes):
        frame = frame.decode("utf-8", errors="replace")
    line = frame.rstrip("\n")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"invalid frame: {exc}", line=line) from exc
    if not isinstance(obj, dict) or "type" not in obj:
        raise DecodeError("frame is not an envelope object", line=line)
    mtype = obj["type"]
    if mtype not in ENVELOPE_TYPES:
        raise DecodeError(f"unknown envelope type {mtype!r} (protocol version?)", line=line)
    try:
        return Envelope(
            type=mtype,
            tick=int(obj.get("tick", 0)),
            sender_id=int(obj.get("sender_id", 0)),
            payload=obj.get("payload", {}) or {},
        )
    except (TypeError, ValueError, ProtocolError) as exc:
        raise DecodeError(f"invalid envelope fields: {exc}", line=line) from exc


# ---------------------------------------------------------------------------
# Domain payload codecs. Floats pass through json.dumps/loads, which preserves
# IEEE doubles exactly (shortest round-trip repr).

def control_to_dict(control: Control) -> dict:
    return {"dv": control.dv, "dlane": control.dlane, "source": control.source.value}


def control_from_dict(obj: dict) -> Control:
    return Control(int(obj["dv"]), int(obj["dlane"]), ControlSource(obj["source"]))


def state_to_dict(state: VehicleState) -> dict:
    return {
        "id": state.id, "lane": state.lane, "s": state.s,
        "v": state.v, "v_target": state.v_target, "done": state.done,
    }


def state_from_dict(obj: dict) -> VehicleState:
    return VehicleState(
        id=int(obj["id"]), lane=int(obj["lane"]), s=float(obj["s"]),
        v=float(obj["v"]), v_target=float(obj["v_target"]), done=bool(obj["done"]),
    )


def waypoint_to_list(wp: Waypoint) -> list:
    return [wp.x, wp.y, wp.z, wp.yaw, wp.pitch, wp.roll]


def waypoint_from_list(vals) -> Waypoint:
    x, y, z, yaw, pitch, roll = (float(v) for v in vals)
    return Waypoint(x, y, z, yaw, pitch, roll)


def buffer_to_dict(buf: WaypointBuffer) -> dict:
    return {
        "vehicle_id": buf.vehicle_id,
        "generation_tick": buf.generation_tick,
        "delivery_tick": buf.delivery_tick,
        "skip_steps": buf.skip_steps,
        "points": [waypoint_to_list(p) for p in buf.points],
        "planned_speeds": list(buf.planned_speeds),
    }


def buffer_from_dict(obj: dict) -> WaypointBuffer:
    return WaypointBuffer(
        vehicle_id=int(obj["vehicle_id"]),
        generation_tick=int(obj["generation_tick"]),
        delivery_tick=int(obj["delivery_tick"]),
        skip_steps=int(obj["skip_steps"]),
        points=tuple(waypoint_from_list(p) for p in obj["points"]),
        planned_speeds=tuple(float(v) for v in obj["planned_speeds"]),
    )


# ---------------------------------------------------------------------------
# Connection: newline-framed envelope stream over a socket. One reader and
# one writer may operate concurrently; writes are serialized by a lock.

class Connection:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._rfile = sock.makefile("rb")
        self._wlock = threading.Lock()
        self._closed = False

    def send(self, envelope: Envelope) -> None:
        data = encode(envelope)
        with self._wlock:
            self._sock.sendall(data)

    def recv(self) -> Optional[Envelope]:
        """Next envelope, or None on clean EOF.

        A line truncated by EOF (no trailing LF) is a framing violation.
        """
        line = self._rfile.readline()
        if line == b"":
            return None
        if not line.endswith(b"\n"):
            raise DecodeError("truncated frame (EOF before newline)",
                              line=line.decode("utf-8", errors="replace"))
        return decode(line)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        # Shutdown first: it unblocks a reader parked in readline(), whose
        # buffered-IO lock would otherwise deadlock the close call.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._rfile.close()
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


@dataclass
class BroadcastResult:
    delivered: list
    disconnected: list


def broadcast(envelope: Envelope, peers: dict) -> BroadcastResult:
    """Push an event to every registered peer connection.

    Does not wait for application-level replies. Dead connections are
    reported, not raised; the manager decides whether to abort or continue.
    """
    result = BroadcastResult([], [])
    for peer_id in sorted(peers):
        try:
            peers[peer_id].send(envelope)
            result.delivered.append(peer_id)
        except OSError:
            result.disconnected.append(peer_id)
    return result
