"""Party state machines and the message fabric between them.

A party holds named values in insertion-ordered memory and may run dynamic
procedures: transient scopes whose bindings never touch memory, are
invisible to knowledge snapshots, and are erased when the scope terminates.

Messages travel through a single in-process transport that records every
transmission (the wiretap transcript) and can encode any message to a
versioned length-prefixed binary record.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .backend import CryptoBackend
from .terms import Term

WIRE_VERSION = 1

MESSAGE_TYPES = {
    "share_public_key": 1,
    "square_payload": 2,
    "handover": 3,
    "approve": 4,
    "request_private_key": 5,
    "private_key": 6,
    "challenge": 7,
    "challenge_reply": 8,
    "hash_share": 9,
    "transfer_notice": 10,
    "redeem_request": 11,
    "redeem_payload": 12,
    "take_request": 13,
    "take_payload": 14,
}


class TransportFailure(Exception):
    pass


class ProtocolTimeout(Exception):
    pass


class DynamicProcedure:
    """Transient scope; bindings live only until termination."""

    def __init__(self, owner: "Party") -> None:
        self.owner = owner
        self.bindings: dict[str, object] = {}
        self.active = True
        # display name of a slot this procedure just filled, shown as the
        # "-- [x]" hand-off in the next emitted table and then cleared
        self.pending_insert: str | None = None

    def bind(self, name: str, value: object) -> None:
        assert self.active, "cannot bind inside a terminated scope"
        self.bindings[name] = value

    def get(self, name: str) -> object:
        return self.bindings[name]

    def terminate(self) -> None:
        self.bindings.clear()
        self.active = False
        if self in self.owner.procedures:
            self.owner.procedures.remove(self)


class Party:
    def __init__(self, name: str, role: str) -> None:
        self.name = name
        self.role = role  # "user" or "server"
        self.memory: dict[str, object] = {}
        self.procedures: list[DynamicProcedure] = []
        # harness switch: a silent party never answers requests, which is
        # how timeouts are injected
        self.silent = False

    def remember(self, name: str, value: object) -> None:
        self.memory[name] = value

    def recall(self, name: str) -> object:
        return self.memory[name]

    def knows(self, name: str) -> bool:
        return name in self.memory

    def open_procedure(self) -> DynamicProcedure:
        proc = DynamicProcedure(self)
        self.procedures.append(proc)
        return proc

    def snapshot(self) -> frozenset[Term]:
        """Knowledge visible to the attacker oracle: memory only.

        Dynamic-procedure bindings are deliberately absent; a snapshot taken
        mid-procedure must not see them.
        """
        from .backend import term_of

        return frozenset(term_of(v) for v in self.memory.values())


@dataclass(frozen=True)
class Message:
    msg_type: str
    sender: str
    receiver: str
    session_id: int
    payload: tuple

    @property
    def channel(self) -> str:
        roles = {self.sender, self.receiver}
        return "user-user" if "SERVER_S" not in roles else "user-server"


@dataclass
class Transport:
    """Synchronous delivery with a full transcript."""

    transcript: list[Message] = field(default_factory=list)
    fail_next: bool = False

    def send(self, msg: Message) -> Message:
        if self.fail_next:
            self.fail_next = False
            raise TransportFailure(f"link dropped while sending {msg.msg_type}")
        self.transcript.append(msg)
        return msg

    def encode(self, backend: CryptoBackend, msg: Message) -> bytes:
        body = b"".join(
            len(part).to_bytes(4, "big") + part
            for part in (backend.export_bytes(v) for v in msg.payload)
        )
        record = (
            bytes([WIRE_VERSION, MESSAGE_TYPES[msg.msg_type]])
            + msg.session_id.to_bytes(8, "big")
            + len(body).to_bytes(4, "big")
            + body
        )
        return len(record).to_bytes(4, "big") + record


def decode_frame(data: bytes) -> tuple[int, int, int, list[bytes]]:
    """Inverse of Transport.encode for one frame: (version, type, session, parts)."""
    record_len = int.from_bytes(data[:4], "big")
    record = data[4 : 4 + record_len]
    version, type_tag = record[0], record[1]
    session_id = int.from_bytes(record[2:10], "big")
    body = record[14 : 14 + int.from_bytes(record[10:14], "big")]
    parts = []
    i = 0
    while i < len(body):
        n = int.from_bytes(body[i : i + 4], "big")
        parts.append(body[i + 4 : i + 4 + n])
        i += 4 + n
    return version, type_tag, session_id, parts
