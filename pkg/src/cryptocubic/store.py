"""Self-destructive storage.

Slots hold at most one value.  Reading is destructive: ``take`` removes the
value and hands back a single-use permit that allows the same value (checked
by digest) to be put back once, which is the abort path.  Writes require a
source capability scoped to specific slots.  Presence can be probed without
side effects via ``ping``.

All mutations are serialized under one lock, so concurrent callers observe
take/insert as atomic.  An optional journal appends a length-prefixed binary
record per mutation for deterministic replay.
"""
from __future__ import annotations

import hashlib
import secrets
import threading
from dataclasses import dataclass


class StoreError(Exception):
    pass


class UnknownSlot(StoreError):
    pass


class SlotEmpty(StoreError):
    pass


class SlotFull(StoreError):
    pass


class SlotIdTaken(StoreError):
    pass


class Unauthorized(StoreError):
    pass


class PermitUsed(StoreError):
    pass


class ValueMismatch(StoreError):
    pass


OP_GRANT = 1
OP_INSERT = 2
OP_TAKE = 3
OP_REINSERT = 4

_OP_NAMES = {OP_GRANT: "grant", OP_INSERT: "insert", OP_TAKE: "take", OP_REINSERT: "reinsert"}


@dataclass(frozen=True)
class SourceCapability:
    """Unforgeable write permission for a fixed set of slot ids."""

    cap_id: str
    scope: frozenset[str]


@dataclass
class ReinsertPermit:
    """Single-use right to put the taken value back into its slot."""

    slot_id: str
    value_digest: bytes
    used: bool = False


@dataclass
class _Slot:
    value: object | None = None
    digest: bytes | None = None
    takes: int = 0
    reinserts: int = 0


@dataclass(frozen=True)
class JournalRecord:
    seq: int
    op: int
    slot_id: str
    value_digest: bytes

    @property
    def op_name(self) -> str:
        return _OP_NAMES[self.op]


def _default_digest(value: object) -> bytes:
    fp = getattr(value, "term", None)
    data = repr(fp).encode() if fp is not None else repr(value).encode()
    if isinstance(value, (bytes, bytearray)):
        data = bytes(value)
    return hashlib.sha256(data).digest()


class DestructiveStore:
    """Pingable, capability-gated, destructively-read slot storage."""

    def __init__(self, digest_fn=None, journal_path=None) -> None:
        self._slots: dict[str, _Slot] = {}
        self._caps: dict[str, SourceCapability] = {}
        self._digest = digest_fn or _default_digest
        self._lock = threading.Lock()
        self._seq = 0
        self._journal_path = journal_path
        self._journal_fh = open(journal_path, "ab") if journal_path else None

    # -- capability management -------------------------------------------

    def grant_source(self, slot_ids) -> SourceCapability:
        with self._lock:
            ids = list(slot_ids)
            for slot_id in ids:
                if slot_id in self._slots:
                    raise SlotIdTaken(f"slot {slot_id!r} already exists")
            cap = SourceCapability(secrets.token_hex(16), frozenset(ids))
            for slot_id in ids:
                self._slots[slot_id] = _Slot()
                self._journal(OP_GRANT, slot_id, b"\x00" * 32)
            self._caps[cap.cap_id] = cap
            return cap

    def _authorize(self, cap: SourceCapability, slot_id: str) -> None:
        known = self._caps.get(getattr(cap, "cap_id", None))
        if known is None or known is not cap:
            raise Unauthorized("capability not issued by this store")
        if slot_id not in cap.scope:
            raise Unauthorized(f"capability does not cover slot {slot_id!r}")

    # -- slot operations -------------------------------------------------

    def ping(self, slot_id: str) -> bool:
        with self._lock:
            slot = self._slots.get(slot_id)
            if slot is None:
                raise UnknownSlot(f"no slot {slot_id!r}")
            return slot.value is not None

    def insert(self, cap: SourceCapability, slot_id: str, value: object) -> None:
        with self._lock:
            self._authorize(cap, slot_id)
            slot = self._slots[slot_id]
            if slot.value is not None:
                raise SlotFull(f"slot {slot_id!r} is occupied")
            digest = self._digest(value)
            slot.value = value
            slot.digest = digest
            self._journal(OP_INSERT, slot_id, digest)

    def take(self, slot_id: str) -> tuple[object, ReinsertPermit]:
        with self._lock:
            slot = self._slots.get(slot_id)
            if slot is None:
                raise UnknownSlot(f"no slot {slot_id!r}")
            if slot.value is None:
                raise SlotEmpty(f"slot {slot_id!r} is empty")
            value, digest = slot.value, slot.digest
            slot.value = None
            slot.digest = None
            slot.takes += 1
            self._journal(OP_TAKE, slot_id, digest)
            return value, ReinsertPermit(slot_id, digest)

    def reinsert(self, permit: ReinsertPermit, value: object) -> None:
        with self._lock:
            if permit.used:
                raise PermitUsed("reinsert permit already spent")
            slot = self._slots.get(permit.slot_id)
            if slot is None:
                raise UnknownSlot(f"no slot {permit.slot_id!r}")
            if slot.value is not None:
                raise SlotFull(f"slot {permit.slot_id!r} is occupied")
            digest = self._digest(value)
            if digest != permit.value_digest:
                raise ValueMismatch("value does not match the taken original")
            permit.used = True
            slot.value = value
            slot.digest = digest
            slot.reinserts += 1
            self._journal(OP_REINSERT, permit.slot_id, digest)

    # -- inspection ------------------------------------------------------

    def history(self, slot_id: str) -> dict[str, int]:
        with self._lock:
            slot = self._slots.get(slot_id)
            if slot is None:
                raise UnknownSlot(f"no slot {slot_id!r}")
            return {"takes": slot.takes, "reinserts": slot.reinserts}

    def slot_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._slots)

    def state_digest(self) -> bytes:
        """Hash over all observable store state; pings must not change it."""
        with self._lock:
            h = hashlib.sha256()
            for slot_id in sorted(self._slots):
                slot = self._slots[slot_id]
                h.update(slot_id.encode())
                h.update(slot.digest or b"\x00" * 32)
                h.update(slot.takes.to_bytes(8, "big"))
                h.update(slot.reinserts.to_bytes(8, "big"))
            return h.digest()

    # -- journal ---------------------------------------------------------

    def _journal(self, op: int, slot_id: str, digest: bytes) -> None:
        self._seq += 1
        if self._journal_fh is None:
            return
        body = (
            self._seq.to_bytes(8, "big")
            + bytes([op])
            + len(slot_id).to_bytes(2, "big")
            + slot_id.encode()
            + digest
        )
        self._journal_fh.write(len(body).to_bytes(4, "big") + body)
        self._journal_fh.flush()

    def close(self) -> None:
        if self._journal_fh is not None:
            self._journal_fh.close()
            self._journal_fh = None


def replay_journal(path) -> list[JournalRecord]:
    """Decode a journal file back into its ordered mutation records."""
    records = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            body = fh.read(int.from_bytes(head, "big"))
            seq = int.from_bytes(body[:8], "big")
            op = body[8]
            name_len = int.from_bytes(body[9:11], "big")
            slot_id = body[11 : 11 + name_len].decode()
            digest = body[11 + name_len : 11 + name_len + 32]
            records.append(JournalRecord(seq, op, slot_id, digest))
    return records


def presence_after(records) -> dict[str, bool]:
    """Fold journal records into the presence map they imply."""
    present: dict[str, bool] = {}
    for rec in records:
        if rec.op == OP_GRANT:
            present[rec.slot_id] = False
        elif rec.op in (OP_INSERT, OP_REINSERT):
            present[rec.slot_id] = True
        elif rec.op == OP_TAKE:
            present[rec.slot_id] = False
    return present
