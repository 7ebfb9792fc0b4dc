"""Off-chain transfer simulation.

One `Simulation` drives users and a server through square establishment,
funding, ownership transfer and redemption, in one of three modes:

* ``baseline3``    - naive flow: the user-leg signing key is handed around
  in plaintext and the server-leg key sits in a destructive slot anyone can
  take.  Deliberately insecure; exists as the contrast case.
* ``bare4``        - encrypted flow without authentication: signing keys
  only ever exist in plaintext inside dynamic procedures, the user-leg
  cypher lives in a destructive slot, transfer re-encrypts it to the new
  owner.
* ``cryptocubic``  - the full flow: bare4 plus token challenge-response
  authentication of both parties, a stored verification hash that lets the
  receiver prove the cypher it was handed is genuine, and receiver-key
  routing through the current owner.

Every step emits one holdings table and records per-party knowledge
snapshots, slot contents and the transcript position, which is what the
attacker oracle consumes.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .backend import (
    AsymPublicKey,
    Cypher,
    CryptoBackend,
    Digest,
    KeyMismatch,
    SymKey,
    Token,
    get_backend,
    term_of,
)
from .ledger import ChainTx, Ledger
from .parties import DynamicProcedure, Message, Party, Transport, TransportFailure
from .store import DestructiveStore, SlotEmpty
from .terms import Term
from .trace import TraceEvent, format_money, render_run

MODES = ("baseline3", "bare4", "cryptocubic")

SERVER = "SERVER_S"

# session phases, in the order a session may traverse them; any phase may
# step to "aborted".  Withdrawal precedes the token exchanges and the token
# exchanges precede hash verification, which is the order the authenticated
# flow's tables follow.
PHASES = (
    "initiated",
    "ea_withdrawn",
    "sender_authenticated",
    "receiver_authenticated",
    "hash_verified",
    "completed",
    "aborted",
)


class ProtocolError(Exception):
    pass


class UnknownSquare(ProtocolError):
    pass


class NotOwner(ProtocolError):
    pass


class AuthFailure(ProtocolError):
    pass


@dataclass
class CryptoSquareRecord:
    """Server-side half of an established square."""

    square_id: str
    owner_party: str
    owner_pub: AsymPublicKey | None
    sym_key: SymKey | None
    slot_id: str
    es_hash: Digest | None
    sig_user_fingerprint: bytes | None
    address_value: str
    redeemed: bool = False


@dataclass
class TransferSession:
    session_id: int
    square_id: str
    sender: str
    receiver: str
    phase: str = "initiated"
    abort_reason: str | None = None
    permit: object | None = None
    procedure: DynamicProcedure | None = None

    def advance(self, phase: str) -> None:
        assert PHASES.index(phase) > PHASES.index(self.phase), (
            f"session may not step back from {self.phase} to {phase}"
        )
        self.phase = phase

    def abort(self, reason: str) -> None:
        self.phase = "aborted"
        self.abort_reason = reason


@dataclass(frozen=True)
class StepRecord:
    """Everything the attacker oracle may know as of one emitted step."""

    event: TraceEvent
    knowledge: dict[str, frozenset[Term]]
    slot_terms: dict[str, Term | None]
    transcript_len: int


@dataclass
class _SquarePrivate:
    """Harness-only registry: lets oracle checks and witness replays look up
    the real values behind a square without widening any party's state."""

    bundle_id: str
    sig_user: object
    sig_server: object
    verify_user: object
    verify_server: object
    es: Cypher | None


class Simulation:
    def __init__(
        self,
        mode: str = "cryptocubic",
        backend: CryptoBackend | str = "symbolic",
        seed: int = 0,
        timeout_ticks: int = 100,
        wipe_sender_key: bool = False,
        journal_path: str | None = None,
    ) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown mode: {mode!r}")
        self.mode = mode
        self.backend = get_backend(backend) if isinstance(backend, str) else backend
        self.seed = seed
        self.rng = random.Random(seed)
        self.timeout_ticks = timeout_ticks
        self.wipe_sender_key = wipe_sender_key
        self.ledger = Ledger(self.backend)
        self.store = DestructiveStore(digest_fn=self.backend.fingerprint, journal_path=journal_path)
        self.transport = Transport()
        self.parties: dict[str, Party] = {SERVER: Party(SERVER, "server")}
        self._user_order: list[str] = []
        self.squares: dict[str, CryptoSquareRecord] = {}
        self._squares_private: dict[str, _SquarePrivate] = {}
        self._cap_by_square: dict[str, object] = {}
        self._keypairs: dict[str, object] = {}  # party name -> AsymKeyPair
        self.value_of: dict[Term, object] = {}
        self.events: list[TraceEvent] = []
        self.step_records: list[StepRecord] = []
        self._slot_order: list[str] = []
        self._slot_display: dict[str, str] = {}
        self._challenge_counts: dict[str, int] = {}
        self._consumed_tokens: set[bytes] = set()
        self._session_seq = 0
        self._square_seq = 0
        self.clock = 0
        # injection switches used by attack stagings and fault tests
        self.inject_counterfeit_es = False
        self.inject_wrong_ka = False

    # ------------------------------------------------------------------
    # parties and bookkeeping

    def user(self, letter: str) -> Party:
        name = f"USER_{letter.upper()}"
        if name not in self.parties:
            self.parties[name] = Party(name, "user")
            self._user_order.append(name)
        return self.parties[name]

    @property
    def server(self) -> Party:
        return self.parties[SERVER]

    def _columns_order(self) -> list[str]:
        if not self._user_order:
            return [SERVER]
        first, rest = self._user_order[0], self._user_order[1:]
        return [first, SERVER, *rest]

    def _letter(self, party_name: str) -> str:
        return party_name.rsplit("_", 1)[1].lower()

    def _register(self, *values: object) -> None:
        for v in values:
            self.value_of[term_of(v)] = v

    def _annotate(self, name: str, value: object) -> str:
        from .backend import Address

        if isinstance(value, Address):
            try:
                balance = self.ledger.balance(value.value)
            except Exception:
                balance = 0
            if balance > 0:
                return f"{name} ({format_money(balance)})"
        return name

    def _column_items(self, party: Party, include_transients: bool = True) -> list[str]:
        items: list[str] = []
        pending: set[str] = set()
        for proc in party.procedures:
            rendered = f"<{','.join(proc.bindings)}>"
            if proc.pending_insert:
                rendered += f" -- [{proc.pending_insert}]"
                pending.add(proc.pending_insert)
            if include_transients:
                items.append(rendered)
        if party.role == "server":
            for slot_id in self._slot_order:
                display = self._slot_display[slot_id]
                if display not in pending and self.store.ping(slot_id):
                    items.append(f"[{display}]")
        for name, value in party.memory.items():
            items.append(self._annotate(name, value))
        return items

    def holdings(self, party_name: str, include_transients: bool = False) -> list[str]:
        """Current rendered holdings of one party.

        Transient scope contents only show up when explicitly requested;
        outside callers see what a state inspection would see.
        """
        return self._column_items(self.parties[party_name], include_transients)

    def _emit(self, label: str) -> None:
        self.clock += 1
        columns = {
            name: self._column_items(self.parties[name]) for name in self._columns_order()
        }
        event = TraceEvent(len(self.events) + 1, label, columns)
        self.events.append(event)
        knowledge = {name: p.snapshot() for name, p in self.parties.items()}
        slot_terms = {}
        for slot_id in self._slot_order:
            value = self.store._slots[slot_id].value
            slot_terms[slot_id] = term_of(value) if value is not None else None
        self.step_records.append(
            StepRecord(event, knowledge, slot_terms, len(self.transport.transcript))
        )
        for party in self.parties.values():
            for proc in party.procedures:
                assert proc.active
            if self.mode != "baseline3":
                from .backend import SigningKey

                leaked = [n for n, v in party.memory.items() if isinstance(v, SigningKey)]
                assert not leaked, f"signing key in {party.name} memory: {leaked}"
        # clear one-shot insert annotations once their table is out
        for party in self.parties.values():
            for proc in party.procedures:
                proc.pending_insert = None

    def _send(self, msg_type: str, sender: str, receiver: str, payload: tuple, session: int = 0) -> Message:
        return self.transport.send(Message(msg_type, sender, receiver, session, payload))

    def _request(self, target: Party) -> bool:
        """Returns False when the target stays silent long enough to time out."""
        if target.silent:
            self.clock += self.timeout_ticks
            return False
        return True

    def render(self) -> str:
        return render_run(self.events)

    # ------------------------------------------------------------------
    # square lookup

    def _square_for(self, party_name: str) -> CryptoSquareRecord:
        holder = self.parties[party_name]
        for square in self.squares.values():
            for value in holder.memory.values():
                if getattr(value, "value", None) == square.address_value:
                    return square
        raise UnknownSquare(f"{party_name} holds no square address")

    def _owned_square(self, party_name: str) -> CryptoSquareRecord:
        square = self._square_for(party_name)
        if square.owner_party != party_name:
            raise NotOwner(f"{party_name} does not own square {square.square_id}")
        return square

    # ------------------------------------------------------------------
    # establishment

    def setup(self, user_letter: str) -> str:
        if self.mode == "baseline3":
            return self._establish_plain(user_letter)
        return self._establish_crypto(user_letter)

    def _establish_plain(self, user_letter: str) -> str:
        a = self.user(user_letter)
        s = self.server
        proc = s.open_procedure()
        bundle = self.backend.gen_multisig(self.rng)
        self._register(bundle.sig_user, bundle.sig_server, bundle.address)
        proc.bind("Sig_U", bundle.sig_user)
        proc.bind("Sig_S", bundle.sig_server)
        proc.bind("ADD", bundle.address)
        self._emit("server opens a signing-key procedure")

        self._send("square_payload", SERVER, a.name, (bundle.sig_user, bundle.address))
        a.remember("Sig_U", bundle.sig_user)
        a.remember("ADD", bundle.address)
        self._emit(f"Sig_U and the address go to user {user_letter.upper()}")

        square_id = self._new_square_id()
        slot_id = f"{square_id}.server_leg"
        cap = self.store.grant_source([slot_id])
        self._slot_order.append(slot_id)
        self._slot_display[slot_id] = "Sig_S"
        self.store.insert(cap, slot_id, bundle.sig_server)
        proc.pending_insert = "Sig_S"
        self._emit("the server signing key drops into the destructive store")

        proc.terminate()
        self.ledger.register(bundle.address.value, bundle.verify_user, bundle.verify_server)
        self.squares[square_id] = CryptoSquareRecord(
            square_id,
            a.name,
            None,
            None,
            slot_id,
            None,
            None,
            bundle.address.value,
        )
        self._squares_private[square_id] = _SquarePrivate(
            bundle.bundle_id,
            bundle.sig_user,
            bundle.sig_server,
            bundle.verify_user,
            bundle.verify_server,
            es=None,
        )
        self._emit("the procedure terminates")
        return square_id

    def _establish_crypto(self, user_letter: str) -> str:
        a = self.user(user_letter)
        s = self.server
        u = user_letter.lower()
        memory_before = {p.name: dict(p.memory) for p in self.parties.values()}
        proc = None
        try:
            pair = self.backend.gen_asym_pair(self.rng)
            self._keypairs[a.name] = pair
            self._register(pair.private, pair.public)
            a.remember(f"K{u}", pair.private)
            a.remember(f"K{u}_Public", pair.public)
            self._emit(f"user {u.upper()} generates an encryption key pair")

            self._send("share_public_key", a.name, SERVER, (pair.public,))
            ks = self.backend.gen_sym_key(self.rng)
            self._register(ks)
            s.remember("Ks", ks)
            s.remember(f"K{u}_Public", pair.public)
            self._emit(f"user {u.upper()} shares the public key; server creates a symmetric key")

            proc = s.open_procedure()
            proc.bind("Ks", ks)
            proc.bind(f"K{u}_Public", pair.public)
            self._emit("server opens a square-creation procedure")

            bundle = self.backend.gen_multisig(self.rng)
            self._register(bundle.sig_user, bundle.sig_server, bundle.address)
            proc.bind("Sig_U", bundle.sig_user)
            proc.bind("Sig_S", bundle.sig_server)
            proc.bind("ADD", bundle.address)
            self._emit("the procedure creates the dual signing keys and their address")

            ea = self.backend.asym_encrypt(pair.public, bundle.sig_user, self.rng)
            es = self.backend.sym_encrypt(ks, bundle.sig_server, self.rng)
            self._register(ea, es)
            proc.bind("Ea", ea)
            proc.bind("Es", es)
            self._emit("the procedure encrypts the signing keys")

            es_hash = None
            if self.mode == "cryptocubic":
                es_hash = self.backend.hash_value(es)
                self._register(es_hash)
                s.remember("Hash", es_hash)
                self._emit("server records the square's verification hash")

            self._send("square_payload", SERVER, a.name, (es, bundle.address))
            a.remember("Es", es)
            a.remember("ADD", bundle.address)
            self._emit(f"Es and the address go to user {u.upper()}")
        except TransportFailure:
            # no partial square: scrub everything this attempt touched
            if proc is not None:
                proc.terminate()
            for party in self.parties.values():
                party.memory.clear()
                party.memory.update(memory_before.get(party.name, {}))
            self._emit("the link drops; establishment rolls back")
            raise

        square_id = self._new_square_id()
        slot_id = f"{square_id}.owner_cypher"
        cap = self.store.grant_source([slot_id])
        self._slot_order.append(slot_id)
        self._slot_display[slot_id] = "Ea"
        self.store.insert(cap, slot_id, ea)
        proc.pending_insert = "Ea"
        self._cap_by_square[square_id] = cap
        self._emit("the user-leg cypher drops into the destructive store")

        proc.terminate()
        self.ledger.register(bundle.address.value, bundle.verify_user, bundle.verify_server)
        self.squares[square_id] = CryptoSquareRecord(
            square_id,
            a.name,
            pair.public,
            ks,
            slot_id,
            es_hash,
            self.backend.fingerprint(bundle.sig_user),
            bundle.address.value,
        )
        self._squares_private[square_id] = _SquarePrivate(
            bundle.bundle_id,
            bundle.sig_user,
            bundle.sig_server,
            bundle.verify_user,
            bundle.verify_server,
            es,
        )
        self._emit("the procedure terminates")
        self._emit("a square now stands between the user and the server")
        return square_id

    def _new_square_id(self) -> str:
        self._square_seq += 1
        return f"sq{self._square_seq}"

    # ------------------------------------------------------------------
    # funding

    def fund(self, user_letter: str, cents: int) -> None:
        a = self.user(user_letter)
        square = self._square_for(a.name)
        self.ledger.fund(square.address_value, cents)
        self._emit(f"user {user_letter.upper()} funds the address from an exterior wallet")

    # ------------------------------------------------------------------
    # transfer

    def transfer(self, from_letter: str, to_letter: str) -> TransferSession:
        if self.mode == "baseline3":
            return self._transfer_plain(from_letter, to_letter)
        session = self.begin_transfer(from_letter, to_letter)
        if session.phase == "aborted":
            return session
        self.withdraw_for_transfer(session)
        if session.phase == "aborted":
            return session
        if self.mode == "cryptocubic":
            self.authenticate_parties(session)
            if session.phase == "aborted":
                return session
        self.complete_transfer(session)
        return session

    def _transfer_plain(self, from_letter: str, to_letter: str) -> TransferSession:
        a = self.user(from_letter)
        square = self._owned_square(a.name)
        b, newcomer = self._meet(from_letter, to_letter)
        session = self._new_session(square, a.name, b.name)
        sig_u = a.recall("Sig_U")
        addr = a.recall("ADD")
        self._send("handover", a.name, b.name, (sig_u, addr), session.session_id)
        b.remember("Sig_U", sig_u)
        b.remember("ADD", addr)
        self._emit(
            f"user {from_letter.upper()} hands the user signing key and the address"
            f" to user {to_letter.upper()}"
        )
        session.advance("completed")
        return session

    def _meet(self, from_letter: str, to_letter: str) -> tuple[Party, bool]:
        name = f"USER_{to_letter.upper()}"
        newcomer = name not in self.parties
        b = self.user(to_letter)
        if newcomer:
            self._emit(f"user {from_letter.upper()} encounters user {to_letter.upper()}")
        return b, newcomer

    def _new_session(self, square: CryptoSquareRecord, sender: str, receiver: str) -> TransferSession:
        self._session_seq += 1
        return TransferSession(self._session_seq, square.square_id, sender, receiver)

    def begin_transfer(self, from_letter: str, to_letter: str) -> TransferSession:
        a = self.user(from_letter)
        square = self._owned_square(a.name)
        b, _ = self._meet(from_letter, to_letter)
        session = self._new_session(square, a.name, b.name)
        fu, tu = from_letter.upper(), to_letter.upper()

        es = a.recall("Es")
        if self.inject_counterfeit_es:
            filler = self.backend.gen_sym_key(self.rng)
            es = self.backend.sym_encrypt(filler, b"counterfeit filler", self.rng)
            self._register(es)
        addr = a.recall("ADD")
        self._send("handover", a.name, b.name, (es, addr), session.session_id)
        b.remember("Es", es)
        b.remember("ADD", addr)
        self._emit(f"user {fu} hands Es and the address to user {tu}")

        pair = self.backend.gen_asym_pair(self.rng)
        self._keypairs[b.name] = pair
        self._register(pair.private, pair.public)
        t = to_letter.lower()
        b.remember(f"K{t}", pair.private)
        b.remember(f"K{t}_Public", pair.public)
        self._emit(f"user {tu} generates an encryption key pair")

        if self.mode == "cryptocubic":
            # receiver's key travels through the current owner
            self._send("share_public_key", b.name, a.name, (pair.public,), session.session_id)
            a.remember(f"K{t}_Public", pair.public)
            self._emit(f"user {tu} sends the public key to user {fu}")
            self._send("share_public_key", a.name, SERVER, (pair.public,), session.session_id)
            self.server.remember(f"K{t}_Public", pair.public)
            self._emit(f"user {fu} forwards user {tu}'s public key to the server")
        else:
            self._send("share_public_key", b.name, SERVER, (pair.public,), session.session_id)
            self.server.remember(f"K{t}_Public", pair.public)
            self._emit(f"user {tu} sends the public key to the server")
        return session

    def withdraw_for_transfer(self, session: TransferSession) -> None:
        square = self.squares[session.square_id]
        s = self.server
        a = self.parties[session.sender]
        fu = self._letter(session.sender).upper()

        self._send("approve", session.sender, SERVER, (b"approve", ), session.session_id)
        proc = s.open_procedure()
        try:
            value, permit = self.store.take(square.slot_id)
        except SlotEmpty:
            proc.terminate()
            session.abort("slot_empty")
            self._emit("the owner cypher is already gone; the transfer aborts")
            return
        proc.bind(self._slot_display[square.slot_id], value)
        session.permit = permit
        session.procedure = proc
        session.advance("ea_withdrawn")
        self._emit(
            f"with user {fu}'s approval the transfer procedure withdraws the owner cypher"
        )

        self._send("request_private_key", SERVER, a.name, (), session.session_id)
        if not self._request(a):
            self._abort_with_reinsert(session, "timeout",
                                      "the key request times out; the owner cypher returns to the store")
            return
        priv = self._keypairs[a.name].private
        if self.inject_wrong_ka:
            decoy = self.backend.gen_asym_pair(self.rng)
            self._register(decoy.private, decoy.public)
            priv = decoy.private
        self._send("private_key", a.name, SERVER, (priv,), session.session_id)
        if not self.backend.matches(priv, square.owner_pub):
            self._abort_with_reinsert(session, "ka_mismatch",
                                      "the offered private key does not match; the owner cypher returns to the store")
            return
        s.remember(f"K{self._letter(session.sender)}", priv)
        self._emit(f"server requests and verifies user {fu}'s private key")

    def _abort_with_reinsert(self, session: TransferSession, reason: str, label: str) -> None:
        square = self.squares[session.square_id]
        proc = session.procedure
        value = proc.get(self._slot_display[square.slot_id])
        self.store.reinsert(session.permit, value)
        proc.terminate()
        session.abort(reason)
        self._emit(label)

    # -- authentication --------------------------------------------------

    def _challenge_names(self, letter: str) -> tuple[str, str, str]:
        n = self._challenge_counts.get(letter, 0) + 1
        self._challenge_counts[letter] = n
        primes = "'" * (n - 1)
        base = f"Token_{letter.upper()}{primes}"
        return base, f"Et_{letter.upper()}{primes}", f"{base}2"

    def _run_challenge(
        self,
        target: Party,
        subject_pub: AsymPublicKey,
        session: TransferSession,
        single_table: bool,
        reply_override: Token | None = None,
    ) -> tuple[bool, str]:
        """Token round trip with `target`; returns (ok, failure_reason)."""
        s = self.server
        letter = self._letter(target.name)
        token_name, et_name, reply_name = self._challenge_names(letter)
        token = self.backend.gen_token(self.rng)
        self._register(token)
        s.remember(token_name, token)
        if not single_table:
            self._emit(f"server creates a challenge token for user {letter.upper()}")
        et = self.backend.asym_encrypt(subject_pub, token, self.rng)
        self._register(et)
        s.remember(et_name, et)
        if single_table:
            self._emit(f"server prepares an encrypted challenge for user {letter.upper()}")
        else:
            self._emit(f"the token is encrypted for user {letter.upper()}")

        self._send("challenge", SERVER, target.name, (et,), session.session_id)
        if not self._request(target):
            token.consumed = True
            self._consumed_tokens.add(token.material)
            return False, "timeout"
        if reply_override is not None:
            reply = reply_override
        else:
            pair = self._keypairs.get(target.name)
            try:
                reply = self.backend.asym_decrypt(pair.private, et)
            except KeyMismatch:
                token.consumed = True
                self._consumed_tokens.add(token.material)
                return False, "cannot decrypt challenge"
            target.remember(et_name, et)
            target.remember(reply_name, reply)
            self._register(reply)
        self._send("challenge_reply", target.name, SERVER, (reply,), session.session_id)
        # the token is spent now, whatever the comparison says
        token.consumed = True
        self._consumed_tokens.add(token.material)
        if reply_override is None:
            s.remember(reply_name, reply)
        if not isinstance(reply, Token) or reply.material != token.material:
            if isinstance(reply, Token) and reply.material in self._consumed_tokens - {token.material}:
                return False, "token replay"
            return False, "token mismatch"
        return True, ""

    def authenticate_parties(self, session: TransferSession) -> None:
        square = self.squares[session.square_id]
        a = self.parties[session.sender]
        b = self.parties[session.receiver]
        fu = self._letter(session.sender).upper()
        tu = self._letter(session.receiver).upper()

        ok, why = self._run_challenge(a, square.owner_pub, session, single_table=False)
        if not ok:
            self._abort_with_reinsert(
                session, f"sender auth failed: {why}",
                f"user {fu} fails the challenge; the owner cypher returns to the store")
            return
        session.advance("sender_authenticated")
        self._emit(f"user {fu} returns the decrypted token and is confirmed")

        receiver_pub = self._keypairs[b.name].public
        ok, why = self._run_challenge(b, receiver_pub, session, single_table=True)
        if not ok:
            self._abort_with_reinsert(
                session, f"receiver auth failed: {why}",
                f"user {tu} fails the challenge; the owner cypher returns to the store")
            return
        session.advance("receiver_authenticated")
        self._emit(f"user {tu} returns the decrypted token and is confirmed")

        es_hash = self.server.recall("Hash")
        self._send("hash_share", SERVER, b.name, (es_hash,), session.session_id)
        b.remember("Hash", es_hash)
        self._emit(f"server shares the verification hash with user {tu}")

        hash2 = self.backend.hash_value(b.recall("Es"))
        self._register(hash2)
        b.remember("Hash2", hash2)
        self._emit(f"user {tu} hashes the cypher user {fu} handed over")

        if hash2.value != es_hash.value:
            self._abort_with_reinsert(
                session, "counterfeit es",
                "the hashes differ; the transfer aborts and the owner cypher returns to the store")
            return
        session.advance("hash_verified")
        self._emit(f"user {tu} confirms the hashes match; the cypher is genuine")

    # -- completion ------------------------------------------------------

    def complete_transfer(self, session: TransferSession) -> None:
        square = self.squares[session.square_id]
        s = self.server
        proc = session.procedure
        sender_letter = self._letter(session.sender)
        receiver_letter = self._letter(session.receiver)
        tu = receiver_letter.upper()
        ka_name = f"K{sender_letter}"
        kb_pub_name = f"K{receiver_letter}_Public"

        ka = s.recall(ka_name)
        proc.bind(ka_name, ka)
        self._emit(f"the procedure loads user {sender_letter.upper()}'s private key")

        ea = proc.get(self._slot_display[square.slot_id])
        try:
            if not self.backend.matches(ka, square.owner_pub):
                raise KeyMismatch("stored private key does not fit the owner's public key")
            sig_u = self.backend.asym_decrypt(ka, ea)
        except KeyMismatch:
            proc.bindings.pop(ka_name, None)
            self._abort_with_reinsert(
                session, "ka_mismatch",
                "the private key cannot open the cypher; it returns to the store")
            return
        if self.backend.fingerprint(sig_u) != square.sig_user_fingerprint:
            proc.bindings.pop(ka_name, None)
            self._abort_with_reinsert(
                session, "foreign cypher",
                "the decrypted key is not this square's; the cypher returns to the store")
            return
        self._register(sig_u)
        proc.bind("Sig_U", sig_u)
        self._emit("the procedure decrypts the user signing key")

        kb_pub = s.recall(kb_pub_name)
        proc.bind(kb_pub_name, kb_pub)
        self._emit(f"the procedure loads user {tu}'s public key")

        eb = self.backend.asym_encrypt(kb_pub, sig_u, self.rng)
        self._register(eb)
        eb_name = f"E{receiver_letter}"
        proc.bind(eb_name, eb)
        self._emit(f"the procedure re-encrypts the signing key to user {tu}")

        cap = self._cap_by_square[square.square_id]
        self.store.insert(cap, square.slot_id, eb)
        self._slot_display[square.slot_id] = eb_name
        proc.pending_insert = eb_name
        self._emit("the new owner cypher drops into the destructive store")

        proc.terminate()
        square.owner_party = session.receiver
        square.owner_pub = kb_pub
        if self.wipe_sender_key:
            s.memory.pop(ka_name, None)
        self._send("transfer_notice", SERVER, session.sender, (b"done",), session.session_id)
        self._send("transfer_notice", SERVER, session.receiver, (b"done",), session.session_id)
        session.advance("completed")
        self._emit("the procedure terminates; both users are notified")
        self._emit(f"the transfer is complete; the square now belongs to user {tu}")

    # ------------------------------------------------------------------
    # redemption

    def redeem(self, user_letter: str, dest: str, cents: int) -> int:
        x = self.user(user_letter)
        square = self._square_for(x.name)
        if self.mode == "baseline3":
            return self._redeem_plain(x, square, dest, cents)
        return self._redeem_crypto(x, square, dest, cents)

    def _redeem_plain(self, x: Party, square: CryptoSquareRecord, dest: str, cents: int) -> int:
        self._send("take_request", x.name, SERVER, (), 0)
        sig_s, _permit = self.store.take(square.slot_id)
        self._send("take_payload", SERVER, x.name, (sig_s,), 0)
        x.remember("Sig_S", sig_s)
        letter = self._letter(x.name).upper()
        self._emit(f"user {letter} takes the server signing key from the store")

        tx_id = self._submit_spend(square, x.recall("Sig_U"), sig_s, dest, cents)
        square.redeemed = True
        self._emit(f"user {letter} signs the transfer and the chain accepts it")
        return tx_id

    def _redeem_crypto(self, x: Party, square: CryptoSquareRecord, dest: str, cents: int) -> int:
        letter = self._letter(x.name).upper()
        self._send("redeem_request", x.name, SERVER, (), 0)
        if self.mode == "cryptocubic":
            session = self._new_session(square, x.name, x.name)
            ok, why = self._run_challenge(x, square.owner_pub, session, single_table=True)
            if not ok:
                self._emit(f"user {letter} fails the redemption challenge; the slot stays shut")
                raise AuthFailure(f"redemption challenge failed: {why}")
            self._emit(f"user {letter} answers the redemption challenge and is confirmed")

        cypher, _permit = self.store.take(square.slot_id)
        ks = square.sym_key
        self._send("redeem_payload", SERVER, x.name, (cypher, ks), 0)
        proc = x.open_procedure()
        proc.bind(self._slot_display[square.slot_id], cypher)
        proc.bind("Ks", ks)
        self._emit(f"server releases the owner cypher and symmetric key to user {letter}")

        pair = self._keypairs[x.name]
        sig_u = self.backend.asym_decrypt(pair.private, cypher)
        sig_s = self.backend.sym_decrypt(ks, x.recall("Es"))
        proc.bind("Sig_U", sig_u)
        proc.bind("Sig_S", sig_s)
        self._emit(f"user {letter} recovers both signing keys inside a private scope")

        try:
            tx_id = self._submit_spend(square, sig_u, sig_s, dest, cents)
        finally:
            proc.terminate()
        square.redeemed = True
        self._emit(f"user {letter} signs the transfer and the chain accepts it")
        return tx_id

    def _submit_spend(self, square: CryptoSquareRecord, sig_u, sig_s, dest: str, cents: int) -> int:
        self.ledger.ensure_plain_account(dest)
        nonce = self.ledger.fresh_nonce()
        tx = ChainTx(square.address_value, dest, cents, nonce)
        message = tx.signing_message()
        signed = ChainTx(
            square.address_value,
            dest,
            cents,
            nonce,
            sig_user=self.backend.sign(sig_u, message),
            sig_server=self.backend.sign(sig_s, message),
        )
        return self.ledger.spend(signed)

    # ------------------------------------------------------------------
    # attack support

    def attempt_replay_auth(self, stale_token: Token) -> bool:
        """Impostor answers a fresh redemption challenge with an old token."""
        square = next(iter(self.squares.values()))
        session = self._new_session(square, SERVER, SERVER)
        target = self.parties[square.owner_party]
        ok, _why = self._run_challenge(
            target, square.owner_pub, session, single_table=True, reply_override=stale_token
        )
        self._emit("a stale token comes back and the challenge is refused"
                   if not ok else "a stale token is accepted")
        return ok
