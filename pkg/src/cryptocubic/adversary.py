"""Attacker oracle.

Knowledge is a set of structured terms.  `closure` saturates a knowledge
set under the decomposition rules an attacker can apply mechanically:

1. open an asymmetric cypher with the matching private key,
2. open a symmetric cypher with its key,
3. split tuples into their parts.

Constructive abilities (hashing known values, encrypting under known keys,
tupling) never produce new atoms, so they are answered on demand by
`can_derive` instead of being enumerated into the closure.

An attack is a spend: `can_spend` asks whether both signing-key atoms of a
square are derivable, and when they are it returns a step-by-step witness
that `replay_witness` turns into a real accepted ledger transaction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .ledger import ChainTx
from .protocol import SERVER, Simulation
from .terms import (
    ASYM,
    SYM,
    DigestTerm,
    EncTerm,
    PrivateKeyTerm,
    PublicKeyTerm,
    SigningKeyTerm,
    SymKeyTerm,
    Term,
    TupleTerm,
)

SCENARIOS = (
    "post_transfer_grab",
    "counterfeit_es",
    "token_replay",
    "double_transfer",
    "wiretap_passive",
    "store_raid",
)

CHANNEL_ASSUMPTION = (
    "assumption: user-server links are confidential; the wiretap hears user-user traffic only"
)


@dataclass(frozen=True)
class Derivation:
    rule: str
    premises: tuple[Term, ...]


def closure(knowledge) -> dict[Term, Derivation | None]:
    """Least fixed point of the decomposition rules.

    Returns every reachable term mapped to how it was derived (None for the
    initial terms).  Deterministic, monotone in its input, and idempotent:
    every derived term is a subterm of the input, so the loop terminates.
    """
    known: dict[Term, Derivation | None] = {t: None for t in knowledge}
    changed = True
    while changed:
        changed = False
        for term in list(known):
            if isinstance(term, TupleTerm):
                for part in term.items:
                    if part not in known:
                        known[part] = Derivation("open-tuple", (term,))
                        changed = True
            elif isinstance(term, EncTerm) and term.inner not in known:
                if term.scheme == ASYM and PrivateKeyTerm(term.key_id) in known:
                    known[term.inner] = Derivation(
                        "asym-decrypt", (term, PrivateKeyTerm(term.key_id))
                    )
                    changed = True
                elif term.scheme == SYM and SymKeyTerm(term.key_id) in known:
                    known[term.inner] = Derivation(
                        "sym-decrypt", (term, SymKeyTerm(term.key_id))
                    )
                    changed = True
    return known


def closure_terms(knowledge) -> frozenset[Term]:
    return frozenset(closure(knowledge))


def can_derive(closed: dict[Term, Derivation | None], target: Term) -> bool:
    """Analysis plus on-demand synthesis: hash, encrypt and tuple anything."""
    if target in closed:
        return True
    if isinstance(target, DigestTerm):
        return can_derive(closed, target.inner)
    if isinstance(target, TupleTerm):
        return all(can_derive(closed, part) for part in target.items)
    if isinstance(target, EncTerm):
        key: Term = (
            PublicKeyTerm(target.key_id) if target.scheme == ASYM else SymKeyTerm(target.key_id)
        )
        return can_derive(closed, key) and can_derive(closed, target.inner)
    return False


def _explain(closed: dict[Term, Derivation | None], target: Term, lines: list[str], seen: set[Term]) -> None:
    if target in seen:
        return
    seen.add(target)
    how = closed.get(target)
    if how is None:
        lines.append(f"have {target!r}")
        return
    for premise in how.premises:
        _explain(closed, premise, lines, seen)
    lines.append(f"{how.rule}: {target!r}")


@dataclass
class SpendDecision:
    possible: bool
    witness: list[str] = field(default_factory=list)
    sig_user_term: SigningKeyTerm | None = None
    sig_server_term: SigningKeyTerm | None = None


def can_spend(knowledge, bundle_id: str) -> SpendDecision:
    closed = closure(knowledge)
    sig_u = SigningKeyTerm(bundle_id, "user")
    sig_s = SigningKeyTerm(bundle_id, "server")
    if sig_u not in closed or sig_s not in closed:
        return SpendDecision(False)
    lines: list[str] = []
    seen: set[Term] = set()
    _explain(closed, sig_u, lines, seen)
    _explain(closed, sig_s, lines, seen)
    lines.append("sign and submit the dual-signature transaction")
    return SpendDecision(True, lines, sig_u, sig_s)


def replay_witness(sim: Simulation, decision: SpendDecision, square_id: str, dest: str, cents: int) -> int:
    """Execute a positive verdict as a real spend on the staged run's chain."""
    assert decision.possible, "nothing to replay for a negative verdict"
    square = sim.squares[square_id]
    sig_u = sim.value_of[decision.sig_user_term]
    sig_s = sim.value_of[decision.sig_server_term]
    sim.ledger.ensure_plain_account(dest)
    nonce = sim.ledger.fresh_nonce()
    tx = ChainTx(square.address_value, dest, cents, nonce)
    message = tx.signing_message()
    signed = ChainTx(
        square.address_value,
        dest,
        cents,
        nonce,
        sig_user=sim.backend.sign(sig_u, message),
        sig_server=sim.backend.sign(sig_s, message),
    )
    return sim.ledger.spend(signed)


# ---------------------------------------------------------------------------
# knowledge assembly helpers


def snapshot_knowledge(sim: Simulation, *party_names: str) -> set[Term]:
    terms: set[Term] = set()
    for name in party_names:
        terms |= sim.parties[name].snapshot()
    return terms


def take_all_slots(sim: Simulation) -> set[Term]:
    """One destructive take per occupied slot, as the store openly allows."""
    terms: set[Term] = set()
    for slot_id in sim.store.slot_ids():
        if sim.store.ping(slot_id):
            value, _permit = sim.store.take(slot_id)
            terms.add(value.term if hasattr(value, "term") else value)
    return terms


def wiretap_knowledge(
    sim: Simulation,
    include_user_server: bool = False,
    upto: int | None = None,
) -> set[Term]:
    """Terms a passive listener collects from the transcript, optionally
    truncated to the first `upto` messages."""
    from .backend import term_of

    terms: set[Term] = set()
    transcript = sim.transport.transcript
    if upto is not None:
        transcript = transcript[:upto]
    for msg in transcript:
        if msg.channel == "user-server" and not include_user_server:
            continue
        for part in msg.payload:
            terms.add(term_of(part))
    return terms


# ---------------------------------------------------------------------------
# scenario stagings


@dataclass
class Verdict:
    scenario: str
    mode: str
    can_spend: bool
    witness: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def report_line(self) -> str:
        return f"{self.scenario} {self.mode} {str(self.can_spend).lower()} [{len(self.witness)}]"


def _staged_run(mode: str, backend: str, seed: int) -> tuple[Simulation, str]:
    sim = Simulation(mode=mode, backend=backend, seed=seed)
    square_id = sim.setup("a")
    sim.fund("a", 1000)
    return sim, square_id


def _bundle(sim: Simulation, square_id: str) -> str:
    return sim._squares_private[square_id].bundle_id


def run_attack(scenario: str, mode: str = "cryptocubic", backend: str = "symbolic", seed: int = 0) -> Verdict:
    """Stage a fresh honest run, apply one attack, and judge it."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown attack scenario: {scenario!r}")
    stager = globals()[f"_attack_{scenario}"]
    return stager(mode, backend, seed)


def _attack_post_transfer_grab(mode: str, backend: str, seed: int) -> Verdict:
    sim, square_id = _staged_run(mode, backend, seed)
    sim.transfer("a", "b")
    knowledge = snapshot_knowledge(sim, "USER_A", SERVER) | take_all_slots(sim)
    decision = can_spend(knowledge, _bundle(sim, square_id))
    verdict = Verdict("post_transfer_grab", mode, decision.possible, decision.witness)
    if decision.possible:
        replay_witness(sim, decision, square_id, "grab_sink", 1000)
        verdict.notes.append("witness replayed: 1000 cents moved on the staged chain")
    return verdict


def _attack_counterfeit_es(mode: str, backend: str, seed: int) -> Verdict:
    sim, square_id = _staged_run(mode, backend, seed)
    sim.inject_counterfeit_es = True
    session = sim.transfer("a", "b")
    notes = [f"transfer outcome: {session.phase}"]
    if mode == "baseline3":
        notes.append("handover is a bare signing key; there is no cypher to fake")
    if session.phase == "aborted":
        notes.append(f"abort reason: {session.abort_reason}")
        if sim.store.ping(sim.squares[square_id].slot_id):
            notes.append("owner cypher back in its slot")
    knowledge = snapshot_knowledge(sim, "USER_A") | take_all_slots(sim)
    decision = can_spend(knowledge, _bundle(sim, square_id))
    return Verdict("counterfeit_es", mode, decision.possible, decision.witness, notes)


def _attack_token_replay(mode: str, backend: str, seed: int) -> Verdict:
    sim, square_id = _staged_run(mode, backend, seed)
    sim.transfer("a", "b")
    if mode != "cryptocubic":
        knowledge = wiretap_knowledge(sim)
        decision = can_spend(knowledge, _bundle(sim, square_id))
        return Verdict(
            "token_replay", mode, decision.possible, decision.witness,
            ["mode issues no challenge tokens; nothing to replay"],
        )
    # the receiver's reply token from the finished session, replayed cold
    stale = sim.server.recall("Token_B2")
    accepted = sim.attempt_replay_auth(stale)
    knowledge = {stale.term} | wiretap_knowledge(sim)
    decision = can_spend(knowledge, _bundle(sim, square_id))
    notes = ["stale token accepted" if accepted else "stale token refused"]
    return Verdict("token_replay", mode, decision.possible or accepted, decision.witness, notes)


def _attack_double_transfer(mode: str, backend: str, seed: int) -> Verdict:
    sim, square_id = _staged_run(mode, backend, seed)
    if mode == "baseline3":
        first = sim.transfer("a", "b")
        second = sim.transfer("a", "c")
    else:
        first = sim.begin_transfer("a", "b")
        sim.withdraw_for_transfer(first)
        if mode == "cryptocubic":
            sim.authenticate_parties(first)
        second = sim.begin_transfer("a", "c")
        sim.withdraw_for_transfer(second)
        sim.complete_transfer(first)
    notes = [
        f"first session: {first.phase}",
        f"second session: {second.phase}"
        + (f" ({second.abort_reason})" if second.abort_reason else ""),
    ]
    knowledge = snapshot_knowledge(sim, "USER_A", "USER_C") | take_all_slots(sim)
    decision = can_spend(knowledge, _bundle(sim, square_id))
    completed = [s for s in (first, second) if s.phase == "completed"]
    return Verdict(
        "double_transfer",
        mode,
        decision.possible or len(completed) != 1,
        decision.witness,
        notes,
    )


def _attack_wiretap_passive(mode: str, backend: str, seed: int) -> Verdict:
    sim, square_id = _staged_run(mode, backend, seed)
    sim.transfer("a", "b")
    sim.redeem("b", "ext", 1000)
    knowledge = wiretap_knowledge(sim)
    decision = can_spend(knowledge, _bundle(sim, square_id))
    return Verdict(
        "wiretap_passive", mode, decision.possible, decision.witness, [CHANNEL_ASSUMPTION]
    )


def _attack_store_raid(mode: str, backend: str, seed: int) -> Verdict:
    sim, square_id = _staged_run(mode, backend, seed)
    sim.transfer("a", "b")
    knowledge = snapshot_knowledge(sim, SERVER) | take_all_slots(sim)
    decision = can_spend(knowledge, _bundle(sim, square_id))
    if mode == "baseline3":
        notes = ["the slot held a bare signing key, but one leg alone cannot spend"]
    else:
        notes = ["slot contents are cyphers under keys the raider lacks"]
    return Verdict("store_raid", mode, decision.possible, decision.witness, notes)


def verdict_report(verdicts) -> str:
    lines = [v.report_line() for v in verdicts]
    assumptions = sorted({n for v in verdicts for n in v.notes if n.startswith("assumption:")})
    return "\n".join(lines + [f"# {a}" for a in assumptions]) + "\n"
