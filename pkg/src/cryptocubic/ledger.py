"""Simulated on-chain ledger.

Account-balance model with integer cents.  Multisig accounts register both
verify keys and a spend clears only when the user-leg and server-leg
signatures both check out over (source, destination, amount, nonce).  Plain
accounts (external destinations, exterior funding wallets) have no keys and
cannot be spent from inside a simulation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .backend import CryptoBackend, Signature, VerifyKey


class LedgerError(Exception):
    pass


class DuplicateAddress(LedgerError):
    pass


class UnknownAddress(LedgerError):
    pass


class NonPositiveAmount(LedgerError):
    pass


class InsufficientFunds(LedgerError):
    pass


class MissingSignature(LedgerError):
    pass


class BadSignature(LedgerError):
    pass


class NonceReplay(LedgerError):
    pass


@dataclass(frozen=True)
class ChainTx:
    source: str
    destination: str
    amount_cents: int
    nonce: int
    sig_user: Signature | None = None
    sig_server: Signature | None = None

    def signing_message(self) -> bytes:
        return f"{self.source}|{self.destination}|{self.amount_cents}|{self.nonce}".encode()


@dataclass
class _Account:
    balance: int = 0
    verify_user: VerifyKey | None = None
    verify_server: VerifyKey | None = None
    used_nonces: set[int] = field(default_factory=set)


class Ledger:
    def __init__(self, backend: CryptoBackend, confirmation_delay: int = 0) -> None:
        self._backend = backend
        self._accounts: dict[str, _Account] = {}
        self._next_tx_id = 1
        self._next_nonce = 1
        self.confirmation_delay = confirmation_delay
        self._clock = 0
        self._pending: list[tuple[int, ChainTx]] = []

    # -- accounts --------------------------------------------------------

    def register(self, address: str, verify_user: VerifyKey, verify_server: VerifyKey) -> None:
        if address in self._accounts:
            raise DuplicateAddress(f"address {address!r} already registered")
        self._accounts[address] = _Account(0, verify_user, verify_server)

    def ensure_plain_account(self, address: str) -> None:
        self._accounts.setdefault(address, _Account())

    def verify_address(self, bundle) -> bool:
        """True iff the bundle's address derives from its verification keys."""
        return self._backend.verify_address(bundle)

    def balance(self, address: str) -> int:
        account = self._accounts.get(address)
        if account is None:
            raise UnknownAddress(f"no account {address!r}")
        return account.balance

    def fund(self, address: str, amount_cents: int) -> None:
        """Credit from an exterior wallet; models an on-chain deposit."""
        if amount_cents <= 0:
            raise NonPositiveAmount(f"amount must be positive, got {amount_cents}")
        account = self._accounts.get(address)
        if account is None:
            raise UnknownAddress(f"no account {address!r}")
        account.balance += amount_cents

    # -- spending --------------------------------------------------------

    def fresh_nonce(self) -> int:
        nonce = self._next_nonce
        self._next_nonce += 1
        return nonce

    def spend(self, tx: ChainTx) -> int:
        account = self._accounts.get(tx.source)
        if account is None:
            raise UnknownAddress(f"no account {tx.source!r}")
        if tx.amount_cents <= 0:
            raise NonPositiveAmount(f"amount must be positive, got {tx.amount_cents}")
        if account.verify_user is None or account.verify_server is None:
            raise MissingSignature(f"account {tx.source!r} has no spend keys")
        if tx.sig_user is None or tx.sig_server is None:
            raise MissingSignature("a spend needs both the user and server signatures")
        if tx.nonce in account.used_nonces:
            raise NonceReplay(f"nonce {tx.nonce} already spent from {tx.source!r}")
        message = tx.signing_message()
        if not self._backend.verify(account.verify_user, message, tx.sig_user):
            raise BadSignature("user-leg signature rejected")
        if not self._backend.verify(account.verify_server, message, tx.sig_server):
            raise BadSignature("server-leg signature rejected")
        if tx.amount_cents > account.balance:
            raise InsufficientFunds(
                f"{tx.source!r} holds {account.balance}, cannot move {tx.amount_cents}"
            )
        self.ensure_plain_account(tx.destination)
        account.used_nonces.add(tx.nonce)
        account.balance -= tx.amount_cents
        tx_id = self._next_tx_id
        self._next_tx_id += 1
        if self.confirmation_delay > 0:
            self._pending.append((self._clock + self.confirmation_delay, tx))
        else:
            self._accounts[tx.destination].balance += tx.amount_cents
        return tx_id

    def tick(self) -> None:
        self._clock += 1
        still_pending = []
        for due, tx in self._pending:
            if due <= self._clock:
                self._accounts[tx.destination].balance += tx.amount_cents
            else:
                still_pending.append((due, tx))
        self._pending = still_pending

    # -- inspection ------------------------------------------------------

    def total_supply(self) -> int:
        return sum(a.balance for a in self._accounts.values()) + sum(
            tx.amount_cents for _, tx in self._pending
        )

    def dump(self) -> str:
        lines = [f"{addr} {acct.balance}" for addr, acct in sorted(self._accounts.items())]
        return "\n".join(lines) + "\n"
