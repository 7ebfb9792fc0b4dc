"""Dual cryptography backends.

The simulation runs against one of two interchangeable backends:

* ``symbolic``  - values are inert records; encryption wraps the plaintext
  object inside an opaque envelope and decryption checks key identity.
* ``concrete``  - values carry real key material; encryption is X25519
  ECIES with AES-GCM, symmetric encryption is AES-GCM, signing is Ed25519,
  hashing is SHA-256.

Both backends attach a knowledge term to every value they produce, assign
ids from the same counter sequence, and draw all randomness from the seeded
generator they are handed, so a run is reproducible bit-for-bit and the
emitted traces are identical across backends.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .terms import (
    ASYM,
    SYM,
    AddressTerm,
    DigestTerm,
    EncTerm,
    PrivateKeyTerm,
    PublicKeyTerm,
    SigningKeyTerm,
    SymKeyTerm,
    Term,
    TokenTerm,
    blob_term,
)


class CryptoError(Exception):
    pass


class KeyMismatch(CryptoError):
    """Decryption attempted with a key that does not fit the cypher."""


class SchemeMismatch(CryptoError):
    """Cypher handed to the wrong decryption primitive."""


class EmptyPlaintext(CryptoError):
    """Encryption of an empty message is refused."""


@dataclass(frozen=True)
class AsymPrivateKey:
    pair_id: str
    material: bytes | None = None

    @property
    def term(self) -> Term:
        return PrivateKeyTerm(self.pair_id)


@dataclass(frozen=True)
class AsymPublicKey:
    pair_id: str
    material: bytes | None = None

    @property
    def term(self) -> Term:
        return PublicKeyTerm(self.pair_id)


@dataclass(frozen=True)
class AsymKeyPair:
    pair_id: str
    private: AsymPrivateKey
    public: AsymPublicKey


@dataclass(frozen=True)
class SymKey:
    key_id: str
    material: bytes | None = None

    @property
    def term(self) -> Term:
        return SymKeyTerm(self.key_id)


@dataclass(frozen=True)
class SigningKey:
    bundle_id: str
    leg: str  # "user" or "server"
    material: bytes | None = None

    @property
    def term(self) -> Term:
        return SigningKeyTerm(self.bundle_id, self.leg)


@dataclass(frozen=True)
class VerifyKey:
    bundle_id: str
    leg: str
    material: bytes | None = None


@dataclass(frozen=True)
class Address:
    bundle_id: str
    value: str

    @property
    def term(self) -> Term:
        return AddressTerm(self.bundle_id)


@dataclass(frozen=True)
class MultiSigBundle:
    bundle_id: str
    sig_user: SigningKey
    sig_server: SigningKey
    verify_user: VerifyKey
    verify_server: VerifyKey
    address: Address


@dataclass
class Token:
    token_id: str
    material: bytes
    consumed: bool = False

    @property
    def term(self) -> Term:
        return TokenTerm(self.token_id)


@dataclass(frozen=True)
class Cypher:
    scheme: str  # ASYM or SYM
    payload: object  # bytes under concrete crypto, wrapped value otherwise
    term: EncTerm
    key_hint: str | None = None  # symbolic backend only

    def __hash__(self) -> int:
        return hash(self.term)


@dataclass(frozen=True)
class Digest:
    value: bytes  # 32 bytes in both backends
    term: DigestTerm


@dataclass(frozen=True)
class Signature:
    bundle_id: str
    leg: str
    value: bytes


def term_of(value: object) -> Term:
    term = getattr(value, "term", None)
    if isinstance(term, Term):
        return term
    if isinstance(value, (bytes, bytearray)):
        return blob_term(bytes(value))
    raise TypeError(f"no knowledge term for {value!r}")


# tags for the canonical byte encoding used by hashing, store digests and
# concrete encryption payloads
_TAG_RAW = b"RAW"
_TAG_SIG = b"SIG"
_TAG_TOK = b"TOK"
_TAG_SYM = b"SYM"
_TAG_PRV = b"PRV"


def _pack(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += len(f).to_bytes(4, "big") + f
    return bytes(out)


def _unpack(data: bytes) -> list[bytes]:
    fields = []
    i = 0
    while i < len(data):
        n = int.from_bytes(data[i : i + 4], "big")
        i += 4
        fields.append(data[i : i + n])
        i += n
    return fields


class CryptoBackend:
    """Shared id assignment and value plumbing for both backends."""

    name = "abstract"

    def __init__(self) -> None:
        self._counters: dict[str, int] = {}

    def _next_id(self, prefix: str) -> str:
        n = self._counters.get(prefix, 0) + 1
        self._counters[prefix] = n
        return f"{prefix}{n}"

    # -- generation ------------------------------------------------------

    def gen_asym_pair(self, rng: random.Random) -> AsymKeyPair:
        raise NotImplementedError

    def gen_sym_key(self, rng: random.Random) -> SymKey:
        raise NotImplementedError

    def gen_token(self, rng: random.Random) -> Token:
        return Token(self._next_id("tk"), rng.randbytes(16))

    def gen_multisig(self, rng: random.Random) -> MultiSigBundle:
        raise NotImplementedError

    # -- encryption ------------------------------------------------------

    def asym_encrypt(self, public: AsymPublicKey, value: object, rng: random.Random) -> Cypher:
        raise NotImplementedError

    def asym_decrypt(self, private: AsymPrivateKey, cypher: Cypher) -> object:
        raise NotImplementedError

    def sym_encrypt(self, key: SymKey, value: object, rng: random.Random) -> Cypher:
        raise NotImplementedError

    def sym_decrypt(self, key: SymKey, cypher: Cypher) -> object:
        raise NotImplementedError

    def matches(self, private: AsymPrivateKey, public: AsymPublicKey) -> bool:
        raise NotImplementedError

    # -- hashing and signing ---------------------------------------------

    def export_bytes(self, value: object) -> bytes:
        """Canonical byte encoding of a value, used for hashing and digests."""
        raise NotImplementedError

    def hash_value(self, value: object) -> Digest:
        data = self.export_bytes(value)
        return Digest(hashlib.sha256(data).digest(), DigestTerm(term_of(value)))

    def fingerprint(self, value: object) -> bytes:
        return hashlib.sha256(self.export_bytes(value)).digest()

    def sign(self, key: SigningKey, message: bytes) -> Signature:
        raise NotImplementedError

    def verify(self, key: VerifyKey, message: bytes, signature: Signature) -> bool:
        raise NotImplementedError

    def _address_material(self, ver: VerifyKey) -> bytes:
        raise NotImplementedError

    def verify_address(self, bundle: MultiSigBundle) -> bool:
        """Re-derive the bundle's address from its verification halves."""
        derived = _derive_address(
            self._address_material(bundle.verify_user),
            self._address_material(bundle.verify_server),
        )
        return derived == bundle.address.value

    # shared plaintext guard
    def _check_plaintext(self, value: object) -> None:
        if isinstance(value, (bytes, bytearray)) and len(value) == 0:
            raise EmptyPlaintext("refusing to encrypt an empty message")


class SymbolicBackend(CryptoBackend):
    """Structured-term cryptography: perfect, deterministic, material-free."""

    name = "symbolic"

    def gen_asym_pair(self, rng: random.Random) -> AsymKeyPair:
        pair_id = self._next_id("ak")
        return AsymKeyPair(pair_id, AsymPrivateKey(pair_id), AsymPublicKey(pair_id))

    def gen_sym_key(self, rng: random.Random) -> SymKey:
        return SymKey(self._next_id("sk"))

    def gen_multisig(self, rng: random.Random) -> MultiSigBundle:
        bundle_id = self._next_id("ms")
        sig_u = SigningKey(bundle_id, "user")
        sig_s = SigningKey(bundle_id, "server")
        ver_u = VerifyKey(bundle_id, "user")
        ver_s = VerifyKey(bundle_id, "server")
        addr = Address(bundle_id, _derive_address(repr(ver_u).encode(), repr(ver_s).encode()))
        return MultiSigBundle(bundle_id, sig_u, sig_s, ver_u, ver_s, addr)

    def _address_material(self, ver: VerifyKey) -> bytes:
        return repr(ver).encode()

    def asym_encrypt(self, public: AsymPublicKey, value: object, rng: random.Random) -> Cypher:
        self._check_plaintext(value)
        return Cypher(
            scheme=ASYM,
            payload=value,
            term=EncTerm(ASYM, public.pair_id, term_of(value)),
            key_hint=public.pair_id,
        )

    def asym_decrypt(self, private: AsymPrivateKey, cypher: Cypher) -> object:
        if cypher.scheme != ASYM:
            raise SchemeMismatch(f"expected {ASYM} cypher, got {cypher.scheme}")
        if cypher.term.key_id != private.pair_id:
            raise KeyMismatch(f"cypher is not addressed to {private.pair_id}")
        return cypher.payload

    def sym_encrypt(self, key: SymKey, value: object, rng: random.Random) -> Cypher:
        self._check_plaintext(value)
        return Cypher(
            scheme=SYM,
            payload=value,
            term=EncTerm(SYM, key.key_id, term_of(value)),
            key_hint=key.key_id,
        )

    def sym_decrypt(self, key: SymKey, cypher: Cypher) -> object:
        if cypher.scheme != SYM:
            raise SchemeMismatch(f"expected {SYM} cypher, got {cypher.scheme}")
        if cypher.term.key_id != key.key_id:
            raise KeyMismatch(f"cypher was not sealed under {key.key_id}")
        return cypher.payload

    def matches(self, private: AsymPrivateKey, public: AsymPublicKey) -> bool:
        return private.pair_id == public.pair_id

    def export_bytes(self, value: object) -> bytes:
        # canonical encoding of the term stands in for real material
        if isinstance(value, (bytes, bytearray)):
            return _pack(_TAG_RAW, bytes(value))
        return repr(term_of(value)).encode("utf-8")

    def sign(self, key: SigningKey, message: bytes) -> Signature:
        fp = hashlib.sha256(repr(key.term).encode() + message).digest()
        return Signature(key.bundle_id, key.leg, fp)

    def verify(self, key: VerifyKey, message: bytes, signature: Signature) -> bool:
        if (signature.bundle_id, signature.leg) != (key.bundle_id, key.leg):
            return False
        expected = hashlib.sha256(
            repr(SigningKeyTerm(key.bundle_id, key.leg)).encode() + message
        ).digest()
        return signature.value == expected


class ConcreteBackend(CryptoBackend):
    """Real primitives: X25519+AES-GCM, AES-GCM, Ed25519, SHA-256."""

    name = "concrete"
    _HKDF_INFO = b"cryptocubic.ecies.v1"

    def gen_asym_pair(self, rng: random.Random) -> AsymKeyPair:
        pair_id = self._next_id("ak")
        seed = rng.randbytes(32)
        priv = X25519PrivateKey.from_private_bytes(seed)
        pub = priv.public_key().public_bytes_raw()
        return AsymKeyPair(pair_id, AsymPrivateKey(pair_id, seed), AsymPublicKey(pair_id, pub))

    def gen_sym_key(self, rng: random.Random) -> SymKey:
        return SymKey(self._next_id("sk"), rng.randbytes(32))

    def gen_multisig(self, rng: random.Random) -> MultiSigBundle:
        bundle_id = self._next_id("ms")
        seed_u = rng.randbytes(32)
        seed_s = rng.randbytes(32)
        ver_u = Ed25519PrivateKey.from_private_bytes(seed_u).public_key().public_bytes_raw()
        ver_s = Ed25519PrivateKey.from_private_bytes(seed_s).public_key().public_bytes_raw()
        return MultiSigBundle(
            bundle_id,
            SigningKey(bundle_id, "user", seed_u),
            SigningKey(bundle_id, "server", seed_s),
            VerifyKey(bundle_id, "user", ver_u),
            VerifyKey(bundle_id, "server", ver_s),
            Address(bundle_id, _derive_address(ver_u, ver_s)),
        )

    def _address_material(self, ver: VerifyKey) -> bytes:
        return ver.material

    def _derive_aes_key(self, shared: bytes) -> bytes:
        return hashlib.sha256(self._HKDF_INFO + shared).digest()

    def asym_encrypt(self, public: AsymPublicKey, value: object, rng: random.Random) -> Cypher:
        self._check_plaintext(value)
        plaintext = self.export_bytes(value)
        eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public.material))
        nonce = rng.randbytes(12)
        ct = AESGCM(self._derive_aes_key(shared)).encrypt(nonce, plaintext, None)
        payload = eph.public_key().public_bytes_raw() + nonce + ct
        return Cypher(scheme=ASYM, payload=payload, term=EncTerm(ASYM, public.pair_id, term_of(value)))

    def asym_decrypt(self, private: AsymPrivateKey, cypher: Cypher) -> object:
        if cypher.scheme != ASYM:
            raise SchemeMismatch(f"expected {ASYM} cypher, got {cypher.scheme}")
        payload = cypher.payload
        eph_pub = X25519PublicKey.from_public_bytes(payload[:32])
        nonce = payload[32:44]
        shared = X25519PrivateKey.from_private_bytes(private.material).exchange(eph_pub)
        try:
            plaintext = AESGCM(self._derive_aes_key(shared)).decrypt(nonce, payload[44:], None)
        except InvalidTag as exc:
            raise KeyMismatch("authenticated decryption failed") from exc
        return self._import_value(plaintext)

    def sym_encrypt(self, key: SymKey, value: object, rng: random.Random) -> Cypher:
        self._check_plaintext(value)
        plaintext = self.export_bytes(value)
        nonce = rng.randbytes(12)
        ct = AESGCM(key.material).encrypt(nonce, plaintext, None)
        return Cypher(scheme=SYM, payload=nonce + ct, term=EncTerm(SYM, key.key_id, term_of(value)))

    def sym_decrypt(self, key: SymKey, cypher: Cypher) -> object:
        if cypher.scheme != SYM:
            raise SchemeMismatch(f"expected {SYM} cypher, got {cypher.scheme}")
        try:
            plaintext = AESGCM(key.material).decrypt(cypher.payload[:12], cypher.payload[12:], None)
        except InvalidTag as exc:
            raise KeyMismatch("authenticated decryption failed") from exc
        return self._import_value(plaintext)

    def matches(self, private: AsymPrivateKey, public: AsymPublicKey) -> bool:
        derived = X25519PrivateKey.from_private_bytes(private.material).public_key()
        return derived.public_bytes_raw() == public.material

    def export_bytes(self, value: object) -> bytes:
        if isinstance(value, (bytes, bytearray)):
            return _pack(_TAG_RAW, bytes(value))
        if isinstance(value, SigningKey):
            return _pack(_TAG_SIG, value.bundle_id.encode(), value.leg.encode(), value.material)
        if isinstance(value, Token):
            return _pack(_TAG_TOK, value.token_id.encode(), value.material)
        if isinstance(value, SymKey):
            return _pack(_TAG_SYM, value.key_id.encode(), value.material)
        if isinstance(value, AsymPrivateKey):
            return _pack(_TAG_PRV, value.pair_id.encode(), value.material)
        if isinstance(value, Cypher):
            return _pack(_TAG_RAW, bytes(value.payload))
        if isinstance(value, (Digest, Address)):
            val = value.value
            return _pack(_TAG_RAW, val if isinstance(val, bytes) else val.encode())
        raise TypeError(f"cannot encode {type(value).__name__} for transport")

    def _import_value(self, data: bytes) -> object:
        fields = _unpack(data)
        tag = fields[0]
        if tag == _TAG_RAW:
            return fields[1]
        if tag == _TAG_SIG:
            return SigningKey(fields[1].decode(), fields[2].decode(), fields[3])
        if tag == _TAG_TOK:
            return Token(fields[1].decode(), fields[2])
        if tag == _TAG_SYM:
            return SymKey(fields[1].decode(), fields[2])
        if tag == _TAG_PRV:
            return AsymPrivateKey(fields[1].decode(), fields[2])
        raise ValueError(f"unknown value tag {tag!r}")

    def sign(self, key: SigningKey, message: bytes) -> Signature:
        sig = Ed25519PrivateKey.from_private_bytes(key.material).sign(message)
        return Signature(key.bundle_id, key.leg, sig)

    def verify(self, key: VerifyKey, message: bytes, signature: Signature) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(key.material).verify(signature.value, message)
        except InvalidSignature:
            return False
        return True


def _derive_address(verify_user: bytes, verify_server: bytes) -> str:
    return hashlib.sha256(verify_user + b"|" + verify_server).hexdigest()[:40]


def get_backend(name: str) -> CryptoBackend:
    """Resolve a backend by name; raises ValueError for unknown names."""
    if name == "symbolic":
        return SymbolicBackend()
    if name == "concrete":
        return ConcreteBackend()
    raise ValueError(f"unknown backend: {name!r} (expected 'symbolic' or 'concrete')")
