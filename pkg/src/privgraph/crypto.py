"""Deterministic cryptographic primitives shared by the builder, the
front-end, and the index servers: PRFs, group exponentiation, per-term
keys, identifier encryption, and shard hashing.

Everything here is a pure function of its inputs once the master keys are
fixed, so it is safe to call concurrently from any number of sessions.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.cmac import CMAC
from cryptography.hazmat.primitives.ciphers import algorithms

__all__ = [
    "GroupContext",
    "MasterKeyBundle",
    "DecryptError",
    "TermError",
    "prf128",
    "prf_exp",
    "stag_derive",
    "xtag_compute",
    "xtoken_compute",
    "blinding_value",
    "term_key",
    "encrypt_id",
    "decrypt_id",
    "hash_to_shard",
    "parse_term",
    "save_keystore",
    "load_keystore",
]

# 256-bit safe prime p = 2q + 1; g = 4 generates the order-q subgroup of
# quadratic residues, which is a DDH-hard group at this size.
_P = 0xE7E29E4580E8D316E042F3B524116998E03E693F404BAC69C94EAC22D7E7842B
_Q = 0x73F14F22C074698B702179DA9208B4CC701F349FA025D634E4A756116BF3C215
_G = 4

ELEMENT_BYTES = 32
KEY_BYTES = 16


class TermError(ValueError):
    """Raised for malformed indexing terms."""


class DecryptError(Exception):
    """Raised when authenticated decryption of an entity id fails."""


def parse_term(term: str) -> tuple[str, int]:
    """Split ``edge-type:id`` into its components, validating the shape."""
    if ":" not in term:
        raise TermError(f"malformed indexing term {term!r}: expected 'edge-type:id'")
    edge_type, _, id_text = term.rpartition(":")
    if not edge_type:
        raise TermError(f"malformed indexing term {term!r}: empty edge type")
    try:
        entity_id = int(id_text)
    except ValueError:
        raise TermError(f"malformed indexing term {term!r}: id is not an integer") from None
    if entity_id < 0 or entity_id >= 1 << 64:
        raise TermError(f"malformed indexing term {term!r}: id out of u64 range")
    return edge_type, entity_id


class GroupContext:
    """A cyclic group of prime order q inside Z_p*.

    Elements are canonically encoded as fixed-length 32-byte big-endian
    integers.  The instance counts exponentiations so that tests can
    assert the work-independence law of boolean queries.
    """

    def __init__(self):
        self.p = _P
        self.q = _Q
        self.g = _G
        self.exp_count = 0

    def exp(self, base: int, e: int) -> int:
        self.exp_count += 1
        return pow(base, e, self.p)

    def g_exp(self, e: int) -> int:
        return self.exp(self.g, e)

    def mul(self, a: int, b: int) -> int:
        return a * b % self.p

    def inverse(self, elem: int) -> int:
        return pow(elem, -1, self.p)

    def inv_exponent(self, e: int) -> int:
        return pow(e, -1, self.q)

    def encode(self, elem: int) -> bytes:
        return elem.to_bytes(ELEMENT_BYTES, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != ELEMENT_BYTES:
            raise ValueError(f"group element must be {ELEMENT_BYTES} bytes")
        elem = int.from_bytes(data, "big")
        if not 1 <= elem < self.p:
            raise ValueError("encoding is not a valid group element")
        return elem

    def reset_counter(self) -> None:
        self.exp_count = 0


@dataclass(frozen=True)
class MasterKeyBundle:
    """The front-end's secret keys.  Never shipped to any index server."""

    k_stag: bytes
    k_x: bytes
    k_i: bytes
    k_z: bytes
    k_enc: bytes

    def __post_init__(self):
        for name in ("k_stag", "k_x", "k_i", "k_z", "k_enc"):
            if len(getattr(self, name)) != KEY_BYTES:
                raise ValueError(f"{name} must be {KEY_BYTES} bytes")

    @classmethod
    def generate(cls, rng=os.urandom) -> "MasterKeyBundle":
        return cls(*(rng(KEY_BYTES) for _ in range(5)))


def prf128(key: bytes, data: bytes) -> bytes:
    """AES-CMAC, the 128-bit PRF underlying all token derivations."""
    mac = CMAC(algorithms.AES(key))
    mac.update(data)
    return mac.finalize()


def prf_exp(key: bytes, data: bytes) -> int:
    """PRF into the nonzero exponent group Z_q* by rejection sampling.

    Two CMAC blocks give 256 candidate bits per draw; the loop terminates
    after ~2 draws in expectation since q is a 255-bit prime.
    """
    if not data:
        raise ValueError("prf_exp input must be nonempty")
    ctr = 0
    while True:
        block = prf128(key, data + struct.pack(">I", ctr)) + prf128(
            key, data + struct.pack(">I", ctr + 1)
        )
        candidate = int.from_bytes(block, "big") >> 1  # 255 bits
        if 0 < candidate < _Q:
            return candidate
        ctr += 2


def stag_derive(keys: MasterKeyBundle, term: str) -> bytes:
    """The search tag identifying a posting list: PRF(k_stag, term)."""
    parse_term(term)
    return prf128(keys.k_stag, term.encode())


def xtag_compute(keys: MasterKeyBundle, ctx: GroupContext, term: str, entity_id: int) -> int:
    """g^(F(k_x, term) * F(k_i, id)), the edge-membership tag in the XSet."""
    x_t = prf_exp(keys.k_x, term.encode())
    x_id = prf_exp(keys.k_i, struct.pack(">Q", entity_id))
    return ctx.g_exp(x_t * x_id % ctx.q)

def xtoken_compute(
    keys: MasterKeyBundle, ctx: GroupContext, s_term: str, counter: int, x_term: str
) -> int:
    """Per-tuple intersection token: g^(F(k_z, s_term||c) * F(k_x, x_term)).

    Raised to the tuple's blinding value y_c by the server it yields the
    candidate xtag for (x_term, id_c).
    """
    if counter < 1:
        raise ValueError("tuple counter starts at 1")
    z_c = prf_exp(keys.k_z, s_term.encode() + struct.pack(">Q", counter))
    x_t = prf_exp(keys.k_x, x_term.encode())
    return ctx.g_exp(z_c * x_t % ctx.q)


def blinding_value(
    keys: MasterKeyBundle, ctx: GroupContext, s_term: str, counter: int, entity_id: int
) -> int:
    """The per-tuple blinding exponent y_c = F(k_i, id) * F(k_z, t||c)^-1 mod q."""
    x_id = prf_exp(keys.k_i, struct.pack(">Q", entity_id))
    z_c = prf_exp(keys.k_z, s_term.encode() + struct.pack(">Q", counter))
    return x_id * ctx.inv_exponent(z_c) % ctx.q


def term_key(keys: MasterKeyBundle, term: str) -> bytes:
    """Per-term encryption key K_t, derived on demand from k_enc."""
    return prf128(keys.k_enc, term.encode())


# AESGCM nonce (12) + 8-byte id + 16-byte tag.
CIPHERTEXT_BYTES = 36


def encrypt_id(key: bytes, entity_id: int, rng=os.urandom) -> bytes:
    """Randomised authenticated encryption of an entity id under K_t."""
    nonce = rng(12)
    return nonce + AESGCM(key).encrypt(nonce, struct.pack(">Q", entity_id), b"")


def decrypt_id(key: bytes, ciphertext: bytes) -> int:
    if len(ciphertext) != CIPHERTEXT_BYTES:
        raise DecryptError("ciphertext has wrong length")
    try:
        plain = AESGCM(key).decrypt(ciphertext[:12], ciphertext[12:], b"")
    except InvalidTag:
        raise DecryptError("authentication failed (wrong key or tampered ciphertext)") from None
    return struct.unpack(">Q", plain)[0]


def hash_to_shard(entity_id: int, shard_count: int, hash_name: str = "sha256") -> int:
    """Stable id -> shard mapping, identical in both clusters.

    ``hash_name='identity'`` is a test hook that makes partition examples
    analytically checkable.
    """
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    if hash_name == "identity":
        return entity_id % shard_count
    if hash_name == "sha256":
        digest = hashlib.sha256(struct.pack(">Q", entity_id)).digest()
        return int.from_bytes(digest[:8], "big") % shard_count
    raise ValueError(f"unknown shard hash {hash_name!r}")


_KEYSTORE_MAGIC = b"PGKS"
_KEYSTORE_VERSION = 1


def save_keystore(keys: MasterKeyBundle, path) -> None:
    """Binary keystore: magic, version, five length-prefixed keys."""
    parts = [_KEYSTORE_MAGIC, struct.pack(">H", _KEYSTORE_VERSION)]
    for k in (keys.k_stag, keys.k_x, keys.k_i, keys.k_z, keys.k_enc):
        parts.append(struct.pack(">H", len(k)))
        parts.append(k)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_keystore(path) -> MasterKeyBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _KEYSTORE_MAGIC:
        raise ValueError("not a keystore file")
    version = struct.unpack(">H", data[4:6])[0]
    if version != _KEYSTORE_VERSION:
        raise ValueError(f"unsupported keystore version {version}")
    off = 6
    keys = []
    for _ in range(5):
        (length,) = struct.unpack(">H", data[off : off + 2])
        off += 2
        keys.append(data[off : off + length])
        off += length
    return MasterKeyBundle(*keys)
