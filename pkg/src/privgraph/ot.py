"""Oblivious transfer: a DDH-based semi-honest base OT plus an IKNP-style
extension, with a correlated variant over Z_{2^31} used by offline triple
generation and a message variant carrying 16-byte wire labels.

The extension sender (who holds message pairs) plays base-OT receiver with
its 128 secret selection bits; the extension receiver plays base-OT sender
with 128 seed pairs. Per extension index i the parties derive 16-byte pads
pad0/pad1 (sender) and pad_{b_i} (receiver).
"""

from __future__ import annotations

import hashlib
import secrets
import struct

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .crypto import GroupContext
from .transport import MSG, Channel, Frame

__all__ = ["OTSender", "OTReceiver", "OTError", "SHARE_MODULUS"]

SHARE_MODULUS = 1 << 31
KAPPA = 128  # base-OT count / extension matrix width


class OTError(Exception):
    pass


def _expand(seed: bytes, n: int) -> bytes:
    """Pseudorandom expansion of a 16-byte seed via AES-CTR."""
    enc = Cipher(algorithms.AES(seed), modes.CTR(bytes(16))).encryptor()
    return enc.update(bytes(n))


def _hash_point(ctx: GroupContext, index: int, point: int) -> bytes:
    return hashlib.sha256(struct.pack(">I", index) + ctx.encode(point)).digest()[:16]


def _hash_rows(rows: np.ndarray) -> list[bytes]:
    """Hash each 16-byte row with its index into a pad."""
    out = []
    raw = rows.tobytes()
    for i in range(len(rows)):
        out.append(hashlib.sha256(struct.pack(">Q", i) + raw[i * 16 : i * 16 + 16]).digest()[:16])
    return out


def _base_send(ctx: GroupContext, channel: Channel, session: int, pairs):
    """Base-OT sender: transfers one 16-byte message pair per instance."""
    a = 1 + secrets.randbelow(ctx.q - 1)
    big_a = ctx.g_exp(a)
    channel.send(Frame(MSG["OT_SETUP"], session, ctx.encode(big_a)))
    reply = channel.expect("OT_SETUP")
    inv_a_of_big_a = ctx.exp(ctx.inverse(big_a), a)  # A^{-a}
    cts = []
    for i, (m0, m1) in enumerate(pairs):
        b_point = ctx.decode(reply.payload[i * 32 : (i + 1) * 32])
        k0 = ctx.exp(b_point, a)
        k1 = ctx.mul(k0, inv_a_of_big_a)  # (B/A)^a
        pad0 = _hash_point(ctx, i, k0)
        pad1 = _hash_point(ctx, i, k1)
        cts.append(bytes(x ^ y for x, y in zip(m0, pad0)))
        cts.append(bytes(x ^ y for x, y in zip(m1, pad1)))
    channel.send(Frame(MSG["OT_SETUP"], session, b"".join(cts)))


def _base_recv(ctx: GroupContext, channel: Channel, session: int, bits) -> list[bytes]:
    """Base-OT receiver: obtains the message selected by each bit."""
    setup = channel.expect("OT_SETUP")
    big_a = ctx.decode(setup.payload)
    ks, points = [], []
    for bit in bits:
        k = 1 + secrets.randbelow(ctx.q - 1)
        point = ctx.g_exp(k)
        if bit:
            point = ctx.mul(point, big_a)
        ks.append(k)
        points.append(ctx.encode(point))
    channel.send(Frame(MSG["OT_SETUP"], session, b"".join(points)))
    cts = channel.expect("OT_SETUP").payload
    out = []
    for i, (bit, k) in enumerate(zip(bits, ks)):
        pad = _hash_point(ctx, i, ctx.exp(big_a, k))
        ct = cts[(2 * i + bit) * 16 : (2 * i + bit + 1) * 16]
        out.append(bytes(x ^ y for x, y in zip(ct, pad)))
    return out


class OTSender:
    """Extension sender: after setup, derives pad pairs for each transfer."""

    def __init__(self, ctx: GroupContext, channel: Channel, session: int = 0):
        self.ctx = ctx
        self.channel = channel
        self.session = session
        self._s_bits: list[int] | None = None
        self._seeds: list[bytes] | None = None

    def setup(self) -> None:
        self._s_bits = [secrets.randbelow(2) for _ in range(KAPPA)]
        self._seeds = _base_recv(self.ctx, self.channel, self.session, self._s_bits)
        s_arr = np.array(self._s_bits, dtype=np.uint8)
        self._s_bytes = np.frombuffer(np.packbits(s_arr).tobytes(), dtype=np.uint8)

    def pads(self, m: int) -> tuple[list[bytes], list[bytes]]:
        if self._seeds is None:
            raise OTError("setup not run")
        mb = (m + 7) // 8
        u = self.channel.expect("OT_EXTEND").payload
        if len(u) != KAPPA * mb:
            raise OTError("extension matrix size mismatch")
        u_mat = np.frombuffer(u, dtype=np.uint8).reshape(KAPPA, mb)
        q_mat = np.empty((KAPPA, mb), dtype=np.uint8)
        for j in range(KAPPA):
            col = np.frombuffer(_expand(self._seeds[j], mb), dtype=np.uint8)
            q_mat[j] = col ^ u_mat[j] if self._s_bits[j] else col
        rows = np.packbits(np.unpackbits(q_mat, axis=1).T[:m], axis=1)  # (m, 16)
        pads0 = _hash_rows(rows)
        pads1 = _hash_rows(rows ^ self._s_bytes)
        return pads0, pads1

    def send_messages(self, msgs0: list[bytes], msgs1: list[bytes]) -> None:
        """Transfer arbitrary 16-byte message pairs (wire labels)."""
        pads0, pads1 = self.pads(len(msgs0))
        parts = []
        for m0, m1, p0, p1 in zip(msgs0, msgs1, pads0, pads1):
            parts.append(bytes(x ^ y for x, y in zip(m0, p0)))
            parts.append(bytes(x ^ y for x, y in zip(m1, p1)))
        self.channel.send(Frame(MSG["OT_PAYLOAD"], self.session, b"".join(parts)))

    def send_correlated(self, deltas: list[int]) -> list[int]:
        """Correlated OT over Z_{2^31}: receiver with bit b learns
        v + b*delta; sender returns the v values. One correction word per
        instance is sent."""
        pads0, pads1 = self.pads(len(deltas))
        vs, corr = [], []
        for delta, p0, p1 in zip(deltas, pads0, pads1):
            v = int.from_bytes(p0, "big") % SHARE_MODULUS
            w1 = int.from_bytes(p1, "big") % SHARE_MODULUS
            corr.append(struct.pack(">I", (delta + v - w1) % SHARE_MODULUS))
            vs.append(v)
        self.channel.send(Frame(MSG["OT_PAYLOAD"], self.session, b"".join(corr)))
        return vs


class OTReceiver:
    """Extension receiver: after setup, obtains the pad selected by each
    choice bit."""

    def __init__(self, ctx: GroupContext, channel: Channel, session: int = 0):
        self.ctx = ctx
        self.channel = channel
        self.session = session
        self._seed_pairs: list[tuple[bytes, bytes]] | None = None

    def setup(self) -> None:
        self._seed_pairs = [
            (secrets.token_bytes(16), secrets.token_bytes(16)) for _ in range(KAPPA)
        ]
        _base_send(self.ctx, self.channel, self.session, self._seed_pairs)

    def pads(self, bits: list[int]) -> list[bytes]:
        if self._seed_pairs is None:
            raise OTError("setup not run")
        m = len(bits)
        mb = (m + 7) // 8
        r_bytes = np.packbits(np.array(bits, dtype=np.uint8))
        r_bytes = np.pad(r_bytes, (0, mb - len(r_bytes)))
        t_mat = np.empty((KAPPA, mb), dtype=np.uint8)
        u_rows = []
        for j, (k0, k1) in enumerate(self._seed_pairs):
            t_mat[j] = np.frombuffer(_expand(k0, mb), dtype=np.uint8)
            g1 = np.frombuffer(_expand(k1, mb), dtype=np.uint8)
            u_rows.append((t_mat[j] ^ g1 ^ r_bytes).tobytes())
        self.channel.send(Frame(MSG["OT_EXTEND"], self.session, b"".join(u_rows)))
        rows = np.packbits(np.unpackbits(t_mat, axis=1).T[:m], axis=1)
        return _hash_rows(rows)

    def recv_messages(self, bits: list[int]) -> list[bytes]:
        pads = self.pads(bits)
        cts = self.channel.expect("OT_PAYLOAD").payload
        out = []
        for i, (bit, pad) in enumerate(zip(bits, pads)):
            ct = cts[(2 * i + bit) * 16 : (2 * i + bit + 1) * 16]
            out.append(bytes(x ^ y for x, y in zip(ct, pad)))
        return out

    def recv_correlated(self, bits: list[int]) -> list[int]:
        pads = self.pads(bits)
        corr = self.channel.expect("OT_PAYLOAD").payload
        out = []
        for i, (bit, pad) in enumerate(zip(bits, pads)):
            w = int.from_bytes(pad, "big") % SHARE_MODULUS
            if bit:
                (u,) = struct.unpack(">I", corr[i * 4 : (i + 1) * 4])
                w = (w + u) % SHARE_MODULUS
            out.append(w)
        return out
