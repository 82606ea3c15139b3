"""Garbling scheme for the sort circuits: free-XOR with point-and-permute.

Wire labels are 16-byte strings; the two labels of a wire differ by a
circuit-global offset delta whose low bit is 1, so the label's low bit
serves as the permute bit. XOR and INV gates are free; each AND gate
costs a 4-row table. The row hash is a fixed-key AES construction
H(Ka, Kb, gid) = E(t) ^ t with t = 2*Ka ^ 4*Kb ^ gid, batched into single
AES-ECB calls for throughput.
"""

from __future__ import annotations

import secrets
import struct

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .circuits import AND, INV, XOR, Circuit

__all__ = ["GarbledCircuit", "GarbleError", "garble", "select_labels", "evaluate", "decode"]

_HASH_KEY = b"privgraph-gc-key"


class GarbleError(Exception):
    pass


def _aes_ecb(buf: bytes) -> bytes:
    enc = Cipher(algorithms.AES(_HASH_KEY), modes.ECB()).encryptor()
    return enc.update(buf)


def _gf_double(arr: np.ndarray) -> np.ndarray:
    """Multiplication by x in GF(2^128), big-endian byte order."""
    shifted = ((arr.astype(np.uint16) << 1) & 0xFF).astype(np.uint8)
    shifted[..., :-1] |= arr[..., 1:] >> 7
    shifted[..., -1] ^= (arr[..., 0] >> 7) * 0x87
    return shifted


def _hash_rows(ka: np.ndarray, kb: np.ndarray, gids: np.ndarray) -> np.ndarray:
    """H over stacked label rows: shapes (m, 16) -> (m, 16)."""
    t = _gf_double(ka) ^ _gf_double(_gf_double(kb)) ^ gids
    out = np.frombuffer(_aes_ecb(t.tobytes()), dtype=np.uint8).reshape(t.shape)
    return out ^ t


def _gid_block(gid: int) -> np.ndarray:
    return np.frombuffer(struct.pack(">QQ", 0, gid), dtype=np.uint8)


class GarbledCircuit:
    """The garbler's output: AND tables in gate order plus the decode bits
    for the circuit's output wires."""

    def __init__(self, tables: np.ndarray, dec: np.ndarray):
        self.tables = tables  # (n_ands, 4, 16) uint8
        self.dec = dec  # (n_outputs,) uint8

    @property
    def and_count(self) -> int:
        return len(self.tables)

    def to_bytes(self) -> bytes:
        return (
            struct.pack(">4sII", b"PGGC", len(self.tables), len(self.dec))
            + self.tables.tobytes()
            + np.packbits(self.dec).tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "GarbledCircuit":
        magic, n_ands, n_out = struct.unpack(">4sII", data[:12])
        if magic != b"PGGC":
            raise GarbleError("not a garbled-circuit blob")
        off = 12
        tables = np.frombuffer(
            data[off : off + n_ands * 64], dtype=np.uint8
        ).reshape(n_ands, 4, 16)
        off += n_ands * 64
        dec = np.unpackbits(np.frombuffer(data[off:], dtype=np.uint8))[:n_out]
        return cls(tables.copy(), dec.copy())


def garble(circuit: Circuit, rng=None):
    """Garble a circuit. Returns (GarbledCircuit, input label map, delta)
    where the label map gives each input bundle's zero-labels."""
    token = rng if rng is not None else secrets.token_bytes
    delta = np.frombuffer(token(16), dtype=np.uint8).copy()
    delta[15] |= 1  # permute bit of the offset

    w0 = np.zeros((circuit.n_wires, 16), dtype=np.uint8)
    for wires in circuit.inputs.values():
        for w in wires:
            w0[w] = np.frombuffer(token(16), dtype=np.uint8)

    and_gates = []
    for op, a, b, out in circuit.gates:
        if op == XOR:
            w0[out] = w0[a] ^ w0[b]
        elif op == INV:
            w0[out] = w0[a] ^ delta
        else:
            w0[out] = np.frombuffer(token(16), dtype=np.uint8)
            and_gates.append((a, b, out))

    # All labels are fixed; hash every AND-table row in one batch.
    n = len(and_gates)
    tables = np.zeros((n, 4, 16), dtype=np.uint8)
    if n:
        ka = np.zeros((n, 4, 16), dtype=np.uint8)
        kb = np.zeros((n, 4, 16), dtype=np.uint8)
        gids = np.zeros((n, 4, 16), dtype=np.uint8)
        plain = np.zeros((n, 4, 16), dtype=np.uint8)
        rows = np.zeros(n, dtype=np.int64)
        for g, (a, b, out) in enumerate(and_gates):
            gids[g, :] = _gid_block(g)
            for va in (0, 1):
                for vb in (0, 1):
                    la = w0[a] ^ (va * delta)
                    lb = w0[b] ^ (vb * delta)
                    idx = (la[15] & 1) | ((lb[15] & 1) << 1)
                    ka[g, idx] = la
                    kb[g, idx] = lb
                    plain[g, idx] = w0[out] ^ ((va & vb) * delta)
        h = _hash_rows(ka.reshape(-1, 16), kb.reshape(-1, 16), gids.reshape(-1, 16))
        tables = h.reshape(n, 4, 16) ^ plain
    dec = np.array([w0[o, 15] & 1 for o in circuit.outputs], dtype=np.uint8)
    label_map = {
        name: w0[np.array(wires)] for name, wires in circuit.inputs.items()
    }
    return GarbledCircuit(tables, dec), label_map, delta


def select_labels(zero_labels: np.ndarray, delta: np.ndarray, bits) -> np.ndarray:
    """Pick the labels encoding the given bit values. Accepts a single bit
    vector (n,) or a batch (batch, n); returns labels with a batch axis."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    return zero_labels[None, :, :] ^ (bits[:, :, None] * delta[None, None, :])


def _last_uses(circuit: Circuit) -> list[int]:
    last = [len(circuit.gates)] * circuit.n_wires
    for g, (op, a, b, out) in enumerate(circuit.gates):
        last[a] = g
        if b >= 0:
            last[b] = g
    for o in circuit.outputs:
        last[o] = len(circuit.gates)
    return last


def evaluate(circuit: Circuit, gc: GarbledCircuit, input_labels: dict) -> np.ndarray:
    """Evaluate garbled gates over a batch of input label sets.

    input_labels maps bundle name -> (batch, n_bits, 16) uint8. Returns the
    output labels as (batch, n_outputs, 16). The evaluator sees exactly one
    label per wire; labels of dead wires are dropped eagerly to bound
    memory on large sort circuits.
    """
    batches = {a.shape[0] for a in input_labels.values()}
    if len(batches) != 1:
        raise GarbleError("all label bundles need the same batch size")
    (batch,) = batches
    wires: list = [None] * circuit.n_wires
    for name, wire_ids in circuit.inputs.items():
        arr = input_labels[name]
        if arr.shape[1] != len(wire_ids):
            raise GarbleError(f"bundle {name!r} expects {len(wire_ids)} labels")
        for j, w in enumerate(wire_ids):
            wires[w] = arr[:, j]
    last = _last_uses(circuit)
    gid = 0
    for g, (op, a, b, out) in enumerate(circuit.gates):
        if op == XOR:
            wires[out] = wires[a] ^ wires[b]
        elif op == INV:
            wires[out] = wires[a]
        else:
            la, lb = wires[a], wires[b]
            h = _hash_rows(la, lb, np.broadcast_to(_gid_block(gid), (batch, 16)))
            idx = (la[:, 15] & 1) | ((lb[:, 15] & 1) << 1)
            wires[out] = h ^ gc.tables[gid][idx]
            gid += 1
        if last[a] == g:
            wires[a] = None
        if b >= 0 and last[b] == g:
            wires[b] = None
    return np.stack([wires[w] for w in circuit.outputs], axis=1)


def decode(gc: GarbledCircuit, output_labels: np.ndarray) -> np.ndarray:
    """Map output labels to plaintext bits via the decode table."""
    return (output_labels[:, :, 15] & 1) ^ gc.dec[None, :]
