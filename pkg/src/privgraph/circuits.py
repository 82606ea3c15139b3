"""Boolean circuits for the sorting protocols: a gate-level builder, the
31-bit modular adder used for additive-to-Yao conversion, the unsigned
comparator, the data-oblivious bitonic sorting network, and a vectorised
plaintext simulator that serves as the oracle for garbled evaluation.

Gate list is topologically ordered by construction. XOR and INV are free
under the garbling scheme; only AND gates cost garbled-table rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SCORE_BITS",
    "Circuit",
    "CircuitBuilder",
    "SortCircuit",
    "bitonic_schedule",
    "comparator_count",
    "build_sort_circuit",
    "simulate",
    "int_to_bits",
    "bits_to_int",
]

SCORE_BITS = 31
MAX_SORT_K = 1024

XOR, AND, INV = 0, 1, 2


@dataclass
class Circuit:
    n_wires: int
    gates: list  # (op, a, b, out); b == -1 for INV
    inputs: dict  # bundle name -> list of wire ids
    outputs: list  # output wire ids in decode order

    @property
    def and_count(self) -> int:
        return sum(1 for g in self.gates if g[0] == AND)

    def input_order(self) -> list[str]:
        return list(self.inputs)


class CircuitBuilder:
    def __init__(self):
        self._n = 0
        self.gates: list = []
        self.inputs: dict[str, list[int]] = {}
        self.outputs: list[int] = []

    def _wire(self) -> int:
        w = self._n
        self._n += 1
        return w

    def input_bundle(self, name: str, n_bits: int) -> list[int]:
        if name in self.inputs:
            raise ValueError(f"duplicate input bundle {name!r}")
        wires = [self._wire() for _ in range(n_bits)]
        self.inputs[name] = wires
        return wires

    def xor(self, a: int, b: int) -> int:
        out = self._wire()
        self.gates.append((XOR, a, b, out))
        return out

    def and_(self, a: int, b: int) -> int:
        out = self._wire()
        self.gates.append((AND, a, b, out))
        return out

    def inv(self, a: int) -> int:
        out = self._wire()
        self.gates.append((INV, a, -1, out))
        return out

    def add_mod(self, a_bits: list[int], b_bits: list[int]) -> list[int]:
        """Ripple-carry addition, dropping the final carry (mod 2^width).
        Carry recurrence c' = c XOR ((a XOR c) AND (b XOR c)): one AND per
        bit except the last."""
        if len(a_bits) != len(b_bits):
            raise ValueError("adder width mismatch")
        width = len(a_bits)
        out = [self.xor(a_bits[0], b_bits[0])]
        carry = self.and_(a_bits[0], b_bits[0])
        for i in range(1, width):
            out.append(self.xor(self.xor(a_bits[i], b_bits[i]), carry))
            if i < width - 1:
                carry = self.xor(
                    carry,
                    self.and_(
                        self.xor(a_bits[i], carry), self.xor(b_bits[i], carry)
                    ),
                )
        return out

    def less_than(self, a_bits: list[int], b_bits: list[int]) -> int:
        """Unsigned a < b: the complement of the carry out of a + ~b + 1.
        One AND per bit."""
        if len(a_bits) != len(b_bits):
            raise ValueError("comparator width mismatch")
        # carry into bit 1 with c0 = 1: maj(a0, ~b0, 1) = a0 OR ~b0
        carry = self.inv(self.and_(self.inv(a_bits[0]), b_bits[0]))
        for i in range(1, len(a_bits)):
            # maj(a_i, ~b_i, c) = c XOR ((a_i XOR c) AND (~b_i XOR c))
            nb_x_c = self.inv(self.xor(b_bits[i], carry))
            carry = self.xor(carry, self.and_(self.xor(a_bits[i], carry), nb_x_c))
        return self.inv(carry)

    def cond_swap(self, s: int, a_bits: list[int], b_bits: list[int]):
        """If s then exchange the two bit vectors. One AND per bit."""
        hi, lo = [], []
        for a, b in zip(a_bits, b_bits):
            d = self.and_(s, self.xor(a, b))
            hi.append(self.xor(a, d))
            lo.append(self.xor(b, d))
        return hi, lo

    def mark_outputs(self, wires: list[int]) -> None:
        self.outputs.extend(wires)

    def build(self) -> Circuit:
        return Circuit(self._n, self.gates, self.inputs, self.outputs)


def bitonic_schedule(n: int) -> list[tuple[int, int, bool]]:
    """Comparator schedule (i, l, descending_at_i) of the bitonic sorter
    for n = 2^m elements. Depends only on n, never on data."""
    if n & (n - 1) or n < 1:
        raise ValueError("bitonic network needs a power-of-two size")
    schedule = []
    k = 2
    while k <= n:
        j = k // 2
        while j > 0:
            for i in range(n):
                l = i ^ j
                if l > i:
                    # invert the classic direction flag for a descending sort
                    schedule.append((i, l, (i & k) == 0))
            j //= 2
        k *= 2
    return schedule


def comparator_count(n: int) -> int:
    m = n.bit_length() - 1
    return n * m * (m + 1) // 4


@dataclass
class SortCircuit:
    """A sort network circuit over padded length n: per-element score
    reconstruction from two additive-share bundles, bitonic descending
    sort carrying payload bits, and a final XOR mask on every score."""

    circuit: Circuit
    k: int  # requested (real) length
    n: int  # padded power-of-two length
    payload_width: int
    field_names: tuple = ("garbler_shares", "evaluator_shares", "payloads", "mask")

    @property
    def and_count(self) -> int:
        return self.circuit.and_count

    def decode_outputs(self, bits: np.ndarray):
        """Split a decoded output bit row into (masked scores, payloads)."""
        width = SCORE_BITS + self.payload_width
        scores, payloads = [], []
        for e in range(self.n):
            chunk = bits[e * width : (e + 1) * width]
            scores.append(bits_to_int(chunk[:SCORE_BITS]))
            payloads.append(bits_to_int(chunk[SCORE_BITS:]))
        return scores, payloads


def build_sort_circuit(k: int, payload_width: int, max_k: int = MAX_SORT_K) -> SortCircuit:
    if k < 1:
        raise ValueError("sort length must be >= 1")
    if k > max_k:
        raise ValueError(
            f"sort length {k} exceeds the configured max {max_k}; truncate the "
            "inputs before sorting"
        )
    n = 1 << (k - 1).bit_length() if k > 1 else 1
    b = CircuitBuilder()
    g_shares = b.input_bundle("garbler_shares", n * SCORE_BITS)
    e_shares = b.input_bundle("evaluator_shares", n * SCORE_BITS)
    payloads = b.input_bundle("payloads", n * payload_width)
    mask = b.input_bundle("mask", SCORE_BITS)

    elems = []
    for e in range(n):
        score = b.add_mod(
            g_shares[e * SCORE_BITS : (e + 1) * SCORE_BITS],
            e_shares[e * SCORE_BITS : (e + 1) * SCORE_BITS],
        )
        payload = payloads[e * payload_width : (e + 1) * payload_width]
        elems.append((score, payload))

    for i, l, descending_here in bitonic_schedule(n):
        si, pi = elems[i]
        sl, pl = elems[l]
        if descending_here:
            swap = b.less_than(si, sl)  # larger score moves to position i
        else:
            swap = b.less_than(sl, si)
        data_i, data_l = si + pi, sl + pl
        new_i, new_l = b.cond_swap(swap, data_i, data_l)
        elems[i] = (new_i[:SCORE_BITS], new_i[SCORE_BITS:])
        elems[l] = (new_l[:SCORE_BITS], new_l[SCORE_BITS:])

    for score, payload in elems:
        masked = [b.xor(s, m) for s, m in zip(score, mask)]
        b.mark_outputs(masked + payload)
    return SortCircuit(b.build(), k, n, payload_width)


def int_to_bits(value: int, n_bits: int) -> list[int]:
    return [(value >> i) & 1 for i in range(n_bits)]


def bits_to_int(bits) -> int:
    return sum(int(b) << i for i, b in enumerate(bits))


def simulate(circuit: Circuit, inputs: dict[str, np.ndarray]) -> np.ndarray:
    """Plaintext evaluation over a batch: inputs are boolean arrays of
    shape (batch, n_bits) per bundle; returns (batch, n_outputs)."""
    batches = {a.shape[0] for a in inputs.values()}
    if len(batches) != 1:
        raise ValueError("all input bundles need the same batch size")
    (batch,) = batches
    wires: list = [None] * circuit.n_wires
    for name, wire_ids in circuit.inputs.items():
        arr = np.asarray(inputs[name], dtype=bool)
        if arr.shape[1] != len(wire_ids):
            raise ValueError(f"bundle {name!r} expects {len(wire_ids)} bits")
        for j, w in enumerate(wire_ids):
            wires[w] = arr[:, j]
    for op, a, bb, out in circuit.gates:
        if op == XOR:
            wires[out] = wires[a] ^ wires[bb]
        elif op == AND:
            wires[out] = wires[a] & wires[bb]
        else:
            wires[out] = ~wires[a]
    return np.stack([wires[w] for w in circuit.outputs], axis=1)
