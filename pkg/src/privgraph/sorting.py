"""The two garbled-sort protocols between counterpart servers.

Local sort (per shard): the cluster-0 server garbles, the cluster-1
server evaluates. The circuit reconstructs each score from the two
additive shares, sorts descending, and XORs a session mask R into every
output score; the evaluator learns the payload order and masked scores
only, the garbler keeps R.

Global sort (coordinators, roles switched): the cluster-1 coordinator
garbles over all shards' masked vectors; the cluster-0 coordinator feeds
the masks in by OT, evaluates, and decodes the global payload order
without ever seeing a score.

Payload values are 1-based on the wire; 0 marks padding sentinels.
"""

from __future__ import annotations

import functools
import secrets
import struct

import numpy as np

from .circuits import (
    SCORE_BITS,
    CircuitBuilder,
    SortCircuit,
    bitonic_schedule,
    bits_to_int,
    build_sort_circuit,
    int_to_bits,
)
from .crypto import GroupContext
from .garble import GarbledCircuit, decode, evaluate, garble, select_labels
from .ot import OTReceiver, OTSender
from .transport import MSG, Channel, Frame

__all__ = [
    "SortError",
    "build_merge_circuit",
    "local_sort_garbler",
    "local_sort_evaluator",
    "global_sort_garbler",
    "global_sort_evaluator",
]

SHARE_MODULUS = 1 << 31


class SortError(Exception):
    pass


@functools.lru_cache(maxsize=32)
def _sort_circuit(k: int, payload_width: int, max_k: int) -> SortCircuit:
    return build_sort_circuit(k, payload_width, max_k)


@functools.lru_cache(maxsize=32)
def build_merge_circuit(k: int, payload_width: int, max_k: int = 1024) -> SortCircuit:
    """Global-sort circuit: per element, unmask score = masked XOR mask
    (free), bitonic descending sort, output payload bits only."""
    if k < 1:
        raise ValueError("sort length must be >= 1")
    if k > max_k:
        raise ValueError(f"sort length {k} exceeds the configured max {max_k}")
    n = 1 << (k - 1).bit_length() if k > 1 else 1
    b = CircuitBuilder()
    masked = b.input_bundle("masked_scores", n * SCORE_BITS)
    masks = b.input_bundle("masks", n * SCORE_BITS)
    payloads = b.input_bundle("payloads", n * payload_width)
    elems = []
    for e in range(n):
        score = [
            b.xor(masked[e * SCORE_BITS + i], masks[e * SCORE_BITS + i])
            for i in range(SCORE_BITS)
        ]
        elems.append((score, payloads[e * payload_width : (e + 1) * payload_width]))
    for i, l, descending_here in bitonic_schedule(n):
        si, pi = elems[i]
        sl, pl = elems[l]
        swap = b.less_than(si, sl) if descending_here else b.less_than(sl, si)
        new_i, new_l = b.cond_swap(swap, si + pi, sl + pl)
        elems[i] = (new_i[:SCORE_BITS], new_i[SCORE_BITS:])
        elems[l] = (new_l[:SCORE_BITS], new_l[SCORE_BITS:])
    for _, payload in elems:
        b.mark_outputs(payload)
    return SortCircuit(b.build(), k, n, payload_width)


def _share_bits(shares: list[int], n: int) -> list[int]:
    bits = []
    for e in range(n):
        value = shares[e] if e < len(shares) else 0
        bits.extend(int_to_bits(value, SCORE_BITS))
    return bits


def _labels_frame(arr: np.ndarray) -> bytes:
    return arr.tobytes()


def _labels_from(payload: bytes, n_bits: int) -> np.ndarray:
    return np.frombuffer(payload, dtype=np.uint8).reshape(1, n_bits, 16)


def local_sort_garbler(
    channel: Channel,
    session: int,
    shares: list[int],
    ctx: GroupContext,
    rng=None,
    max_k: int = 1024,
) -> int:
    """Garbler (cluster 0) side of a local sort. Returns the mask R."""
    token = rng if rng is not None else secrets.token_bytes
    k = len(shares)
    if k < 1:
        raise SortError("nothing to sort")
    payload_width = max(k.bit_length(), 1)
    sc = _sort_circuit(k, payload_width, max_k)
    channel.send(
        Frame(MSG["SORT_INIT"], session, struct.pack(">IIH", k, sc.n, payload_width))
    )
    gc, label_map, delta = garble(sc.circuit, token)
    channel.send(Frame(MSG["CIRCUIT_BLOB"], session, gc.to_bytes()))

    g_bits = _share_bits(shares, sc.n)
    p_bits = []
    for e in range(sc.n):
        p_bits.extend(int_to_bits(e + 1 if e < k else 0, payload_width))
    g_labels = select_labels(label_map["garbler_shares"], delta, g_bits)[0]
    p_labels = select_labels(label_map["payloads"], delta, p_bits)[0]
    channel.send(
        Frame(
            MSG["GARBLER_LABELS"],
            session,
            _labels_frame(g_labels) + _labels_frame(p_labels),
        )
    )
    mask = int.from_bytes(token(4), "big") % SHARE_MODULUS
    m_labels = select_labels(label_map["mask"], delta, int_to_bits(mask, SCORE_BITS))[0]
    channel.send(Frame(MSG["MASK_LABELS"], session, _labels_frame(m_labels)))

    zero = label_map["evaluator_shares"]
    one = zero ^ delta
    sender = OTSender(ctx, channel, session)
    sender.setup()
    sender.send_messages([bytes(z) for z in zero], [bytes(o) for o in one])
    return mask


def local_sort_evaluator(
    channel: Channel,
    session: int,
    shares: list[int],
    ctx: GroupContext,
    max_k: int = 1024,
) -> tuple[list[int], list[int]]:
    """Evaluator (cluster 1) side. Returns (masked scores, payload order),
    both descending by true score, sentinels dropped, payloads 0-based."""
    init = channel.expect("SORT_INIT")
    k, n, payload_width = struct.unpack(">IIH", init.payload)
    if k != len(shares):
        raise SortError(f"garbler announced k={k}, have {len(shares)} shares")
    sc = _sort_circuit(k, payload_width, max_k)
    gc = GarbledCircuit.from_bytes(channel.expect("CIRCUIT_BLOB").payload)

    glabels = channel.expect("GARBLER_LABELS").payload
    g_n = n * SCORE_BITS
    p_n = n * payload_width
    garbler_labels = _labels_from(glabels[: g_n * 16], g_n)
    payload_labels = _labels_from(glabels[g_n * 16 :], p_n)
    mask_labels = _labels_from(channel.expect("MASK_LABELS").payload, SCORE_BITS)

    e_bits = _share_bits(shares, n)
    receiver = OTReceiver(ctx, channel, session)
    receiver.setup()
    own = receiver.recv_messages(e_bits)
    own_labels = np.frombuffer(b"".join(own), dtype=np.uint8).reshape(1, g_n, 16)

    out_labels = evaluate(
        sc.circuit,
        gc,
        {
            "garbler_shares": garbler_labels,
            "evaluator_shares": own_labels,
            "payloads": payload_labels,
            "mask": mask_labels,
        },
    )
    bits = decode(gc, out_labels)[0]
    masked, payloads = sc.decode_outputs(bits)
    out_scores, out_payloads = [], []
    for score, payload in zip(masked, payloads):
        if payload == 0:
            continue
        out_scores.append(score)
        out_payloads.append(payload - 1)
    return out_scores, out_payloads


def _encode_payload(shard: int, index: int, idx_bits: int) -> int:
    return ((shard << idx_bits) | index) + 1


def global_sort_garbler(
    channel: Channel,
    session: int,
    contributions: list[tuple[int, list[int], list[int]]],
    ctx: GroupContext,
    rng=None,
    max_k: int = 1024,
) -> None:
    """Garbler (cluster-1 coordinator) side of the global sort over the
    shards' masked vectors. Sends everything; returns nothing."""
    token = rng if rng is not None else secrets.token_bytes
    entries = []  # (shard, masked score, local payload index)
    max_shard = max_index = 0
    for shard, masked, payloads in contributions:
        for score, idx in zip(masked, payloads):
            entries.append((shard, score, idx))
            max_shard = max(max_shard, shard)
            max_index = max(max_index, idx)
    t = len(entries)
    if t < 1:
        raise SortError("no entries to merge")
    idx_bits = max(max_index.bit_length(), 1)
    payload_width = max(
        _encode_payload(max_shard, max_index, idx_bits).bit_length(), 1
    )
    sc = build_merge_circuit(t, payload_width, max_k)
    shard_of_elem = [shard for shard, _, _ in entries]
    header = struct.pack(">IIHH", t, sc.n, payload_width, idx_bits) + b"".join(
        struct.pack(">H", s) for s in shard_of_elem
    )
    channel.send(Frame(MSG["SORT_INIT"], session, header))
    gc, label_map, delta = garble(sc.circuit, token)
    channel.send(Frame(MSG["CIRCUIT_BLOB"], session, gc.to_bytes()))

    m_bits, p_bits = [], []
    for e in range(sc.n):
        if e < t:
            shard, score, idx = entries[e]
            m_bits.extend(int_to_bits(score, SCORE_BITS))
            p_bits.extend(int_to_bits(_encode_payload(shard, idx, idx_bits), payload_width))
        else:
            m_bits.extend([0] * SCORE_BITS)
            p_bits.extend([0] * payload_width)
    m_labels = select_labels(label_map["masked_scores"], delta, m_bits)[0]
    p_labels = select_labels(label_map["payloads"], delta, p_bits)[0]
    channel.send(
        Frame(
            MSG["GARBLER_LABELS"],
            session,
            _labels_frame(m_labels) + _labels_frame(p_labels),
        )
    )
    zero = label_map["masks"]
    one = zero ^ delta
    sender = OTSender(ctx, channel, session)
    sender.setup()
    sender.send_messages([bytes(z) for z in zero], [bytes(o) for o in one])


def global_sort_evaluator(
    channel: Channel,
    session: int,
    masks: dict[int, int],
    ctx: GroupContext,
    max_k: int = 1024,
) -> list[tuple[int, int]]:
    """Evaluator (cluster-0 coordinator) side. Feeds per-shard masks in by
    OT and returns the global descending order as (shard, local index)."""
    init = channel.expect("SORT_INIT")
    t, n, payload_width, idx_bits = struct.unpack(">IIHH", init.payload[:12])
    shard_of_elem = [
        struct.unpack(">H", init.payload[12 + 2 * e : 14 + 2 * e])[0] for e in range(t)
    ]
    sc = build_merge_circuit(t, payload_width, max_k)
    gc = GarbledCircuit.from_bytes(channel.expect("CIRCUIT_BLOB").payload)
    glabels = channel.expect("GARBLER_LABELS").payload
    m_n = n * SCORE_BITS
    p_n = n * payload_width
    masked_labels = _labels_from(glabels[: m_n * 16], m_n)
    payload_labels = _labels_from(glabels[m_n * 16 :], p_n)

    mask_bits = []
    for e in range(n):
        value = masks[shard_of_elem[e]] if e < t else 0
        mask_bits.extend(int_to_bits(value, SCORE_BITS))
    receiver = OTReceiver(ctx, channel, session)
    receiver.setup()
    own = receiver.recv_messages(mask_bits)
    mask_labels = np.frombuffer(b"".join(own), dtype=np.uint8).reshape(1, m_n, 16)

    out_labels = evaluate(
        sc.circuit,
        gc,
        {
            "masked_scores": masked_labels,
            "masks": mask_labels,
            "payloads": payload_labels,
        },
    )
    bits = decode(gc, out_labels)[0]
    order = []
    for e in range(sc.n):
        value = bits_to_int(bits[e * payload_width : (e + 1) * payload_width])
        if value == 0:
            continue
        value -= 1
        order.append((value >> idx_bits, value & ((1 << idx_bits) - 1)))
    return order
