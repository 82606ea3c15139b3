"""The index-server daemon and the wire codecs of the query protocol.

Each server holds one shard of one cluster's encrypted database. A query
session walks these phases on the front-end channel:

    QUERY_INIT -> per subquery: TUPLE_COUNT / XTOKEN_BATCH -> RESULT

For sorted queries the counterpart pair then runs an optional scoring
round and the garbled local sort (cluster 0 garbles), each shard reports
MASKS (cluster 0) or CONTRIB (cluster 1) to its cluster coordinator
(shard 0), the cluster-1 coordinator garbles the global merge for the
cluster-0 coordinator, and the cluster-0 coordinator answers the
front-end with GLOBAL_RESULT.

Servers never see the keystore: they operate on stags, xtokens, and
ciphertexts supplied by the front-end.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import struct
import threading

import numpy as np

from .builder import ShardData, load_edb
from .crypto import ELEMENT_BYTES, GroupContext
from .oxt import boolean_query
from .ot import OTReceiver, OTSender
from .scoring import eval_score, parse_score
from .sexpr import BoolFormula
from .shares import dealer_triple_gen, triple_gen_cot
from .sorting import (
    global_sort_evaluator,
    global_sort_garbler,
    local_sort_evaluator,
    local_sort_garbler,
)
from .transport import (
    MSG,
    Channel,
    ChannelClosed,
    Frame,
    LoopbackFabric,
    TcpListener,
    Transcript,
    TransportError,
    tcp_connect,
)

log = logging.getLogger(__name__)

__all__ = [
    "ServerError",
    "server_name",
    "LoopbackTopology",
    "TcpTopology",
    "IndexServer",
    "encode_query_init",
    "decode_query_init",
    "encode_xtoken_batch",
    "decode_xtoken_batch",
    "encode_result",
    "decode_result",
    "encode_global_result",
    "decode_global_result",
    "QuerySpec",
    "SubquerySpec",
]

CIPHERTEXT_BYTES = 36

FLAG_SORT = 0x01
FLAG_SCORE = 0x02

# MASKS/CONTRIB status codes
STATUS_OK = 0
STATUS_FAILED = 1


class ServerError(Exception):
    pass


def server_name(cluster: int, shard: int) -> str:
    return f"is{cluster}{shard}"


class LoopbackTopology:
    """In-process network of named parties over a loopback fabric."""

    def __init__(self):
        self.fabric = LoopbackFabric()

    def listen(self, name: str):
        return self.fabric.listen(name)

    def connect(self, name: str, timeout: float | None = 10.0) -> Channel:
        return self.fabric.connect(name, timeout)


class TcpTopology:
    """Maps party names to TCP endpoints for multi-process deployments."""

    def __init__(self, addresses: dict[str, tuple[str, int]]):
        self.addresses = dict(addresses)

    def listen(self, name: str):
        host, port = self.addresses[name]
        return TcpListener(host, port)

    def connect(self, name: str, timeout: float | None = 10.0) -> Channel:
        host, port = self.addresses[name]
        return tcp_connect(host, port, timeout if timeout is not None else 10.0)


# ---------------------------------------------------------------------------
# Wire codecs


class SubquerySpec:
    """Wire form of one subquery: everything a server needs, nothing more."""

    def __init__(self, stag: bytes, negate: bool, n_xterms: int, formula: BoolFormula):
        self.stag = stag
        self.negate = negate
        self.n_xterms = n_xterms
        self.formula = formula


class QuerySpec:
    def __init__(self, subqueries: list[SubquerySpec], sort: bool, score: str | None):
        self.subqueries = subqueries
        self.sort = sort
        self.score = score


def encode_query_init(spec: QuerySpec) -> bytes:
    flags = (FLAG_SORT if spec.sort else 0) | (FLAG_SCORE if spec.score else 0)
    parts = [struct.pack(">BH", flags, len(spec.subqueries))]
    for sub in spec.subqueries:
        formula = sub.formula.to_bytes()
        parts.append(sub.stag)
        parts.append(struct.pack(">BHH", int(sub.negate), sub.n_xterms, len(formula)))
        parts.append(formula)
    score = (spec.score or "").encode()
    parts.append(struct.pack(">H", len(score)) + score)
    return b"".join(parts)


def decode_query_init(payload: bytes) -> QuerySpec:
    flags, n_sub = struct.unpack(">BH", payload[:3])
    off = 3
    subs = []
    for _ in range(n_sub):
        stag = payload[off : off + 16]
        negate, n_xterms, flen = struct.unpack(">BHH", payload[off + 16 : off + 21])
        off += 21
        formula = BoolFormula.from_bytes(payload[off : off + flen])
        off += flen
        subs.append(SubquerySpec(stag, bool(negate), n_xterms, formula))
    (slen,) = struct.unpack(">H", payload[off : off + 2])
    score = payload[off + 2 : off + 2 + slen].decode() or None
    return QuerySpec(subs, bool(flags & FLAG_SORT), score)


def encode_xtoken_batch(rows: list[list[int]], ctx: GroupContext) -> bytes:
    width = len(rows[0]) if rows else 0
    parts = [struct.pack(">IH", len(rows), width)]
    for row in rows:
        for token in row:
            parts.append(ctx.encode(token))
    return b"".join(parts)


def decode_xtoken_batch(payload: bytes, ctx: GroupContext) -> list[list[int]]:
    count, width = struct.unpack(">IH", payload[:6])
    rows = []
    off = 6
    for _ in range(count):
        row = []
        for _ in range(width):
            row.append(ctx.decode(payload[off : off + ELEMENT_BYTES]))
            off += ELEMENT_BYTES
        rows.append(row)
    if off != len(payload):
        raise TransportError("xtoken batch has trailing bytes")
    return rows


def encode_result(counts: list[int], e_ids: list[bytes] | None) -> bytes:
    parts = [struct.pack(">H", len(counts))]
    parts.extend(struct.pack(">I", c) for c in counts)
    if e_ids is not None:
        parts.extend(e_ids)
    return b"".join(parts)


def decode_result(payload: bytes) -> tuple[list[int], list[bytes] | None]:
    (n_sub,) = struct.unpack(">H", payload[:2])
    off = 2
    counts = [
        struct.unpack(">I", payload[off + 4 * i : off + 4 * i + 4])[0]
        for i in range(n_sub)
    ]
    off += 4 * n_sub
    rest = payload[off:]
    total = sum(counts)
    if not rest:
        return counts, None
    if len(rest) != total * CIPHERTEXT_BYTES:
        raise TransportError("result frame size disagrees with its counts")
    e_ids = [
        rest[i * CIPHERTEXT_BYTES : (i + 1) * CIPHERTEXT_BYTES] for i in range(total)
    ]
    return counts, e_ids


def encode_global_result(order: list[tuple[int, int]]) -> bytes:
    parts = [struct.pack(">I", len(order))]
    parts.extend(struct.pack(">HI", shard, idx) for shard, idx in order)
    return b"".join(parts)


def decode_global_result(payload: bytes) -> list[tuple[int, int]]:
    (count,) = struct.unpack(">I", payload[:4])
    return [
        struct.unpack(">HI", payload[4 + 6 * i : 10 + 6 * i]) for i in range(count)
    ]


def _encode_masks(shard: int, status: int, count: int, mask: int) -> bytes:
    return struct.pack(">HBII", shard, status, count, mask)


def _decode_masks(payload: bytes):
    return struct.unpack(">HBII", payload)


def _encode_contrib(shard: int, status: int, entries: list[tuple[int, int]]) -> bytes:
    parts = [struct.pack(">HBI", shard, status, len(entries))]
    parts.extend(struct.pack(">II", m, p) for m, p in entries)
    return b"".join(parts)


def _decode_contrib(payload: bytes):
    shard, status, count = struct.unpack(">HBI", payload[:7])
    entries = [
        struct.unpack(">II", payload[7 + 8 * i : 15 + 8 * i]) for i in range(count)
    ]
    return shard, status, entries


# ---------------------------------------------------------------------------
# The server


class IndexServer:
    """One shard server. start() spawns the accept loop; every accepted
    connection is read once and routed by its first frame: new query
    sessions spawn a worker, sort/aggregation frames are delivered to the
    waiting session by (kind, query id)."""

    def __init__(
        self,
        cluster: int,
        shard: int,
        n_shards: int,
        data: ShardData,
        topology,
        *,
        run_mode: str = "dealer",
        dealer_seed: int = 0,
        transcript: Transcript | None = None,
        max_sort_k: int = 1024,
        timeout: float = 60.0,
    ):
        if run_mode not in ("dealer", "secure"):
            raise ServerError(f"unknown run mode {run_mode!r}")
        self.cluster = cluster
        self.shard = shard
        self.n_shards = n_shards
        self.data = data
        self.topology = topology
        self.run_mode = run_mode
        self.dealer_seed = dealer_seed
        self.transcript = transcript
        self.max_sort_k = max_sort_k
        self.timeout = timeout
        self.name = server_name(cluster, shard)
        self.counterpart = server_name(1 - cluster, shard)
        self.coordinator = server_name(cluster, 0)
        self.is_coordinator = shard == 0
        # query-work exponentiations are metered separately from the
        # OT machinery's own group operations
        self.ctx = GroupContext()
        self.ot_ctx = GroupContext()
        self._sessions: dict = {}
        self._lock = threading.Lock()
        self._listener = None
        self._running = False
        self._threads: list[threading.Thread] = []

    # -- lifecycle

    def start(self) -> None:
        self._listener = self.topology.listen(self.name)
        self._running = True
        t = threading.Thread(target=self._accept_loop, name=self.name, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._running = False
        if self._listener is not None:
            self._listener.close()

    @property
    def exp_count(self) -> int:
        return self.ctx.exp_count

    def reset_exp_counter(self) -> None:
        self.ctx.reset_counter()

    def store_fingerprint(self) -> str:
        """Hash of the resident encrypted store; unchanged across queries."""
        h = hashlib.sha256()
        h.update(self.data.tset.to_bytes())
        h.update(self.data.xset.to_bytes())
        return h.hexdigest()

    @classmethod
    def from_edb_dir(cls, edb_dir, cluster: int, shard: int, topology, **kwargs):
        """Load this server's shard with checksum verification; a tampered
        store refuses to start."""
        ctx = GroupContext()
        edb = load_edb(edb_dir, ctx, verify=True)
        if shard >= edb.shards_per_cluster:
            raise ServerError(f"no shard {shard} in {edb_dir}")
        return cls(
            cluster, shard, edb.shards_per_cluster, edb.clusters[cluster][shard],
            topology, **kwargs,
        )

    # -- connection routing

    def _accept_loop(self) -> None:
        while self._running:
            try:
                chan = self._listener.accept(timeout=None)
            except (ChannelClosed, TransportError, OSError):
                break
            chan.transcript = self.transcript
            chan.party = self.name
            t = threading.Thread(target=self._dispatch, args=(chan,), daemon=True)
            t.start()

    def _dispatch(self, chan: Channel) -> None:
        try:
            first = chan.recv(self.timeout)
        except TransportError:
            chan.close()
            return
        try:
            if first.type == MSG["QUERY_INIT"]:
                self._handle_query(chan, first)
            elif first.type == MSG["SORT_INIT"]:
                kind = "gsort" if self.cluster == 0 else "sort"
                self._deliver((kind, first.session), (first, chan))
            elif first.type == MSG["MASKS"]:
                self._deliver(("masks", first.session), _decode_masks(first.payload))
                chan.close()
            elif first.type == MSG["CONTRIB"]:
                self._deliver(("contrib", first.session), _decode_contrib(first.payload))
                chan.close()
            else:
                log.warning("%s: unexpected opening frame %s", self.name, first.name)
                chan.close()
        except Exception:
            log.exception("%s: connection handler failed", self.name)
            chan.close()

    def _queue(self, key) -> queue.Queue:
        with self._lock:
            q = self._sessions.get(key)
            if q is None:
                q = self._sessions[key] = queue.Queue()
            return q

    def _deliver(self, key, item) -> None:
        self._queue(key).put(item)

    def _await(self, key, timeout: float):
        try:
            return self._queue(key).get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"{self.name}: timed out waiting for {key[0]}")

    def _drop(self, key) -> None:
        with self._lock:
            self._sessions.pop(key, None)

    # -- query sessions

    def _handle_query(self, chan: Channel, init: Frame) -> None:
        qid = init.session
        try:
            spec = decode_query_init(init.payload)
            survivors = []
            counts = []
            for sub in spec.subqueries:
                tuples = self.data.tset.retrieve(sub.stag)
                chan.send(Frame(MSG["TUPLE_COUNT"], qid, struct.pack(">I", len(tuples))))
                if sub.n_xterms:
                    batch = chan.expect("XTOKEN_BATCH", self.timeout)
                    rows = decode_xtoken_batch(batch.payload, self.ctx)
                    kept = boolean_query(
                        self.data.tset, self.data.xset, self.ctx,
                        sub.stag, rows, sub.formula, sub.negate,
                    )
                else:
                    kept = list(enumerate(tuples))
                counts.append(len(kept))
                survivors.extend(t for _, t in kept)
            e_ids = [t.e_id for t in survivors] if self.cluster == 0 else None
            chan.send(Frame(MSG["RESULT"], qid, encode_result(counts, e_ids)))
            if spec.sort:
                self._sort_phase(chan, qid, survivors, spec.score)
        except Exception as exc:
            log.exception("%s: query %d failed", self.name, qid)
            try:
                chan.send(Frame(MSG["ERROR"], qid, str(exc).encode()))
            except TransportError:
                pass
        finally:
            chan.close()

    def _report(self, frame_type: str, payload: bytes, session: int) -> None:
        """One-shot frame to this cluster's coordinator."""
        chan = self.topology.connect(self.coordinator)
        chan.transcript = self.transcript
        chan.party = self.name
        chan.send(Frame(MSG[frame_type], session, payload))
        chan.close()

    def _sort_phase(self, chan: Channel, qid: int, survivors, score: str | None) -> None:
        shares = [t.sortkey_share for t in survivors]
        k = len(shares)
        if self.cluster == 0:
            self._sort_phase_garbler(chan, qid, shares, k, score)
        else:
            self._sort_phase_evaluator(qid, shares, k, score)

    def _sort_phase_garbler(self, chan, qid, shares, k, score):
        if k == 0:
            self._report("MASKS", _encode_masks(self.shard, STATUS_OK, 0, 0), qid)
        else:
            try:
                cchan = self.topology.connect(self.counterpart)
            except TransportError:
                log.warning(
                    "%s: counterpart %s unreachable; degraded to set operations",
                    self.name, self.counterpart,
                )
                self._report(
                    "MASKS", _encode_masks(self.shard, STATUS_FAILED, 0, 0), qid
                )
                if self.is_coordinator:
                    self._coordinate_masks(chan, qid)
                return
            cchan.transcript = self.transcript
            cchan.party = self.name
            try:
                cchan.send(Frame(MSG["SORT_INIT"], qid, b""))  # session handshake
                if score:
                    shares = self._score(cchan, qid, shares, score, party=0)
                mask = local_sort_garbler(
                    cchan, qid, shares, self.ot_ctx, max_k=self.max_sort_k
                )
            finally:
                cchan.close()
            self._report("MASKS", _encode_masks(self.shard, STATUS_OK, k, mask), qid)
        if self.is_coordinator:
            self._coordinate_masks(chan, qid)

    def _sort_phase_evaluator(self, qid, shares, k, score):
        if k == 0:
            self._report("CONTRIB", _encode_contrib(self.shard, STATUS_OK, []), qid)
        else:
            try:
                _, cchan = self._await(("sort", qid), self.timeout)
            except TransportError:
                self._report(
                    "CONTRIB", _encode_contrib(self.shard, STATUS_FAILED, []), qid
                )
                if self.is_coordinator:
                    self._coordinate_contribs(qid)
                return
            finally:
                self._drop(("sort", qid))
            try:
                if score:
                    shares = self._score(cchan, qid, shares, score, party=1)
                masked, order = local_sort_evaluator(
                    cchan, qid, shares, self.ot_ctx, max_k=self.max_sort_k
                )
            finally:
                cchan.close()
            entries = list(zip(masked, order))
            self._report(
                "CONTRIB", _encode_contrib(self.shard, STATUS_OK, entries), qid
            )
        if self.is_coordinator:
            self._coordinate_contribs(qid)

    # -- coordinator duties

    def _coordinate_masks(self, chan: Channel, qid: int) -> None:
        """Cluster-0 coordinator: gather every shard's mask, evaluate the
        global merge fed by the cluster-1 coordinator, answer the front-end."""
        masks = {}
        total = 0
        failed = None
        try:
            for _ in range(self.n_shards):
                shard, status, count, mask = self._await(("masks", qid), self.timeout)
                if status != STATUS_OK:
                    failed = shard
                masks[shard] = mask
                total += count
        finally:
            self._drop(("masks", qid))
        if failed is not None:
            chan.send(
                Frame(
                    MSG["ERROR"], qid,
                    f"shard {failed} degraded: sorted queries unavailable".encode(),
                )
            )
            return
        if total == 0:
            chan.send(Frame(MSG["GLOBAL_RESULT"], qid, encode_global_result([])))
            return
        try:
            _, gchan = self._await(("gsort", qid), self.timeout)
        finally:
            self._drop(("gsort", qid))
        try:
            order = global_sort_evaluator(
                gchan, qid, masks, self.ot_ctx, max_k=self.max_sort_k
            )
        finally:
            gchan.close()
        chan.send(Frame(MSG["GLOBAL_RESULT"], qid, encode_global_result(order)))

    def _coordinate_contribs(self, qid: int) -> None:
        """Cluster-1 coordinator: gather masked vectors and garble the
        global merge for the cluster-0 coordinator."""
        contributions = []
        failed = None
        try:
            for _ in range(self.n_shards):
                shard, status, entries = self._await(("contrib", qid), self.timeout)
                if status != STATUS_OK:
                    failed = shard
                if entries:
                    masked = [m for m, _ in entries]
                    payloads = [p for _, p in entries]
                    contributions.append((shard, masked, payloads))
        finally:
            self._drop(("contrib", qid))
        if failed is not None or not contributions:
            return  # the cluster-0 coordinator answers (error or empty)
        gchan = self.topology.connect(server_name(0, 0))
        gchan.transcript = self.transcript
        gchan.party = self.name
        try:
            gchan.send(Frame(MSG["SORT_INIT"], qid, b""))  # session handshake
            global_sort_garbler(
                gchan, qid, contributions, self.ot_ctx, max_k=self.max_sort_k
            )
        finally:
            gchan.close()

    # -- scoring

    def _score(self, channel, qid, shares, formula_text, party):
        ast = parse_score(formula_text)
        variables = {"key": np.asarray(shares, dtype=np.int64)}
        take_triple = self._triple_source(channel, qid, party)
        values = eval_score(ast, variables, party, channel, take_triple, qid)
        return [int(v) for v in values]

    def _triple_source(self, channel, qid, party):
        counter = {"n": 0}
        state = {}

        def dealer(shape):
            seed_bytes = hashlib.sha256(
                struct.pack(">QQQI", self.dealer_seed, qid, counter["n"], self.shard)
            ).digest()
            counter["n"] += 1
            seed = int.from_bytes(seed_bytes[:8], "big")
            pair = dealer_triple_gen(shape, shape, "elementwise", seed, self.run_mode)
            return pair[party]

        def secure(shape):
            if not state:
                sender = OTSender(self.ot_ctx, channel, qid)
                receiver = OTReceiver(self.ot_ctx, channel, qid)
                if party == 0:
                    sender.setup()
                    receiver.setup()
                else:
                    receiver.setup()
                    sender.setup()
                state["sender"], state["receiver"] = sender, receiver
            return triple_gen_cot(
                party, "elementwise", shape, shape, channel,
                state["sender"], state["receiver"],
                np.random.default_rng(), qid,
            )

        return dealer if self.run_mode == "dealer" else secure
