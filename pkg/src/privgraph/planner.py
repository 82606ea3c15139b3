"""The trusted front-end: query planning and protocol driving.

The front-end holds the master keys. It compiles an s-expression into
subqueries, derives stags and streams xtokens sized by each server's
announced tuple count, collects encrypted results from cluster 0, and for
sorted queries reads the global ranking from the cluster-0 coordinator.
It decrypts result ids locally; servers never see keys or plaintext ids.

Results returned to callers are plaintext entity ids, ranked when a sort
was requested. Multi-round traversals (apply) run the nested expression
ranked and truncated, instantiate prefix terms from its ids, and run the
resulting disjunction as the outer round.
"""

from __future__ import annotations

import itertools
import logging
import secrets
import struct
from dataclasses import dataclass, field

from .crypto import DecryptError, GroupContext, MasterKeyBundle, decrypt_id, term_key
from .oxt import IntegrityError, Subquery, compile_query, stag_for, xtoken_rows
from .server import (
    QuerySpec,
    SubquerySpec,
    decode_global_result,
    decode_result,
    encode_query_init,
    encode_xtoken_batch,
    server_name,
)
from .sexpr import SExpr, parse_sexpr
from .transport import MSG, Frame, Transcript, TransportError

log = logging.getLogger(__name__)

__all__ = ["QueryError", "PlanStep", "QueryPlan", "plan", "FrontEnd"]

STEP_KINDS = ("IndexAccess", "SetOp", "Arithmetic", "Sorting")


class QueryError(Exception):
    pass


@dataclass(frozen=True)
class PlanStep:
    kind: str
    detail: str = ""

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown plan step kind {self.kind!r}")


@dataclass
class QueryPlan:
    steps: list = field(default_factory=list)

    def kinds(self) -> list[str]:
        return [s.kind for s in self.steps]


def plan(expr, sort: bool = False, score: str | None = None, lengths=None) -> QueryPlan:
    """Classify the work of a query into typed plan steps."""
    if isinstance(expr, str):
        expr = parse_sexpr(expr)
    steps = []
    if expr.op == "apply":
        nested = plan(expr.args[0], sort=True, lengths=lengths)
        steps.extend(nested.steps)
        steps.append(PlanStep("IndexAccess", f"instantiate {expr.prefix}<id> terms"))
        steps.append(PlanStep("SetOp", "disjunction rewrite over instantiated terms"))
    else:
        for sub in compile_query(expr, lengths):
            steps.append(PlanStep("IndexAccess", sub.s_term))
            if sub.n_xterms:
                shape = sub.formula.shape()
                steps.append(PlanStep("SetOp", f"{'not ' if sub.negate else ''}{shape}"))
    if score:
        steps.append(PlanStep("Arithmetic", score))
    if sort:
        steps.append(PlanStep("Sorting", "garbled local sorts + global merge"))
    return QueryPlan(steps)


class FrontEnd:
    """Drives query sessions against both clusters over a topology."""

    def __init__(
        self,
        keys: MasterKeyBundle,
        topology,
        n_shards: int,
        *,
        lengths: dict[str, int] | None = None,
        nested_top_k: int = 10,
        timeout: float = 120.0,
        transcript: Transcript | None = None,
    ):
        self.keys = keys
        self.topology = topology
        self.n_shards = n_shards
        self.lengths = lengths
        self.nested_top_k = nested_top_k
        self.timeout = timeout
        self.transcript = transcript
        self.ctx = GroupContext()
        self._qid = itertools.count(secrets.randbits(24) << 32)

    def query(
        self,
        query,
        sort: bool = False,
        top_k: int | None = None,
        score: str | None = None,
    ) -> list[int]:
        """Run a query; returns plaintext ids, ranked when sort is set."""
        expr = parse_sexpr(query) if isinstance(query, str) else query
        if expr.op == "apply":
            return self._apply(expr, sort, top_k, score)
        subqueries = compile_query(expr, self.lengths)
        return self._execute(subqueries, sort, top_k, score)

    def _apply(self, expr: SExpr, sort, top_k, score) -> list[int]:
        nested = self.query(expr.args[0], sort=True, top_k=self.nested_top_k)
        if not nested:
            return []
        terms = [SExpr(op="term", term=f"{expr.prefix}{eid}") for eid in nested]
        outer = terms[0] if len(terms) == 1 else SExpr(op="or", args=tuple(terms))
        return self.query(outer, sort=sort, top_k=top_k, score=score)

    # -- one protocol session

    def _execute(
        self,
        subqueries: list[Subquery],
        sort: bool,
        top_k: int | None,
        score: str | None,
    ) -> list[int]:
        if not subqueries:
            return []
        if score and not sort:
            raise QueryError("scoring requires a sorted query")
        qid = next(self._qid)
        chans = self._connect(sort)
        try:
            spec = QuerySpec(
                [
                    SubquerySpec(
                        stag_for(self.keys, s), s.negate, s.n_xterms, s.formula
                    )
                    for s in subqueries
                ],
                sort,
                score,
            )
            init = Frame(MSG["QUERY_INIT"], qid, encode_query_init(spec))
            for ch in chans.values():
                ch.send(init)
            shard_counts, shard_eids = self._run_subqueries(chans, qid, subqueries)
            if not sort:
                out = []
                for j in range(self.n_shards):
                    for i, e_id in enumerate(shard_eids[j]):
                        sub = self._sub_at(subqueries, shard_counts[j], i, j)
                        out.append(self._decrypt(sub.s_term, e_id, j))
                return out[:top_k] if top_k is not None else out
            order = self._global_order(chans[(0, 0)])
            out = []
            for j, i in order:
                if j >= self.n_shards or i >= len(shard_eids[j]):
                    raise QueryError(f"global ranking points outside shard {j}")
                sub = self._sub_at(subqueries, shard_counts[j], i, j)
                out.append(self._decrypt(sub.s_term, shard_eids[j][i], j))
            return out[:top_k] if top_k is not None else out
        finally:
            for ch in chans.values():
                ch.close()

    def _connect(self, sort: bool) -> dict:
        chans = {}
        missing = []
        for cluster in (0, 1):
            for j in range(self.n_shards):
                name = server_name(cluster, j)
                try:
                    ch = self.topology.connect(name)
                except TransportError:
                    if cluster == 1:
                        missing.append(name)
                        continue
                    raise QueryError(f"index server {name} unreachable")
                ch.transcript = self.transcript
                ch.party = "frontend"
                chans[(cluster, j)] = ch
        if missing:
            log.warning("degraded: %s unreachable", ", ".join(missing))
            if sort:
                raise QueryError(
                    f"degraded: {', '.join(missing)} unreachable; "
                    "sorted queries need both clusters"
                )
        return chans

    def _recv(self, chan, expected: str) -> Frame:
        frame = chan.recv(self.timeout)
        if frame.type == MSG["ERROR"]:
            raise QueryError(f"server error: {frame.payload.decode(errors='replace')}")
        if frame.type != MSG[expected]:
            raise QueryError(f"expected {expected}, got {frame.name}")
        return frame

    def _run_subqueries(self, chans, qid, subqueries):
        """Per subquery: gather tuple counts, stream the sized xtoken
        batches; then collect cluster-0 ciphertexts and cross-check counts."""
        for sub in subqueries:
            counts = {}
            for key, ch in chans.items():
                frame = self._recv(ch, "TUPLE_COUNT")
                counts[key] = struct.unpack(">I", frame.payload)[0]
            for j in range(self.n_shards):
                c1 = counts.get((1, j))
                if c1 is not None and counts[(0, j)] != c1:
                    raise QueryError(f"clusters disagree on shard {j} tuple count")
            if sub.n_xterms:
                for j in range(self.n_shards):
                    rows = xtoken_rows(
                        self.keys, self.ctx, sub.s_term, counts[(0, j)], sub.x_terms
                    )
                    payload = encode_xtoken_batch(rows, self.ctx)
                    for cluster in (0, 1):
                        ch = chans.get((cluster, j))
                        if ch is not None:
                            ch.send(Frame(MSG["XTOKEN_BATCH"], qid, payload))
        shard_counts = {}
        shard_eids = {}
        for (cluster, j), ch in sorted(chans.items()):
            frame = self._recv(ch, "RESULT")
            sub_counts, e_ids = decode_result(frame.payload)
            if cluster == 0:
                if e_ids is None and sum(sub_counts):
                    raise QueryError(f"cluster 0 shard {j} returned no ciphertexts")
                shard_counts[j] = sub_counts
                shard_eids[j] = e_ids or []
            elif sub_counts != shard_counts[j]:
                raise QueryError(f"clusters disagree on shard {j} survivor counts")
        return shard_counts, shard_eids

    def _global_order(self, coord_chan) -> list[tuple[int, int]]:
        frame = self._recv(coord_chan, "GLOBAL_RESULT")
        return decode_global_result(frame.payload)

    @staticmethod
    def _sub_at(subqueries, counts, index, shard) -> Subquery:
        for sub, count in zip(subqueries, counts):
            if index < count:
                return sub
            index -= count
        raise QueryError(f"result index outside shard {shard} survivor vector")

    def _decrypt(self, s_term: str, e_id: bytes, shard: int) -> int:
        try:
            return decrypt_id(term_key(self.keys, s_term), e_id)
        except DecryptError as exc:
            raise IntegrityError(
                f"undecryptable result tuple from shard {shard}: {exc}"
            ) from exc
