"""Executable leakage model and transcript audit.

The profile captures what an honest-but-curious server cluster may learn
from a query workload: N (total stored pairs), per-query boolean formula
shapes, the s-term repeat pattern, per-shard posting sizes (SP), x-term
counts (XP), (s-term, x-term) result sets (RP), cross-query s-term
intersections for equal x-term sets (IP), and the result ranks of sorted
queries. The profile is a pure function of the plaintext database and
the query list; it never touches keys.

The audit classifies every recorded frame into the allowed alphabet and
flags anything else; the consistency check verifies that each observable
quantity in a transcript is derivable from the profile.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

from .crypto import hash_to_shard
from .graph import PlaintextEngine, PostingList
from .oxt import Subquery, compile_query
from .server import decode_global_result, decode_query_init, decode_result
from .sexpr import SExpr, parse_sexpr
from .transport import MSG, MSG_NAMES, Transcript

__all__ = [
    "QueryRecord",
    "LeakageProfile",
    "compute_leakage",
    "AuditReport",
    "audit_transcript",
    "Verdict",
    "check_transcript_consistency",
]


@dataclass(frozen=True)
class QueryRecord:
    expr: SExpr
    sort: bool = False

    @classmethod
    def make(cls, query, sort: bool = False) -> "QueryRecord":
        return cls(parse_sexpr(query) if isinstance(query, str) else query, sort)


@dataclass
class LeakageProfile:
    n_total: int  # N: total (id, term) pairs stored
    n_shards: int
    phi_shapes: list  # per query: formula shape per subquery
    s_bar: list  # per query: first-occurrence index of each subquery's s-term
    sp: list  # per query, per subquery: per-shard s-term tuple counts
    xp: list  # per query: x-term count per subquery
    rp: dict  # (s_term, x_term) -> frozenset of matching ids
    ip: dict  # (subquery idx, subquery idx) -> frozenset (same x-terms, different s)
    result_counts: list  # per query, per subquery: per-shard survivor counts
    survivor_scores: list  # per query, per shard: survivor scores in wire order
    ranks: list  # per sorted query: descending global score list; None otherwise

    def block_counts(self, block_size: int) -> list:
        """Clear block-counter metadata is derivable leakage: ceil(SP/B)."""
        return [
            [[math.ceil(c / block_size) for c in per_shard] for per_shard in q]
            for q in self.sp
        ]


def _shard_of(eid: int, n_shards: int, shard_hash: str) -> int:
    return hash_to_shard(eid, n_shards, shard_hash)


def _stored_order(entries):
    # matches the EDB build: descending sort key, ascending id
    return sorted(entries, key=lambda e: (-e[0], e[1]))


def compute_leakage(
    index: dict[str, PostingList],
    queries: list[QueryRecord],
    n_shards: int = 1,
    shard_hash: str = "sha256",
) -> LeakageProfile:
    engine = PlaintextEngine(index)
    n_total = sum(len(p) for p in index.values())
    phi_shapes, s_bar, sp, xp = [], [], [], []
    result_counts, survivor_scores, ranks = [], [], []
    rp: dict = {}
    flat_subs: list[Subquery] = []
    seen_s: dict[str, int] = {}

    for record in queries:
        subs = compile_query(record.expr, engine.lengths)
        phi_shapes.append([s.formula.shape() for s in subs])
        xp.append([s.n_xterms for s in subs])
        q_sbar, q_sp, q_counts = [], [], []
        per_shard_scores = [[] for _ in range(n_shards)]
        all_scores = []
        for sub in subs:
            idx = seen_s.setdefault(sub.s_term, len(flat_subs))
            q_sbar.append(idx)
            flat_subs.append(sub)
            posting = engine.posting(sub.s_term)
            counts = [0] * n_shards
            for _, eid in posting:
                counts[_shard_of(eid, n_shards, shard_hash)] += 1
            q_sp.append(counts)
            for x in sub.x_terms:
                key = (sub.s_term, x)
                if key not in rp:
                    x_ids = index[x].ids() if x in index else set()
                    rp[key] = frozenset(
                        eid for _, eid in posting if eid in x_ids
                    )
            survivors = engine.eval_boolean(
                sub.s_term, list(sub.x_terms), sub.formula, sub.negate
            )
            sub_counts = [0] * n_shards
            per_sub_shard = [[] for _ in range(n_shards)]
            for sk, eid in _stored_order(survivors):
                j = _shard_of(eid, n_shards, shard_hash)
                sub_counts[j] += 1
                per_sub_shard[j].append(sk)
            q_counts.append(sub_counts)
            for j in range(n_shards):
                per_shard_scores[j].extend(per_sub_shard[j])
            all_scores.extend(sk for sk, _ in survivors)
        s_bar.append(q_sbar)
        sp.append(q_sp)
        result_counts.append(q_counts)
        survivor_scores.append(per_shard_scores)
        ranks.append(sorted(all_scores, reverse=True) if record.sort else None)

    ip: dict = {}
    for a in range(len(flat_subs)):
        for b in range(a + 1, len(flat_subs)):
            sa, sb = flat_subs[a], flat_subs[b]
            if sa.s_term != sb.s_term and set(sa.x_terms) == set(sb.x_terms) and sa.x_terms:
                ids_a = {eid for _, eid in engine.posting(sa.s_term)}
                ids_b = {eid for _, eid in engine.posting(sb.s_term)}
                ip[(a, b)] = frozenset(ids_a & ids_b)

    return LeakageProfile(
        n_total, n_shards, phi_shapes, s_bar, sp, xp, rp, ip,
        result_counts, survivor_scores, ranks,
    )


# ---------------------------------------------------------------------------
# Transcript audit: the allowed-observable alphabet

# leakage class of each frame type in an honest transcript
_ALPHABET = {
    "QUERY_INIT": "stag + formula shape + x-term count (XP)",
    "TUPLE_COUNT": "tuple counts (SP)",
    "XTOKEN_BATCH": "xtokens",
    "RESULT": "encrypted tuples + survivor counts",
    "GLOBAL_RESULT": "ranks",
    "SORT_INIT": "sort session size",
    "CIRCUIT_BLOB": "circuit blob",
    "GARBLER_LABELS": "wire labels",
    "MASK_LABELS": "wire labels",
    "OT_SETUP": "oblivious-transfer setup",
    "OT_EXTEND": "oblivious-transfer extension",
    "OT_PAYLOAD": "wire labels",
    "SORT_RESULT": "masked scores",
    "CONTRIB": "masked scores + ranks",
    "MASKS": "masks",
    "TRIPLE_GEN_INIT": "triple shape",
    "COT_BATCH": "correlated-OT corrections",
    "MUL_EXCHANGE": "blinded shares",
    "ERROR": "error notice",
}

CIPHERTEXT_BYTES = 36
LABEL_BYTES = 16


def _check_structure(frame) -> str | None:
    """Structural validation per frame type; returns a violation or None."""
    name = MSG_NAMES.get(frame.type)
    p = frame.payload
    try:
        if name == "QUERY_INIT":
            from .server import encode_query_init

            if encode_query_init(decode_query_init(p)) != p:
                return "QUERY_INIT payload has undeclared extra bytes"
        elif name == "TUPLE_COUNT":
            if len(p) != 4:
                return "TUPLE_COUNT payload is not a single count"
        elif name == "XTOKEN_BATCH":
            count, width = struct.unpack(">IH", p[:6])
            if len(p) != 6 + count * width * 32:
                return "XTOKEN_BATCH size disagrees with its header"
        elif name == "RESULT":
            decode_result(p)
        elif name == "GLOBAL_RESULT":
            (count,) = struct.unpack(">I", p[:4])
            if len(p) != 4 + 6 * count:
                return "GLOBAL_RESULT size disagrees with its header"
        elif name == "SORT_INIT":
            if len(p) not in (0, 10) and len(p) < 12:
                return "SORT_INIT header malformed"
        elif name in ("GARBLER_LABELS", "MASK_LABELS", "OT_PAYLOAD"):
            if len(p) % LABEL_BYTES and name != "OT_PAYLOAD":
                return f"{name} is not whole wire labels"
        elif name == "MASKS":
            if len(p) != 11:
                return "MASKS payload malformed"
        elif name == "CONTRIB":
            shard, status, count = struct.unpack(">HBI", p[:7])
            if len(p) != 7 + 8 * count:
                return "CONTRIB size disagrees with its header"
        elif name == "MUL_EXCHANGE":
            if len(p) % 8:
                return "MUL_EXCHANGE is not two equal share vectors"
        elif name == "TRIPLE_GEN_INIT":
            if len(p) != 16:
                return "TRIPLE_GEN_INIT header malformed"
    except Exception:
        return f"{name or hex(frame.type)} payload failed structural parse"
    return None


@dataclass
class AuditReport:
    class_counts: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


def audit_transcript(transcript: Transcript, forbidden: tuple = ()) -> AuditReport:
    """Classify every sent frame into the allowed alphabet; flag unknown
    types, structurally invalid payloads, and any forbidden byte pattern
    (key material, plaintext id markers) appearing on the wire."""
    report = AuditReport()
    for party, direction, frame in transcript.entries:
        if direction != "send":
            continue  # each frame is audited once, attributed to its sender
        name = MSG_NAMES.get(frame.type)
        if name is None or name not in _ALPHABET:
            report.violations.append(
                f"{party}: frame type 0x{frame.type:04x} outside the allowed alphabet"
            )
            continue
        cls = _ALPHABET[name]
        report.class_counts[cls] = report.class_counts.get(cls, 0) + 1
        problem = _check_structure(frame)
        if problem is not None:
            report.violations.append(f"{party}: {problem}")
        for pattern in forbidden:
            if pattern and pattern in frame.payload:
                report.violations.append(
                    f"{party}: forbidden byte pattern on the wire in {name}"
                )
    return report


# ---------------------------------------------------------------------------
# Profile/transcript consistency


@dataclass
class Verdict:
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not self.violations


def _sessions_in_order(entries):
    """Query sessions keyed by the front-end's QUERY_INIT frames, in issue
    order; each maps to the frames of every party in that session."""
    order = []
    sessions = {}
    for party, direction, frame in entries:
        if direction != "send":
            continue
        if (
            frame.type == MSG["QUERY_INIT"]
            and party == "frontend"
            and frame.session not in sessions
        ):
            order.append(frame.session)
            sessions[frame.session] = []
    for party, direction, frame in entries:
        if direction == "send" and frame.session in sessions:
            sessions[frame.session].append((party, frame))
    return [(sid, sessions[sid]) for sid in order]


def check_transcript_consistency(
    profile: LeakageProfile, transcript: Transcript
) -> Verdict:
    """Verify that every observable quantity in the recorded sessions is
    exactly what the leakage profile predicts."""
    verdict = Verdict()
    sessions = _sessions_in_order(transcript.entries)
    if len(sessions) != len(profile.phi_shapes):
        verdict.violations.append(
            f"transcript has {len(sessions)} query sessions, profile has "
            f"{len(profile.phi_shapes)}"
        )
        return verdict

    stag_of_first: dict[int, bytes] = {}
    for qi, (sid, frames) in enumerate(sessions):
        init = next(
            f for party, f in frames
            if party == "frontend" and f.type == MSG["QUERY_INIT"]
        )
        spec = decode_query_init(init.payload)
        shapes = [s.formula.shape() for s in spec.subqueries]
        if shapes != profile.phi_shapes[qi]:
            verdict.violations.append(f"query {qi}: formula shapes differ from profile")
        if [s.n_xterms for s in spec.subqueries] != profile.xp[qi]:
            verdict.violations.append(f"query {qi}: x-term counts differ from XP")
        # repeat pattern: equal s-terms <=> byte-identical stags
        flat_base = sum(len(x) for x in profile.s_bar[:qi])
        for si, sub in enumerate(spec.subqueries):
            first = profile.s_bar[qi][si]
            if first == flat_base + si:
                stag_of_first[first] = sub.stag
            elif stag_of_first.get(first) != sub.stag:
                verdict.violations.append(
                    f"query {qi} subquery {si}: stag breaks the repeat pattern"
                )

        counts_by_shard: dict[str, list[int]] = {}
        results_by_shard: dict[str, tuple] = {}
        global_orders = []
        for party, frame in frames:
            if frame.type == MSG["TUPLE_COUNT"]:
                counts_by_shard.setdefault(party, []).append(
                    struct.unpack(">I", frame.payload)[0]
                )
            elif frame.type == MSG["RESULT"]:
                results_by_shard[party] = decode_result(frame.payload)
            elif frame.type == MSG["GLOBAL_RESULT"]:
                global_orders.append(decode_global_result(frame.payload))

        for party, counts in counts_by_shard.items():
            shard = int(party[3:])
            want = [per_shard[shard] for per_shard in profile.sp[qi]]
            if counts != want:
                verdict.violations.append(
                    f"query {qi} {party}: tuple counts {counts} != SP {want}"
                )
        for party, (sub_counts, _) in results_by_shard.items():
            shard = int(party[3:])
            want = [per_shard[shard] for per_shard in profile.result_counts[qi]]
            if sub_counts != want:
                verdict.violations.append(
                    f"query {qi} {party}: survivor counts {sub_counts} != profile {want}"
                )
        if profile.ranks[qi] is None:
            if global_orders:
                verdict.violations.append(
                    f"query {qi}: unexpected global ranking for an unsorted query"
                )
        else:
            if not global_orders:
                verdict.violations.append(f"query {qi}: sorted query has no ranking")
            for order in global_orders:
                scores = []
                seen = set()
                ok = True
                for j, i in order:
                    if (j, i) in seen or j >= profile.n_shards or i >= len(
                        profile.survivor_scores[qi][j]
                    ):
                        ok = False
                        break
                    seen.add((j, i))
                    scores.append(profile.survivor_scores[qi][j][i])
                if not ok or len(order) != len(profile.ranks[qi]):
                    verdict.violations.append(
                        f"query {qi}: global ranking is not a permutation of the survivors"
                    )
                elif scores != profile.ranks[qi]:
                    verdict.violations.append(
                        f"query {qi}: ranking order disagrees with the leakage ranks"
                    )
        verdict.notes.append(
            f"query {qi}: {len(frames)} frames consistent with profile"
            if not verdict.violations
            else f"query {qi}: checked"
        )
    return verdict
