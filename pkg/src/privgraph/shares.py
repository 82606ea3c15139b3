"""Two-party arithmetic over additively shared values in Z_{2^31}:
sharing and reconstruction, non-interactive addition, one-round Beaver
multiplication, and offline triple generation via correlated OT.

A dealer mode generates triples locally from a seed so arithmetic tests
and benchmarks can run without the OT stack; it is refused when the run
mode is "secure".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ot import OTReceiver, OTSender
from .transport import MSG, Channel, Frame

__all__ = [
    "SHARE_MODULUS",
    "ConfigError",
    "PoolEmpty",
    "ShareMatrix",
    "TripleShare",
    "TriplePool",
    "shr",
    "rec",
    "add",
    "sub",
    "mul",
    "dealer_triple_gen",
    "triple_gen_cot",
]

SHARE_MODULUS = 1 << 31
SCALAR_TRIPLE_BYTES = 12  # three ring elements of 4 bytes each


class ConfigError(Exception):
    pass


class PoolEmpty(Exception):
    pass


def _as_ring(values) -> np.ndarray:
    # np.asarray twice: ufuncs collapse 0-d arrays to scalars, and scalar
    # .astype() silently drops byte-order flags when packing
    arr = np.asarray(values, dtype=np.int64)
    return np.asarray(np.mod(arr, SHARE_MODULUS))


@dataclass(frozen=True)
class ShareMatrix:
    """One party's additive share of a matrix over Z_{2^31}."""

    values: np.ndarray
    party: int

    def __post_init__(self):
        object.__setattr__(self, "values", _as_ring(self.values))
        if self.party not in (0, 1):
            raise ValueError("party must be 0 or 1")

    @property
    def shape(self):
        return self.values.shape

    def pack(self) -> bytes:
        return self.values.astype(">u4").tobytes()

    @classmethod
    def unpack(cls, data: bytes, shape, party: int) -> "ShareMatrix":
        arr = np.frombuffer(data, dtype=">u4").astype(np.int64).reshape(shape)
        return cls(arr, party)


def shr(values, rng: np.random.Generator) -> tuple[ShareMatrix, ShareMatrix]:
    """Split a value/matrix into two additive shares; share 0 is uniform."""
    arr = _as_ring(values)
    share0 = rng.integers(0, SHARE_MODULUS, size=arr.shape, dtype=np.int64)
    share1 = np.mod(arr - share0, SHARE_MODULUS)
    return ShareMatrix(share0, 0), ShareMatrix(share1, 1)


def rec(a: ShareMatrix, b: ShareMatrix) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError("share dimension mismatch")
    if a.party == b.party:
        raise ValueError("reconstruction needs one share from each party")
    return np.mod(a.values + b.values, SHARE_MODULUS)


def add(a: ShareMatrix, b: ShareMatrix) -> ShareMatrix:
    """Local elementwise addition; exchanges no messages."""
    if a.shape != b.shape:
        raise ValueError("share dimension mismatch")
    if a.party != b.party:
        raise ValueError("cannot add shares held by different parties")
    return ShareMatrix(a.values + b.values, a.party)


def sub(a: ShareMatrix, b: ShareMatrix) -> ShareMatrix:
    if a.shape != b.shape:
        raise ValueError("share dimension mismatch")
    if a.party != b.party:
        raise ValueError("cannot subtract shares held by different parties")
    return ShareMatrix(a.values - b.values, a.party)


@dataclass
class TripleShare:
    """One party's half of a multiplication triple Z = X op Y mod 2^31,
    where op is elementwise or matrix multiplication."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    party: int
    mode: str  # "elementwise" | "matmul"
    consumed: bool = False

    def consume(self) -> None:
        if self.consumed:
            raise ValueError("multiplication triple already consumed")
        self.consumed = True

    @property
    def shape_key(self):
        return (self.mode, self.x.shape, self.y.shape)

    @property
    def byte_size(self) -> int:
        return 4 * (self.x.size + self.y.size + self.z.size)


def _combine(x: np.ndarray, y: np.ndarray, mode: str) -> np.ndarray:
    if mode == "elementwise":
        return np.mod(x * y, SHARE_MODULUS)
    if mode == "matmul":
        return np.mod(x @ y, SHARE_MODULUS)
    raise ValueError(f"unknown triple mode {mode!r}")


def mul(
    a: ShareMatrix,
    b: ShareMatrix,
    triple: TripleShare,
    channel: Channel,
    session: int = 0,
) -> ShareMatrix:
    """Beaver multiplication: one exchange of the blinded matrices
    E = A - X and F = B - Y, then a local combination."""
    if a.party != b.party or a.party != triple.party:
        raise ValueError("shares and triple must belong to one party")
    if triple.x.shape != a.shape or triple.y.shape != b.shape:
        raise ValueError("triple shape mismatch")
    triple.consume()
    i = a.party
    e_mine = np.asarray(np.mod(a.values - triple.x, SHARE_MODULUS))
    f_mine = np.asarray(np.mod(b.values - triple.y, SHARE_MODULUS))
    payload = e_mine.astype(">u4").tobytes() + f_mine.astype(">u4").tobytes()
    channel.send(Frame(MSG["MUL_EXCHANGE"], session, payload))
    reply = channel.expect("MUL_EXCHANGE")
    e_len = 4 * e_mine.size
    e_theirs = (
        np.frombuffer(reply.payload[:e_len], dtype=">u4").astype(np.int64).reshape(a.shape)
    )
    f_theirs = (
        np.frombuffer(reply.payload[e_len:], dtype=">u4").astype(np.int64).reshape(b.shape)
    )
    e = np.mod(e_mine + e_theirs, SHARE_MODULUS)
    f = np.mod(f_mine + f_theirs, SHARE_MODULUS)
    c = (
        i * _combine(e, f, triple.mode)
        + _combine(triple.x, f, triple.mode)
        + _combine(e, triple.y, triple.mode)
        + triple.z
    )
    return ShareMatrix(c, i)


def dealer_triple_gen(
    shape_x, shape_y, mode: str, seed: int, run_mode: str = "dealer"
) -> tuple[TripleShare, TripleShare]:
    """Trusted-dealer triple generation for test and benchmark runs."""
    if run_mode == "secure":
        raise ConfigError("dealer triples are not available in secure mode")
    rng = np.random.default_rng(seed)
    x = rng.integers(0, SHARE_MODULUS, size=shape_x, dtype=np.int64)
    y = rng.integers(0, SHARE_MODULUS, size=shape_y, dtype=np.int64)
    z = _combine(x, y, mode)
    x0 = rng.integers(0, SHARE_MODULUS, size=x.shape, dtype=np.int64)
    y0 = rng.integers(0, SHARE_MODULUS, size=y.shape, dtype=np.int64)
    z0 = rng.integers(0, SHARE_MODULUS, size=z.shape, dtype=np.int64)
    t0 = TripleShare(x0, y0, z0, 0, mode)
    t1 = TripleShare(
        np.mod(x - x0, SHARE_MODULUS),
        np.mod(y - y0, SHARE_MODULUS),
        np.mod(z - z0, SHARE_MODULUS),
        1,
        mode,
    )
    return t0, t1


def _product_terms(mode: str, shape_x, shape_y):
    """Scalar product terms (x index, y index, z index) of X op Y."""
    if mode == "elementwise":
        n = int(np.prod(shape_x))
        return [(e, e, e) for e in range(n)], shape_x
    if mode == "matmul":
        s, t = shape_x
        t2, u = shape_y
        if t != t2:
            raise ValueError("matmul shape mismatch")
        terms = [
            (i * t + k, k * u + j, i * u + j)
            for i in range(s)
            for j in range(u)
            for k in range(t)
        ]
        return terms, (s, u)
    raise ValueError(f"unknown triple mode {mode!r}")


def _cross_send(ot_sender: OTSender, scalars: list[int]) -> list[int]:
    """Sender side of a batch of Gilboa scalar products: supplies the
    per-bit correlations a*2^b and keeps the negated pad sums."""
    deltas = [a * (1 << b) % SHARE_MODULUS for a in scalars for b in range(31)]
    vs = ot_sender.send_correlated(deltas)
    return [
        -sum(vs[i * 31 : (i + 1) * 31]) % SHARE_MODULUS for i in range(len(scalars))
    ]


def _cross_recv(ot_receiver: OTReceiver, scalars: list[int]) -> list[int]:
    """Receiver side: choice bits are the bits of its own factors."""
    bits = [(b_val >> b) & 1 for b_val in scalars for b in range(31)]
    ws = ot_receiver.recv_correlated(bits)
    return [
        sum(ws[i * 31 : (i + 1) * 31]) % SHARE_MODULUS for i in range(len(scalars))
    ]


def triple_gen_cot(
    party: int,
    mode: str,
    shape_x,
    shape_y,
    channel: Channel,
    ot_sender: OTSender,
    ot_receiver: OTReceiver,
    rng: np.random.Generator,
    session: int = 0,
) -> TripleShare:
    """Generate one multiplication triple with the counterpart over OT.

    Each party samples its X and Y share halves; the cross terms
    X_0 op Y_1 and X_1 op Y_0 are built from 31 correlated OTs per scalar
    product term, with the receiver's choice bits taken from its Y share.
    """
    x = rng.integers(0, SHARE_MODULUS, size=shape_x, dtype=np.int64)
    y = rng.integers(0, SHARE_MODULUS, size=shape_y, dtype=np.int64)
    header = struct.pack(">16s", mode.encode())
    channel.send(Frame(MSG["TRIPLE_GEN_INIT"], session, header))
    peer_header = channel.expect("TRIPLE_GEN_INIT")
    if peer_header.payload != header:
        raise ValueError("triple mode disagreement with counterpart")

    terms, shape_z = _product_terms(mode, shape_x, shape_y)
    x_flat = x.reshape(-1)
    y_flat = y.reshape(-1)
    x_scalars = [int(x_flat[ix]) for ix, _, _ in terms]
    y_scalars = [int(y_flat[iy]) for _, iy, _ in terms]

    # Cross term X_0 op Y_1: party 0 sends correlations, party 1 chooses.
    if party == 0:
        contrib_a = _cross_send(ot_sender, x_scalars)
        contrib_b = _cross_recv(ot_receiver, y_scalars)
    else:
        contrib_a = _cross_recv(ot_receiver, y_scalars)
        # Cross term X_1 op Y_0: roles reversed.
        contrib_b = _cross_send(ot_sender, x_scalars)

    z = _combine(x, y, mode).reshape(-1)
    for t, (ca, cb) in enumerate(zip(contrib_a, contrib_b)):
        z[terms[t][2]] = (z[terms[t][2]] + ca + cb) % SHARE_MODULUS
    return TripleShare(x, y, np.mod(z.reshape(shape_z), SHARE_MODULUS), party, mode)


@dataclass
class TriplePool:
    """Precomputed triples keyed by (mode, x shape, y shape); each triple
    is handed out exactly once. An optional provider refills on demand."""

    provider: object = None
    _stock: dict = field(default_factory=dict)

    def put(self, triple: TripleShare) -> None:
        self._stock.setdefault(triple.shape_key, []).append(triple)

    def size(self, mode: str, shape_x, shape_y) -> int:
        return len(self._stock.get((mode, tuple(shape_x), tuple(shape_y)), []))

    def take(self, mode: str, shape_x, shape_y) -> TripleShare:
        key = (mode, tuple(shape_x), tuple(shape_y))
        stock = self._stock.get(key)
        if stock:
            return stock.pop()
        if self.provider is not None:
            return self.provider(mode, shape_x, shape_y)
        raise PoolEmpty(f"no triple of shape {key} available")
