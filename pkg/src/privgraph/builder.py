"""The setup pipeline: partition the inverted index by result id, encrypt
posting lists into per-shard TSets, build per-shard XSet Bloom filters,
split sort-keys into additive shares, and emit per-server encrypted
databases for both clusters.

Counterpart servers (cluster 0 shard j, cluster 1 shard j) hold identical
TSet/XSet bytes except for the sort-key share field of each tuple.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .bloom import BloomFilter
from .crypto import (
    CIPHERTEXT_BYTES,
    ELEMENT_BYTES,
    GroupContext,
    MasterKeyBundle,
    blinding_value,
    encrypt_id,
    hash_to_shard,
    stag_derive,
    term_key,
    xtag_compute,
)
from .graph import PostingList

__all__ = [
    "PartitionConfig",
    "EncryptedTuple",
    "TSetShard",
    "XSetFilter",
    "EncryptedDatabase",
    "partition",
    "share_sortkeys",
    "build_tset_pair",
    "build_xset",
    "build_edb",
    "emit_edb",
    "load_edb",
    "make_rng",
]

SHARE_MODULUS = 1 << 31
TUPLE_BYTES = 4 + CIPHERTEXT_BYTES + ELEMENT_BYTES  # share | e_id | y


@dataclass(frozen=True)
class PartitionConfig:
    shards_per_cluster: int = 1
    block_size: int = 100
    bloom_fpr: float = 1e-6
    shard_hash: str = "sha256"
    seed: int = 0

    def __post_init__(self):
        if self.shards_per_cluster < 1:
            raise ValueError("shards_per_cluster must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def to_dict(self):
        return {
            "shards_per_cluster": self.shards_per_cluster,
            "block_size": self.block_size,
            "bloom_fpr": self.bloom_fpr,
            "shard_hash": self.shard_hash,
            "share_modulus": SHARE_MODULUS,
        }


def make_rng(seed: int):
    """Deterministic byte stream for reproducible EDB builds: SHA-256 in
    counter mode over the seed."""
    state = {"counter": 0, "buf": b""}
    seed_bytes = struct.pack(">Q", seed & (1 << 64) - 1)

    def draw(n: int) -> bytes:
        while len(state["buf"]) < n:
            block = hashlib.sha256(seed_bytes + struct.pack(">Q", state["counter"])).digest()
            state["counter"] += 1
            state["buf"] += block
        out, state["buf"] = state["buf"][:n], state["buf"][n:]
        return out

    return draw


@dataclass(frozen=True)
class EncryptedTuple:
    sortkey_share: int  # Z_{2^31}, cluster-specific
    e_id: bytes
    y: int  # blinding exponent in Z_q

    def pack(self) -> bytes:
        return (
            struct.pack(">I", self.sortkey_share)
            + self.e_id
            + self.y.to_bytes(ELEMENT_BYTES, "big")
        )

    @classmethod
    def unpack(cls, data: bytes) -> "EncryptedTuple":
        share = struct.unpack(">I", data[:4])[0]
        e_id = data[4 : 4 + CIPHERTEXT_BYTES]
        y = int.from_bytes(data[4 + CIPHERTEXT_BYTES :], "big")
        return cls(share, e_id, y)


class TSetShard:
    """Key-value map (stag || block counter) -> block of encrypted tuples,
    plus the clear block-counter map that enables parallel block fetches."""

    def __init__(self, block_size: int):
        self.block_size = block_size
        self.blocks: dict[bytes, list[EncryptedTuple]] = {}
        self.counters: dict[bytes, int] = {}

    @staticmethod
    def block_key(stag: bytes, block_index: int) -> bytes:
        return stag + struct.pack(">I", block_index)

    def store(self, stag: bytes, tuples: list[EncryptedTuple]) -> None:
        if not tuples:
            return
        n_blocks = (len(tuples) + self.block_size - 1) // self.block_size
        for b in range(n_blocks):
            chunk = tuples[b * self.block_size : (b + 1) * self.block_size]
            self.blocks[self.block_key(stag, b + 1)] = chunk
        self.counters[stag] = n_blocks

    def retrieve(self, stag: bytes) -> list[EncryptedTuple]:
        count = self.counters.get(stag)
        if count is None:
            return []
        out = []
        for b in range(1, count + 1):
            out.extend(self.blocks[self.block_key(stag, b)])
        return out

    def tuple_count(self) -> int:
        return sum(len(v) for v in self.blocks.values())

    def to_bytes(self, zero_shares: bool = False) -> bytes:
        parts = [struct.pack(">4sHII", b"PGTS", 1, self.block_size, len(self.counters))]
        for stag in sorted(self.counters):
            parts.append(stag + struct.pack(">I", self.counters[stag]))
        for key in sorted(self.blocks):
            block = self.blocks[key]
            parts.append(key + struct.pack(">H", len(block)))
            for tup in block:
                if zero_shares:
                    tup = EncryptedTuple(0, tup.e_id, tup.y)
                parts.append(tup.pack())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TSetShard":
        magic, version, block_size, n_stags = struct.unpack(">4sHII", data[:14])
        if magic != b"PGTS" or version != 1:
            raise ValueError("not a TSet blob")
        shard = cls(block_size)
        off = 14
        for _ in range(n_stags):
            stag = data[off : off + 16]
            (count,) = struct.unpack(">I", data[off + 16 : off + 20])
            shard.counters[stag] = count
            off += 20
        total_blocks = sum(shard.counters.values())
        for _ in range(total_blocks):
            key = data[off : off + 20]
            (n,) = struct.unpack(">H", data[off + 20 : off + 22])
            off += 22
            block = []
            for _ in range(n):
                block.append(EncryptedTuple.unpack(data[off : off + TUPLE_BYTES]))
                off += TUPLE_BYTES
            shard.blocks[key] = block
        if off != len(data):
            raise ValueError("TSet blob has trailing bytes")
        return shard


class XSetFilter:
    """Bloom-filter membership set over canonical xtag encodings."""

    def __init__(self, bloom: BloomFilter, ctx: GroupContext):
        self.bloom = bloom
        self.ctx = ctx

    def contains(self, xtag: int) -> bool:
        return self.ctx.encode(xtag) in self.bloom

    @property
    def count(self):
        return self.bloom.count

    def to_bytes(self) -> bytes:
        return self.bloom.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes, ctx: GroupContext) -> "XSetFilter":
        return cls(BloomFilter.from_bytes(data), ctx)


def partition(index: dict[str, PostingList], config: PartitionConfig):
    """Split each posting list over shards by hashing on result id.
    Shards are disjoint and their union is the original index."""
    n = config.shards_per_cluster
    shards = [dict() for _ in range(n)]
    for term, plist in index.items():
        for sort_key, eid in plist.entries:
            j = hash_to_shard(eid, n, config.shard_hash)
            sub = shards[j].get(term)
            if sub is None:
                sub = shards[j][term] = PostingList(term)
            sub.entries.append((sort_key, eid))
    return shards


def share_sortkeys(sort_keys: list[int], rng) -> list[tuple[int, int]]:
    """Split each sort key into two additive shares mod 2^31; the cluster-0
    share is uniform, the cluster-1 share is the difference."""
    out = []
    for key in sort_keys:
        share0 = int.from_bytes(rng(4), "big") % SHARE_MODULUS
        share1 = (key - share0) % SHARE_MODULUS
        out.append((share0, share1))
    return out


def _ordered_entries(plist: PostingList):
    # stored in descending sort-key order (ascending id on ties) so that
    # un-sorted term queries still return a meaningfully ordered list
    return sorted(plist.entries, key=lambda e: (-e[0], e[1]))


def build_tset_pair(
    sub_index: dict[str, PostingList],
    keys: MasterKeyBundle,
    ctx: GroupContext,
    config: PartitionConfig,
    rng,
) -> tuple[TSetShard, TSetShard]:
    """Encrypt one shard's posting lists into the two clusters' TSets.
    e_id and the blinding value y are identical across clusters; only the
    sort-key shares differ."""
    tset0 = TSetShard(config.block_size)
    tset1 = TSetShard(config.block_size)
    for term in sorted(sub_index):
        plist = sub_index[term]
        stag = stag_derive(keys, term)
        k_t = term_key(keys, term)
        entries = _ordered_entries(plist)
        shares = share_sortkeys([sk for sk, _ in entries], rng)
        tuples0, tuples1 = [], []
        for c, ((sort_key, eid), (share0, share1)) in enumerate(zip(entries, shares), start=1):
            e_id = encrypt_id(k_t, eid, rng)
            y = blinding_value(keys, ctx, term, c, eid)
            tuples0.append(EncryptedTuple(share0, e_id, y))
            tuples1.append(EncryptedTuple(share1, e_id, y))
        tset0.store(stag, tuples0)
        tset1.store(stag, tuples1)
    return tset0, tset1


def build_xset(
    sub_index: dict[str, PostingList],
    keys: MasterKeyBundle,
    ctx: GroupContext,
    config: PartitionConfig,
) -> XSetFilter:
    n_items = sum(len(p) for p in sub_index.values())
    bloom = BloomFilter(n_items, config.bloom_fpr)
    for term in sorted(sub_index):
        for _, eid in sub_index[term].entries:
            bloom.add(ctx.encode(xtag_compute(keys, ctx, term, eid)))
    return XSetFilter(bloom, ctx)


@dataclass
class ShardData:
    tset: TSetShard
    xset: XSetFilter
    manifest: dict = field(default_factory=dict)


@dataclass
class EncryptedDatabase:
    config: PartitionConfig
    clusters: list  # clusters[i][j] -> ShardData

    @property
    def shards_per_cluster(self):
        return self.config.shards_per_cluster


def build_edb(
    index: dict[str, PostingList],
    keys: MasterKeyBundle,
    ctx: GroupContext,
    config: PartitionConfig,
) -> EncryptedDatabase:
    rng = make_rng(config.seed)
    shards = partition(index, config)
    clusters = [[], []]
    for j, sub_index in enumerate(shards):
        tset0, tset1 = build_tset_pair(sub_index, keys, ctx, config, rng)
        xset = build_xset(sub_index, keys, ctx, config)
        n_entries = sum(len(p) for p in sub_index.values())
        for i, tset in enumerate((tset0, tset1)):
            manifest = {
                "cluster": i,
                "shard": j,
                "config": config.to_dict(),
                "tuple_count": n_entries,
                "xset_count": xset.count,
                "tuple_bytes": TUPLE_BYTES,
                "seed_fingerprint": hashlib.sha256(
                    struct.pack(">Q", config.seed)
                ).hexdigest()[:16],
            }
            clusters[i].append(ShardData(tset, xset, manifest))
        # both clusters share one XSet object: identical bytes by construction
    return EncryptedDatabase(config, clusters)


def emit_edb(edb: EncryptedDatabase, out_dir) -> None:
    """Write edb/cluster{i}/shard{j}/{tset.bin,xset.bin,manifest.json}."""
    out_dir = Path(out_dir)
    for i in (0, 1):
        for j, shard in enumerate(edb.clusters[i]):
            d = out_dir / f"cluster{i}" / f"shard{j}"
            try:
                d.mkdir(parents=True, exist_ok=True)
                tset_bytes = shard.tset.to_bytes()
                xset_bytes = shard.xset.to_bytes()
                (d / "tset.bin").write_bytes(tset_bytes)
                (d / "xset.bin").write_bytes(xset_bytes)
                manifest = dict(shard.manifest)
                manifest["tset_sha256"] = hashlib.sha256(tset_bytes).hexdigest()
                manifest["xset_sha256"] = hashlib.sha256(xset_bytes).hexdigest()
                manifest["tset_bytes"] = len(tset_bytes)
                manifest["xset_bytes"] = len(xset_bytes)
                shard.manifest = manifest
                (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
            except OSError as exc:
                raise OSError(f"failed writing EDB shard {d}: {exc}") from exc


def load_edb(edb_dir, ctx: GroupContext, verify: bool = True) -> EncryptedDatabase:
    edb_dir = Path(edb_dir)
    clusters = [[], []]
    config = None
    for i in (0, 1):
        j = 0
        while (edb_dir / f"cluster{i}" / f"shard{j}").is_dir():
            d = edb_dir / f"cluster{i}" / f"shard{j}"
            manifest = json.loads((d / "manifest.json").read_text())
            tset_bytes = (d / "tset.bin").read_bytes()
            xset_bytes = (d / "xset.bin").read_bytes()
            if verify:
                if hashlib.sha256(tset_bytes).hexdigest() != manifest["tset_sha256"]:
                    raise ValueError(f"checksum mismatch for {d / 'tset.bin'}")
                if hashlib.sha256(xset_bytes).hexdigest() != manifest["xset_sha256"]:
                    raise ValueError(f"checksum mismatch for {d / 'xset.bin'}")
            clusters[i].append(
                ShardData(
                    TSetShard.from_bytes(tset_bytes),
                    XSetFilter.from_bytes(xset_bytes, ctx),
                    manifest,
                )
            )
            if config is None:
                cfg = manifest["config"]
                config = PartitionConfig(
                    shards_per_cluster=cfg["shards_per_cluster"],
                    block_size=cfg["block_size"],
                    bloom_fpr=cfg["bloom_fpr"],
                    shard_hash=cfg["shard_hash"],
                )
            j += 1
    if config is None:
        raise ValueError(f"no EDB shards found under {edb_dir}")
    return EncryptedDatabase(config, clusters)
