"""Single-process deployment helper: both clusters' shard servers over an
in-process loopback fabric, plus a front-end factory. Used by the CLI's
--local mode and throughout the tests."""

from __future__ import annotations

from .builder import EncryptedDatabase
from .crypto import MasterKeyBundle
from .planner import FrontEnd
from .server import IndexServer, LoopbackTopology, server_name
from .transport import Transcript

__all__ = ["LocalCluster"]


class LocalCluster:
    """Starts one IndexServer per (cluster, shard) of an in-memory EDB."""

    def __init__(
        self,
        edb: EncryptedDatabase,
        *,
        run_mode: str = "dealer",
        dealer_seed: int = 0,
        transcript: Transcript | None = None,
        max_sort_k: int = 1024,
        timeout: float = 60.0,
    ):
        self.topology = LoopbackTopology()
        self.transcript = transcript
        self.n_shards = edb.shards_per_cluster
        self.servers: dict[str, IndexServer] = {}
        for cluster in (0, 1):
            for j in range(self.n_shards):
                server = IndexServer(
                    cluster,
                    j,
                    self.n_shards,
                    edb.clusters[cluster][j],
                    self.topology,
                    run_mode=run_mode,
                    dealer_seed=dealer_seed,
                    transcript=transcript,
                    max_sort_k=max_sort_k,
                    timeout=timeout,
                )
                self.servers[server.name] = server
        for server in self.servers.values():
            server.start()

    def server(self, cluster: int, shard: int) -> IndexServer:
        return self.servers[server_name(cluster, shard)]

    def stop_server(self, cluster: int, shard: int) -> None:
        """Take one server offline (for degraded-mode behavior)."""
        name = server_name(cluster, shard)
        self.servers.pop(name).stop()

    def front_end(self, keys: MasterKeyBundle, **kwargs) -> FrontEnd:
        kwargs.setdefault("transcript", self.transcript)
        return FrontEnd(keys, self.topology, self.n_shards, **kwargs)

    def reset_exp_counters(self) -> None:
        for server in self.servers.values():
            server.reset_exp_counter()

    def exp_counts(self) -> dict[str, int]:
        return {name: s.exp_count for name, s in self.servers.items()}

    def stop(self) -> None:
        for server in self.servers.values():
            server.stop()
        self.servers.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
        return False
