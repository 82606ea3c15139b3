import hashlib
import json
import random
import socket
import time
from pathlib import Path

import pytest

from privgraph.cli import main
from privgraph.graph import PlaintextEngine, build_inverted_index, load_edge_list


@pytest.fixture(scope="module")
def edge_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "edges.txt"
    rng = random.Random(9)
    seen = set()
    lines = ["# sample graph"]
    while len(seen) < 250:
        a, b = rng.randrange(50), rng.randrange(50)
        if a != b and (a, b) not in seen:
            seen.add((a, b))
            lines.append(f"{a} {b} {rng.randint(1, 100)}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def workspace(edge_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("ws")
    rc = main([
        "setup", "--edges", str(edge_file), "--out", str(out),
        "--shards", "2", "--seed", "9",
    ])
    assert rc == 0
    return out


def edb_digest(edb_dir: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(edb_dir.rglob("*.bin")):
        h.update(p.read_bytes())
    return h.hexdigest()


class TestSetup:
    def test_outputs_exist(self, workspace):
        assert (workspace / "keystore.bin").is_file()
        assert (workspace / "frequencies.json").is_file()
        assert (workspace / "edb" / "cluster1" / "shard1" / "tset.bin").is_file()

    def test_deterministic_with_seed(self, edge_file, workspace, tmp_path):
        rc = main([
            "setup", "--edges", str(edge_file), "--out", str(tmp_path / "again"),
            "--shards", "2", "--seed", "9",
        ])
        assert rc == 0
        assert edb_digest(tmp_path / "again" / "edb") == edb_digest(workspace / "edb")

    def test_storage_report(self, tmp_path, edge_file, capsys):
        main(["setup", "--edges", str(edge_file), "--out", str(tmp_path / "r"), "--seed", "9"])
        out = capsys.readouterr().out
        assert "per-tuple 72 B" in out
        shard_bytes = [
            int(x.split("tset ")[1].split(" B")[0]) +
            int(x.split("xset ")[1].split(" B")[0])
            for x in out.splitlines() if "cluster" in x and "tset" in x
        ]
        total = int(out.split("storage   total ")[1].split(" B")[0])
        assert sum(shard_bytes) == total

    def test_missing_file(self, tmp_path):
        assert main(["setup", "--edges", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


class TestQuery:
    def _query(self, workspace, text, *extra):
        return main([
            "query", text, "--edb", str(workspace / "edb"),
            "--keystore", str(workspace / "keystore.bin"), "--local", *extra,
        ])

    def test_matches_oracle(self, workspace, edge_file, capsys):
        index = build_inverted_index(load_edge_list(edge_file, "friend"))
        term = max(index, key=lambda t: len(index[t]))
        assert self._query(workspace, f"(term {term})") == 0
        got = {int(line) for line in capsys.readouterr().out.split()}
        assert got == index[term].ids()

    def test_sorted_with_ranks(self, workspace, edge_file, capsys):
        index = build_inverted_index(load_edge_list(edge_file, "friend"))
        engine = PlaintextEngine(index)
        term = max(index, key=lambda t: len(index[t]))
        assert self._query(workspace, f"(term {term})", "--sort", "--top-k", "3") == 0
        lines = capsys.readouterr().out.splitlines()
        assert [int(l.split("\t")[0]) for l in lines] == [1, 2, 3]
        oracle = engine.query(
            __import__("privgraph.sexpr", fromlist=["parse_sexpr"]).parse_sexpr(
                f"(term {term})"
            ),
            sort=True,
        )
        score_of = {eid: sk for sk, eid in oracle}
        got_scores = [score_of[int(l.split("\t")[1])] for l in lines]
        assert got_scores == [sk for sk, _ in oracle[:3]]

    def test_malformed_query(self, workspace, capsys):
        assert self._query(workspace, "(and friend:1") == 2
        assert "position" in capsys.readouterr().err

    def test_unknown_operator(self, workspace, capsys):
        assert self._query(workspace, "(xor friend:1 friend:2)") == 2

    def test_local_requires_edb(self, workspace):
        assert main([
            "query", "(term friend:1)", "--keystore",
            str(workspace / "keystore.bin"), "--local",
        ]) == 2


class TestAudit:
    def test_clean_run(self, workspace, tmp_path, capsys):
        rec = tmp_path / "t.bin"
        rc = main([
            "query", "(term friend:1)", "--edb", str(workspace / "edb"),
            "--keystore", str(workspace / "keystore.bin"), "--local",
            "--sort", "--record", str(rec),
        ])
        assert rc == 0
        assert main([
            "audit", "--transcript", str(rec),
            "--keystore", str(workspace / "keystore.bin"),
        ]) == 0
        assert "no violations" in capsys.readouterr().out

    def test_leaky_transcript_fails(self, tmp_path, capsys):
        from privgraph.transport import MSG, Frame, Transcript, save_transcript

        t = Transcript()
        t.record("is00", "send", Frame(MSG["TUPLE_COUNT"], 1, b"\x00\x00\x00\x05"))
        t.record("is00", "send", Frame(MSG["RESULT"], 1, b"\x00\x01\x00\x00\x00\x01id=7"))
        path = tmp_path / "leaky.bin"
        save_transcript(t, path)
        assert main(["audit", "--transcript", str(path)]) == 1
        assert "VIOLATIONS" in capsys.readouterr().out

    def test_not_a_transcript(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"hello")
        assert main(["audit", "--transcript", str(bad)]) == 2


class TestBench:
    def test_set_queries_small(self, capsys):
        rc = main([
            "bench", "--suite", "set-queries",
            "--selectivity", "10", "--max-selectivity", "8",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "work independence" in out and "True" in out

    def test_arithmetic_small(self, capsys):
        assert main(["bench", "--suite", "arithmetic", "--size", "1000"]) == 0
        assert "mul" in capsys.readouterr().out

    def test_sort_small(self, tmp_path, capsys):
        metrics = tmp_path / "m.json"
        rc = main([
            "bench", "--suite", "sort", "--max-k", "8",
            "--metrics", str(metrics),
        ])
        assert rc == 0
        rows = json.loads(metrics.read_text())["sort"]["rows"]
        assert [r["k"] for r in rows] == [2, 4, 8]

    def test_throughput_small(self, capsys):
        rc = main([
            "bench", "--suite", "throughput",
            "--queries", "6", "--nodes", "60", "--edge-count", "300",
        ])
        assert rc == 0
        assert "ratio" in capsys.readouterr().out


def free_ports(n):
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


class TestTcpMode:
    def test_tcp_matches_local(self, workspace, edge_file):
        """Multi-endpoint TCP deployment returns the same results as
        --local for the same queries."""
        from privgraph.crypto import load_keystore
        from privgraph.planner import FrontEnd
        from privgraph.server import IndexServer, TcpTopology

        ports = free_ports(4)
        names = ["is00", "is01", "is10", "is11"]
        topo = TcpTopology({n: ("127.0.0.1", p) for n, p in zip(names, ports)})
        servers = [
            IndexServer.from_edb_dir(
                workspace / "edb", cluster, shard, topo, timeout=20.0
            )
            for cluster in (0, 1)
            for shard in (0, 1)
        ]
        for s in servers:
            s.start()
        try:
            keys = load_keystore(workspace / "keystore.bin")
            lengths = json.loads((workspace / "frequencies.json").read_text())
            index = build_inverted_index(load_edge_list(edge_file, "friend"))
            engine = PlaintextEngine(index)
            fe = FrontEnd(keys, topo, 2, lengths=lengths, timeout=30.0)
            term = max(index, key=lambda t: len(index[t]))
            assert set(fe.query(f"(term {term})")) == index[term].ids()
            got = fe.query(f"(term {term})", sort=True)
            oracle = engine.query(
                __import__("privgraph.sexpr", fromlist=["parse_sexpr"]).parse_sexpr(
                    f"(term {term})"
                ),
                sort=True,
            )
            score_of = {eid: sk for sk, eid in oracle}
            assert [score_of[i] for i in got] == [sk for sk, _ in oracle]
        finally:
            for s in servers:
                s.stop()
            time.sleep(0.1)
