import numpy as np
import pytest

from privgraph.circuits import (
    SCORE_BITS,
    CircuitBuilder,
    build_sort_circuit,
    int_to_bits,
    simulate,
)
from privgraph.garble import (
    GarbledCircuit,
    GarbleError,
    decode,
    evaluate,
    garble,
    select_labels,
)


def garbled_run(circuit, inputs):
    """Garble, select labels for the given plaintext bits, evaluate, decode."""
    gc, label_map, delta = garble(circuit)
    labels = {
        name: select_labels(label_map[name], delta, bits)
        for name, bits in inputs.items()
    }
    return decode(gc, evaluate(circuit, gc, labels))


class TestSingleGates:
    def test_and_truth_table(self):
        b = CircuitBuilder()
        x = b.input_bundle("x", 2)
        b.mark_outputs([b.and_(*x)])
        c = b.build()
        bits = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8)
        out = garbled_run(c, {"x": bits})
        assert out[:, 0].tolist() == [0, 0, 0, 1]

    def test_xor_has_no_table(self):
        b = CircuitBuilder()
        x = b.input_bundle("x", 2)
        b.mark_outputs([b.xor(*x)])
        c = b.build()
        gc, _, _ = garble(c)
        assert gc.and_count == 0
        bits = np.array([[0, 1], [1, 1]], dtype=np.uint8)
        assert garbled_run(c, {"x": bits})[:, 0].tolist() == [1, 0]

    def test_inv_free(self):
        b = CircuitBuilder()
        x = b.input_bundle("x", 1)
        b.mark_outputs([b.inv(x[0])])
        c = b.build()
        bits = np.array([[0], [1]], dtype=np.uint8)
        assert garbled_run(c, {"x": bits})[:, 0].tolist() == [1, 0]


class TestAgainstSimulator:
    def test_adder_circuit(self):
        b = CircuitBuilder()
        xa = b.input_bundle("a", 8)
        xb = b.input_bundle("b", 8)
        b.mark_outputs(b.add_mod(xa, xb))
        c = b.build()
        rng = np.random.default_rng(5)
        a_bits = rng.integers(0, 2, size=(50, 8), dtype=np.uint8)
        b_bits = rng.integers(0, 2, size=(50, 8), dtype=np.uint8)
        plain = simulate(c, {"a": a_bits.astype(bool), "b": b_bits.astype(bool)})
        got = garbled_run(c, {"a": a_bits, "b": b_bits})
        assert np.array_equal(got.astype(bool), plain)

    def test_sort_circuit_8(self):
        sc = build_sort_circuit(8, 4)
        rng = np.random.default_rng(6)
        inputs = {
            name: rng.integers(0, 2, size=(10, len(wires)), dtype=np.uint8)
            for name, wires in sc.circuit.inputs.items()
        }
        plain = simulate(sc.circuit, {k: v.astype(bool) for k, v in inputs.items()})
        got = garbled_run(sc.circuit, inputs)
        assert np.array_equal(got.astype(bool), plain)

    def test_fresh_garbling_decodes_identically(self):
        b = CircuitBuilder()
        y = b.input_bundle("x", 4)
        b.mark_outputs(b.add_mod(y[:2], y[2:]))
        c = b.build()
        bits = np.array([[1, 0, 1, 1]], dtype=np.uint8)
        out1 = garbled_run(c, {"x": bits})
        out2 = garbled_run(c, {"x": bits})
        assert np.array_equal(out1, out2)


class TestBlob:
    def test_round_trip(self):
        sc = build_sort_circuit(4, 4)
        gc, label_map, delta = garble(sc.circuit)
        clone = GarbledCircuit.from_bytes(gc.to_bytes())
        assert np.array_equal(clone.tables, gc.tables)
        assert np.array_equal(clone.dec, gc.dec)
        rng = np.random.default_rng(7)
        inputs = {
            name: rng.integers(0, 2, size=(3, len(w)), dtype=np.uint8)
            for name, w in sc.circuit.inputs.items()
        }
        labels = {
            name: select_labels(label_map[name], delta, bits)
            for name, bits in inputs.items()
        }
        a = decode(gc, evaluate(sc.circuit, gc, labels))
        b = decode(clone, evaluate(sc.circuit, clone, labels))
        assert np.array_equal(a, b)

    def test_bad_magic(self):
        with pytest.raises(GarbleError):
            GarbledCircuit.from_bytes(b"XXXX" + bytes(8))

    def test_corrupted_table_changes_output(self):
        b = CircuitBuilder()
        x = b.input_bundle("x", 2)
        b.mark_outputs([b.and_(*x)])
        c = b.build()
        gc, label_map, delta = garble(c)
        bits = np.array([[1, 1]], dtype=np.uint8)
        labels = {"x": select_labels(label_map["x"], delta, bits)}
        good = evaluate(c, gc, labels)
        gc.tables = gc.tables.copy()
        gc.tables[0] ^= 0xFF
        bad = evaluate(c, gc, labels)
        assert not np.array_equal(good, bad)


class TestStructure:
    def test_batch_mismatch_rejected(self):
        b = CircuitBuilder()
        x = b.input_bundle("x", 1)
        y = b.input_bundle("y", 1)
        b.mark_outputs([b.xor(x[0], y[0])])
        c = b.build()
        gc, label_map, delta = garble(c)
        labels = {
            "x": select_labels(label_map["x"], delta, np.zeros((2, 1), dtype=np.uint8)),
            "y": select_labels(label_map["y"], delta, np.zeros((3, 1), dtype=np.uint8)),
        }
        with pytest.raises(GarbleError):
            evaluate(c, gc, labels)

    def test_labels_differ_by_delta(self):
        b = CircuitBuilder()
        x = b.input_bundle("x", 1)
        b.mark_outputs([b.inv(x[0])])
        gc, label_map, delta = garble(b.build())
        zero = label_map["x"][0]
        one = select_labels(label_map["x"], delta, np.array([[1]], dtype=np.uint8))[0, 0]
        assert np.array_equal(zero ^ one, delta)
        assert delta[15] & 1 == 1
