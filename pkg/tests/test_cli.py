import numpy as np
import pytest

from qfem import circuit, fem
from qfem.cli import main


def run(tmp_path, name, *args):
    out = tmp_path / name
    assert main([*args, "--out", str(out)]) == 0
    return out.read_text()


def body(text):
    return [ln for ln in text.splitlines() if not ln.startswith("#")]


def test_assemble(tmp_path):
    run(tmp_path, "s.csv", "assemble", "--d", "2", "--L", "2")
    S = fem.read_matrix_csv(tmp_path / "s.csv")
    assert np.allclose(S, fem.assemble_stiffness(fem.LevelSpec(2, 2)))


def test_encode_dump(tmp_path):
    dump = tmp_path / "cf.txt"
    text = run(tmp_path, "e.csv", "encode", "--L", "3", "--path", "optimized", "--dump", str(dump))
    rows = dict(ln.split(",") for ln in body(text)[1:])
    assert int(rows["qubits"]) == 7 and float(rows["max_abs_error_vs_dense"]) < 1e-12
    c = circuit.loads(dump.read_text())
    assert c.n_qubits == 7 and len(c.gates) > 0


def test_prep_table(tmp_path):
    text = run(tmp_path, "p.csv", "prep", "--L", "2", "--f", "poly:0,1")
    lines = body(text)
    assert lines[0] == "k,x,g_k"
    assert float(lines[1].split(",")[2]) == pytest.approx(1.0)


def test_qoi_reproducible(tmp_path):
    args = ("qoi", "--L", "3", "--mode", "all", "--seed", "11", "--shots", "2000")
    a = run(tmp_path, "a.csv", *args)
    b = run(tmp_path, "b.csv", *args)
    assert a == b
    modes = [ln.split(",")[0] for ln in body(a)[1:]]
    assert modes == ["emulation", "exact", "sampled"]
    assert "# seed=11" in a


def test_seed_required(capsys):
    assert main(["qoi", "--mode", "sampled"]) == 2
    assert main(["noise"]) == 2


def test_condition_small(tmp_path):
    text = run(tmp_path, "c.csv", "condition", "--levels", "3..4")
    lines = body(text)
    assert lines[0] == "L,d,method,steps,rel_error"
    assert [ln.split(",")[:3] for ln in lines[1:]] == [["3", "1", "bpx"], ["3", "1", "none"],
                                                       ["4", "1", "bpx"], ["4", "1", "none"]]


def test_condition_truncation_warning(tmp_path):
    text = run(tmp_path, "c2.csv", "condition", "--d", "2", "--levels", "2..3", "--level-cap", "2")
    assert "# warning=" in text
    assert all(ln.split(",")[0] == "2" for ln in body(text)[1:])


def test_noise_small_reproducible(tmp_path):
    args = ("noise", "--L", "2", "--eps2", "1e-3,0", "--J", "1,2", "--runs", "4", "--shots", "500",
            "--pool", "3", "--seed", "5")
    a = run(tmp_path, "n1.csv", *args)
    b = run(tmp_path, "n2.csv", *args)
    assert a == b
    lines = body(a)
    assert lines[0] == "eps2,J,mean,ci_low,ci_high"
    assert len(lines) == 5
    for ln in lines[1:]:
        _, _, mean, lo, hi = (float(v) for v in ln.split(","))
        assert lo <= mean <= hi
