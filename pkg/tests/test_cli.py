import io
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from qiloss.cli import run
from qiloss.files import format_descriptors, parse_descriptors, read_descriptors, write_descriptors
from qiloss.quasi_iso import QiParams, find_violating_pairs
from qiloss.synth import SynthConfig, generate

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
TWO_MARGIN_LOSS = 2.1269280110429727


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_audit_collinear_fixture():
    code, out, _ = call("audit", FIXTURES / "collinear.csv")
    rep = json.loads(out)
    assert code == 0 and rep["ratio"] == 0.0
    assert list(rep) == ["params", "counts", "ratio", "loss", "worst_violations"]
    assert rep["params"] == {"k": 1.5, "b": 0.5, "epsilon": 10.0, "tau": 1.0, "p": 2, "mode": "eq6"}
    assert rep["counts"]["objects"] == 20 and rep["counts"]["total_pairs"] == 190


def test_loss_two_pair_fixture(tmp_path):
    out_file = tmp_path / "loss.json"
    code, _, _ = call("loss", FIXTURES / "two_pair.csv", "--tau", "1", "--out", out_file)
    assert code == 0
    rep = json.loads(out_file.read_text())
    assert rep["loss"] == pytest.approx(TWO_MARGIN_LOSS, abs=1e-8)
    assert rep["counts"] == {"objects": 4, "total_pairs": 6, "eligible_pairs": 2, "pos": 1, "neg": 1}
    assert [(w["kind"], w["margin"]) for w in rep["worst_violations"]] == [("pos", 3.0), ("neg", 1.0)]
    margins = (tmp_path / "loss_margins.csv").read_text().splitlines()
    assert margins[0] == "i,j,id_i,id_j,d1,d2,eligible,m_pos,m_neg,kind"
    assert len(margins) == 7 and margins[1].endswith(",pos") and margins[-1].endswith(",neg")


def test_invalid_parameters_exit_1():
    code, _, err = call("audit", "--k", "0.5", FIXTURES / "collinear.csv")
    assert code == 1 and "K must be ≥ 1" in err
    assert call("audit", "--b", "-1", FIXTURES / "collinear.csv")[0] == 1
    code, _, err = call("loss", "--tau", "0", FIXTURES / "two_pair.csv")
    assert code == 1 and "tau must be > 0" in err


def test_usage_and_io_errors_exit_2(tmp_path, capsys):
    assert call("audit", "--bogus", FIXTURES / "collinear.csv")[0] == 2
    assert call("frobnicate")[0] == 2
    assert call("audit", tmp_path / "missing.csv")[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("id,z,f0\na,1,2\nb,2,oops\n")
    code, _, err = call("audit", bad)
    assert code == 2 and ":3:" in err
    capsys.readouterr()


@pytest.mark.parametrize("text,fragment", [
    ("", "empty file"),
    ("id,z\n", "header"),
    ("id,depth,f0\na,1,2\n", "header"),
    ("id,z,f0\n", "no data rows"),
    ("id,z,f0\na,1,2,3\n", ":2: expected 3 columns"),
    ("id,z,f0\na,0,2\n", ":2: depth must be > 0"),
    ("id,z,f0\na,1,2\na,2,3\n", ":3: duplicate id"),
    ("id,z,f0\na,1,nan\n", "finite"),
])
def test_strict_descriptor_parsing(text, fragment):
    with pytest.raises(ValueError, match=fragment):
        parse_descriptors(text, "f.csv")


def test_descriptor_round_trip(tmp_path):
    ds = generate(SynthConfig(n=50, seed=3))
    path = tmp_path / "d.csv"
    write_descriptors(ds, path)
    back = read_descriptors(path)
    np.testing.assert_array_equal(back.depths, ds.depths)
    np.testing.assert_array_equal(back.features, ds.features)
    assert format_descriptors(back) == path.read_text()


def test_synth_file_audit_matches_in_memory(tmp_path):
    path = tmp_path / "scene.csv"
    assert call("synth", "--n", "120", "--seed", "9", "--out", path)[0] == 0
    mem = generate(SynthConfig(n=120, seed=9))
    ref = find_violating_pairs(mem, QiParams())
    assert find_violating_pairs(read_descriptors(path), QiParams()) == ref
    rep = json.loads(call("audit", path)[1])
    assert rep["counts"]["pos"] == len(ref.pos_pairs) and rep["counts"]["neg"] == len(ref.neg_pairs)


def test_arc_fixture_and_inf_epsilon():
    rep = json.loads(call("audit", FIXTURES / "arc.csv")[1])
    assert rep["counts"]["pos"] + rep["counts"]["neg"] == 0
    rep = json.loads(call("audit", FIXTURES / "arc.csv", "--epsilon", "inf")[1])
    assert rep["params"]["epsilon"] == "inf" and rep["counts"]["neg"] > 0


def test_audit_with_theorem():
    rep = json.loads(call("audit", FIXTURES / "collinear.csv", "--theorem", "--k", "1", "--b", "0")[1])
    th = rep["theorem"]
    assert th["premise_ok"] and th["global_ok"] and th["b_prime"] == 0.0 and th["status"] == "pass"
    rep = json.loads(call("audit", FIXTURES / "two_pair.csv", "--theorem")[1])
    assert rep["theorem"]["status"] == "premise unsatisfied" and rep["theorem"]["global_ok"] is None


def test_geodesic_command():
    code, out, _ = call("geodesic", FIXTURES / "collinear.csv", "--from", "0", "--to", "5")
    body = json.loads(out)
    assert code == 0 and body["total"] == 10.0 and body["partition"] == [0, 1, 2, 3, 4, 5]
    code, _, err = call("geodesic", FIXTURES / "two_pair.csv", "--from", "0", "--to", "3")
    assert code == 1 and "widest gap 18" in err
    assert call("geodesic", FIXTURES / "two_pair.csv", "--from", "0", "--to", "9")[0] == 1


def test_train_and_sweep_commands(tmp_path):
    common = ["--n", "48", "--epochs", "2"]
    code, out, _ = call("train", *common)
    assert code == 0 and out.splitlines()[0] == "epoch,baseline_loss,qi_loss,obj_loss,total,violation_ratio,e_z"
    assert len(out.splitlines()) == 3
    code, out, _ = call("sweep", *common, "--lambdas", "0,0.5")
    assert code == 0 and out.splitlines()[0] == "lambda_qi,violation_ratio,e_z" and len(out.splitlines()) == 3
    code, out, _ = call("sweep", *common, "--epsilons", "1,inf")
    assert code == 0 and out.splitlines()[2].startswith("inf,")


def test_synth_kinds():
    for kind, width in (("collinear", 8), ("arc", 2), ("noisy_scene", 8)):
        code, out, _ = call("synth", "--kind", kind, "--n", "10")
        assert code == 0
        ds = parse_descriptors(out)
        assert len(ds) == 10 and ds.dim == width


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "qiloss", "audit", str(FIXTURES / "two_pair.csv")],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and math.isclose(json.loads(res.stdout)["loss"], TWO_MARGIN_LOSS, abs_tol=1e-8)
