import io
import json

import pytest

from countstat.cli import COMMANDS, run


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def rows(text):
    lines = text.strip().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]


@pytest.fixture
def eff10_model(tmp_path):
    p = tmp_path / "eff10.model"
    p.write_text("# 10% efficiency uncertainty\nb_mean = 3.0\neff_rel_sigma = 0.1\n")
    return str(p)


def test_fc_limit():
    code, out, _ = call("limit", "--method", "fc", "--n", "0", "--b", "3.0", "--cl", "0.90")
    assert code == 0
    assert float(rows(out)[0]["upper"]) == pytest.approx(1.08, abs=0.01)


def test_bayes_limit_from_model_file(eff10_model):
    code, out, _ = call("limit", "--method", "bayes", "--model", eff10_model, "--n", "3", "--cl", "0.90")
    assert code == 0
    assert float(rows(out)[0]["upper"]) == pytest.approx(4.46, abs=0.02)


def test_global_flags_before_subcommand(eff10_model):
    code, out, _ = call("--model", eff10_model, "limit", "--method", "bayes", "--n", "3")
    assert code == 0
    assert float(rows(out)[0]["upper"]) == pytest.approx(4.46, abs=0.02)


def test_pvalue_zero_count():
    code, out, _ = call("pvalue", "--n", "0", "--b", "3.0")
    assert code == 0
    assert float(rows(out)[0]["p"]) == 1.0


def test_small_probabilities_are_scientific():
    _, out, _ = call("pvalue", "--n", "16", "--b", "3.0")
    assert "e-07" in rows(out)[0]["p"]


def test_coverage_csv_shape_and_determinism(tmp_path):
    argv = ["coverage", "--method", "classical", "--b", "3.0", "--s-min", "0", "--s-max", "0.1",
            "--s-step", "0.1", "--n-toys", "10000", "--seed", "7"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert call(*argv, "--out", str(a))[0] == 0
    assert call(*argv, "--out", str(b))[0] == 0
    text = a.read_text()
    assert text.splitlines()[0] == "s_true,coverage,stderr,n_toys"
    assert len(text.splitlines()) == 3
    assert a.read_bytes() == b.read_bytes()
    side = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert side["seed"] == 7 and side["command"] == "coverage"


def test_json_round_trip():
    code, out, _ = call("--format", "json", "cls", "--n", "0", "--b", "3.0", "--s", "3.0")
    assert code == 0
    doc = json.loads(out)
    assert doc["manifest"]["command"] == "cls"
    from countstat.significance import cls_counting

    r = cls_counting(0, 3.0, 3.0)
    assert doc["results"][0]["cls"] == r.value
    assert doc["results"][0]["clsb"] == r.clsb


def test_json_writes_infinities_as_strings():
    from countstat.io import RunManifest, to_json

    doc = json.loads(to_json([{"upper": float("inf"), "lower": 0.0}], RunManifest("limit", {}, None)))
    assert doc["results"][0]["upper"] == "inf"


def test_divergent_posterior_exit_code(tmp_path):
    model = tmp_path / "m.model"
    model.write_text("b_mean = 0\neff_rel_sigma = 0.1\neff_subsidiary_form = truncated-gaussian\n")
    code, _, err = call("limit", "--method", "bayes", "--model", str(model), "--n", "2")
    assert code == 1
    assert "diverges" in err


def test_stochastic_commands_need_seed():
    code, _, err = call("coverage", "--method", "fc", "--b", "3.0", "--s-max", "1")
    assert code == 2
    assert "--seed" in err
    code, _, _ = call("systematics", "--sigma", "1", "1")
    assert code == 2


def test_bad_model_key_is_usage_error(tmp_path):
    p = tmp_path / "bad.model"
    p.write_text("b_mean = 3\nb_sigma = 0.1\n")
    code, _, err = call("limit", "--method", "bayes", "--model", str(p), "--n", "3")
    assert code == 2
    assert "bad.model:2" in err and "b_sigma" in err


def test_singular_covariance_exit_code(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("value,sigma\n0,1\n2,2\n")
    code, _, err = call("combine", "--input", str(p), "--rho", "1.0")
    assert code == 1
    assert "select one of the two analyses" in err


def test_correlated_combination(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("value,sigma\n0,1\n2,2\n")
    code, out, _ = call("combine", "--input", str(p), "--rho", "0.8")
    r = rows(out)[0]
    assert float(r["a_best"]) == pytest.approx(-0.666667, abs=1e-6)
    assert r["outside_range"] == "true"


def test_unwritable_destination(tmp_path):
    code, _, _ = call("pvalue", "--n", "1", "--b", "1", "--out", str(tmp_path / "no" / "x.csv"))
    assert code == 1


def test_blind_round_trip():
    _, out, _ = call("blind", "--value", "1.25", "--key", "k")
    blinded = rows(out)[0]["blinded"]
    _, out, _ = call("unblind", "--value", blinded, "--key", "k")
    assert float(rows(out)[0]["value"]) == 1.25


def test_gof_delta_chi2():
    _, out, _ = call("gof", "delta-chi2", "--chi2-0", "110", "--chi2-1", "85")
    assert float(rows(out)[0]["sigma"]) == pytest.approx(5.0)


def test_sensitivity_punzi():
    _, out, _ = call("sensitivity", "--b", "3.0")
    r = rows(out)[0]
    assert r["t_crit"] == "16"
    assert float(r["s_min"]) == pytest.approx(20.0971, abs=1e-3)


def test_missing_subcommand_is_usage_error(capsys):
    assert run([]) == 2


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_lists_provenance(command, capsys):
    assert run([command, "--help"]) == 0
    assert "provenance:" in capsys.readouterr().out


@pytest.mark.parametrize("sub", ["chi2", "delta-chi2", "energy"])
def test_gof_help(sub, capsys):
    assert run(["gof", sub, "--help"]) == 0
    assert capsys.readouterr().out.startswith("usage:")
