import json

import numpy as np
import pytest

from gtm.cli import DEFAULT_FPR_GRID, main, posterior_log_odds, tpr_at_fpr
from gtm.marginal import MarginalTransform, TransformationLayer
from gtm.model import GtmModel, load, save

from helpers import MARGINAL

FAST = ["--layers", "2", "--marginal-basis", "10", "--conditioner-basis", "10", "--max-iters", "40"]


@pytest.fixture
def toy_csv(tmp_path, rng):
    x = rng.normal(size=300)
    y = np.column_stack([x, 0.6 * x + 0.8 * rng.normal(size=300)])
    p = tmp_path / "toy.csv"
    p.write_text("a,b\n" + "\n".join(f"{float(u)!r},{float(v)!r}" for u, v in y) + "\n")
    return p


@pytest.fixture
def fitted(tmp_path, toy_csv):
    out = tmp_path / "model.json"
    assert main(["fit", str(toy_csv), "-o", str(out), *FAST, "--tau1", "0.1"]) == 0
    return out


def shifted_model(mean):
    return GtmModel(TransformationLayer([MarginalTransform.identity(MARGINAL)], [mean], [1.0]))


class TestFit:
    def test_smoke(self, fitted, tmp_path):
        m = load(fitted)
        assert m.dim == 2 and m.meta["columns"] == ["a", "b"]
        assert (tmp_path / "model.json.report.json").is_file()
        man = json.loads((tmp_path / "model.json.manifest.json").read_text())
        assert man["config"]["tau1"] == 0.1 and man["seed"] == 0 and man["version"]
        assert man["threads"] == 1

    def test_missing_input(self, tmp_path, capsys):
        code = main(["fit", str(tmp_path / "absent.csv"), "-o", str(tmp_path / "m.json")])
        assert code == 3
        assert "absent.csv" in capsys.readouterr().err
        assert not (tmp_path / "m.json").exists()

    def test_bad_cell(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n3,oops\n")
        assert main(["fit", str(p), "-o", str(tmp_path / "m.json")]) == 3
        assert "row 3, column 2" in capsys.readouterr().err

    def test_usage_error(self):
        assert main(["fit"]) == 2
        assert main(["nonsense"]) == 2

    def test_config_error(self, toy_csv, tmp_path):
        assert main(["fit", str(toy_csv), "-o", str(tmp_path / "m.json"), "--tau1", "-1"]) == 2

    def test_adaptive_manifest(self, toy_csv, tmp_path):
        out = tmp_path / "ad.json"
        assert main(["fit", str(toy_csv), "-o", str(out), *FAST, "--mode", "adaptive", "--tau3", "0.5"]) == 0
        man = json.loads((tmp_path / "ad.json.manifest.json").read_text())
        assert man["stage1_penalties"]["tau3"] == 0.0 and man["stage1_penalties"]["mode"] == "none"
        assert man["stage2_penalties"]["mode"] == "adaptive" and man["stage2_penalties"]["tau3"] == 0.5

    def test_search(self, toy_csv, tmp_path):
        out = tmp_path / "s.json"
        assert main(["fit", str(toy_csv), "-o", str(out), *FAST, "--search", "2", "--mode", "lasso"]) == 0
        man = json.loads((tmp_path / "s.json.manifest.json").read_text())
        assert len(man["search_trials"]) == 2

    def test_reproducible_from_manifest(self, toy_csv, tmp_path):
        out = tmp_path / "r.json"
        assert main(["fit", str(toy_csv), "-o", str(out), *FAST]) == 0
        first = out.read_bytes()
        man = json.loads((tmp_path / "r.json.manifest.json").read_text())
        assert main(man["argv"]) == 0
        assert out.read_bytes() == first


class TestSampleDensity:
    def test_sample_zero(self, fitted, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["sample", str(fitted), "-n", "0", "-o", str(out)]) == 0
        assert out.read_text() == "a,b\n"

    def test_sample_deterministic(self, fitted, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["sample", str(fitted), "-n", "50", "-o", str(a), "--seed", "3"])
        main(["sample", str(fitted), "-n", "50", "-o", str(b), "--seed", "3"])
        assert a.read_bytes() == b.read_bytes() and len(a.read_text().splitlines()) == 51

    def test_density_finite(self, fitted, toy_csv, tmp_path):
        out = tmp_path / "d.csv"
        assert main(["density", str(fitted), str(toy_csv), "-o", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "a,b,log_density" and len(lines) == 301
        assert all(np.isfinite(float(l.split(",")[-1])) for l in lines[1:])

    def test_density_dimension_mismatch(self, fitted, tmp_path):
        p = tmp_path / "three.csv"
        p.write_text("1,2,3\n4,5,6\n")
        assert main(["density", str(fitted), str(p), "-o", str(tmp_path / "o.csv")]) == 3

    def test_corrupt_model(self, tmp_path, toy_csv):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format_version": 1, "J": ')
        assert main(["density", str(bad), str(toy_csv), "-o", str(tmp_path / "o.csv")]) == 3


class TestMetricsGraph:
    def test_rows_and_dot(self, fitted, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["metrics", str(fitted), "-o", str(out), "--samples", "200", "--quad-n", "12"]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "u,v,kld,iae,mean_abs_p,mean_abs_rho" and len(lines) == 2
        assert (tmp_path / "m.csv.dot").read_text().startswith("graph")

    def test_zero_layer_model_no_edges(self, tmp_path):
        mp = tmp_path / "ind.json"
        save(GtmModel.identity(3), mp)
        out = tmp_path / "m.csv"
        assert main(["metrics", str(mp), "-o", str(out), "--samples", "200", "--quad-n", "12"]) == 0
        assert len(out.read_text().splitlines()) == 4
        assert "--" not in (tmp_path / "m.csv.dot").read_text()
        assert main(["metrics", str(mp), "-o", str(out), "--samples", "200", "--quad-n", "12", "--threshold", "0"]) == 0
        assert (tmp_path / "m.csv.dot").read_text().count("--") == 3

    def test_graph_from_csv(self, tmp_path):
        csv = tmp_path / "m.csv"
        csv.write_text("u,v,kld,iae,mean_abs_p,mean_abs_rho\n0,1,0.2,0.25,0.1,0.1\n0,2,0.0,0.05,0,0\n1,2,0.1,0.12,0,0\n")
        dot, edges = tmp_path / "g.dot", tmp_path / "e.csv"
        assert main(["graph", str(csv), "-o", str(dot), "--edges", str(edges)]) == 0
        assert edges.read_text() == "u,v,weight\n0,1,0.25\n1,2,0.12\n"
        assert main(["graph", str(csv), "-o", str(dot), "--threshold", "2"]) == 2


class TestClassify:
    def test_identical_models_posterior_is_prior(self, tmp_path, rng):
        mp = tmp_path / "m.json"
        save(shifted_model(0.0), mp)
        data = tmp_path / "x.csv"
        data.write_text("\n".join(repr(float(v)) for v in rng.normal(size=20)) + "\n")
        post = tmp_path / "post.csv"
        assert main(["classify", str(mp), str(mp), str(data), "--prior", "0.3", "--posterior", str(post)]) == 0
        vals = np.array([float(l) for l in post.read_text().splitlines()[1:]])
        np.testing.assert_allclose(vals, 0.3, atol=1e-15)

    def test_separated_gaussians(self, tmp_path, rng):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save(shifted_model(3.0), a)
        save(shifted_model(-3.0), b)
        x = np.concatenate([rng.normal(3, 1, 1000), rng.normal(-3, 1, 1000)])
        lab = np.r_[np.ones(1000), np.zeros(1000)]
        data = tmp_path / "x.csv"
        data.write_text("x,cls\n" + "\n".join(f"{float(v)!r},{int(c)}" for v, c in zip(x, lab)) + "\n")
        roc = tmp_path / "roc.csv"
        assert main(["classify", str(a), str(b), str(data), "--label-col", "cls", "-o", str(roc)]) == 0
        head, vals = roc.read_text().splitlines()
        assert head == ",".join(f"tpr@fpr={f:g}" for f in DEFAULT_FPR_GRID)
        assert float(vals.split(",")[2]) >= 0.99

    def test_custom_fpr_header(self, tmp_path, rng):
        mp = tmp_path / "m.json"
        save(shifted_model(0.0), mp)
        data = tmp_path / "x.csv"
        data.write_text("x,cls\n0.1,1\n0.3,0\n-1,1\n2,0\n")
        roc = tmp_path / "roc.csv"
        assert main(["classify", str(mp), str(mp), str(data), "--label-col", "cls", "-o", str(roc),
                     "--fpr", "0.1", "0.3"]) == 0
        assert roc.read_text().splitlines()[0] == "tpr@fpr=0.1,tpr@fpr=0.3"

    def test_dimension_mismatch(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save(shifted_model(0.0), a)
        save(GtmModel.identity(2), b)
        data = tmp_path / "x.csv"
        data.write_text("1\n2\n")
        assert main(["classify", str(a), str(b), str(data), "--posterior", str(tmp_path / "p.csv")]) == 3

    def test_tpr_oracle(self):
        scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
        labels = np.array([True, False, True, True, False, False])
        # thresholds admit fp counts 0, 1, 1, 1, 2, 3 out of 3 negatives
        assert tpr_at_fpr(scores, labels, (0.0, 0.34, 0.67, 1.0)) == [1 / 3, 1.0, 1.0, 1.0]

    def test_log_odds(self):
        assert posterior_log_odds(-1.0, -1.0, 0.5) == 0.0


@pytest.mark.slow
def test_benchmark_bundled_spec(tmp_path):
    out = tmp_path / "bench.csv"
    code = main(["benchmark", "-o", str(out), "--n-train", "300", "--n-test", "1000", "--samples", "200",
                 "--quad-n", "12", "--max-iters", "30", "--layers", "2", "--conditioner-basis", "10"])
    assert code == 0
    rows = [l.split(",") for l in out.read_text().splitlines()[1:]]
    methods = {r[0] for r in rows}
    assert methods == {"gaussian", "gtm_none", "gtm_lasso", "gtm_adaptive"}
    for m in ("gtm_none", "gtm_lasso", "gtm_adaptive"):
        metrics = {r[1] for r in rows if r[0] == m}
        assert {"auc_iae", "auc_kld", "auc_mean_abs_p", "auc_mean_abs_rho", "mc_kld", "rkld"} <= metrics
    # the tiny configuration may leave undefined cells; they must be recorded, not fatal
    man = json.loads((tmp_path / "bench.csv.manifest.json").read_text())
    nan_cells = {(r[0], r[1]) for r in rows if r[2] == "nan"}
    assert nan_cells == {(e["method"], e["metric"]) for e in man["errors"]}
    assert all(e["error"].startswith("MetricError") for e in man["errors"])
