import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dcwb.cli import main
from dcwb.dataio import Dataset, heart_schema, write_csv
from dcwb.model import AdditiveModel

from fixtures import make_sites


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def csv_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = make_sites("binomial", 3, n=240, p=2, seed=4)
    write_csv(data, d / "data.csv")
    cfg = {
        "schema": dict(data.schema),
        "response": "y",
        "site_column": "site",
        "max_iters": 150,
        "learning_rate": 0.3,
        "patience": None,
        "defaults": {"n_basis": 7},
    }
    (d / "cfg.json").write_text(json.dumps(cfg))
    common = ["--config", str(d / "cfg.json"), "--data", str(d / "data.csv")]
    assert main(["fit-distributed", *common, "--out", str(d / "dist"), "--transcript", str(d / "t.jsonl")]) == 0
    assert main(["fit-pooled", *common, "--out", str(d / "pool")]) == 0
    return d, common


def test_fit_outputs_and_compare(csv_run, capsys):
    d, _ = csv_run
    for sub in ("dist", "pool"):
        assert {p.name for p in (d / sub).iterdir()} >= {"model.json", "risk_trace.csv", "selection_log.csv", "config.json"}
    assert (d / "dist" / "ledger.json").exists()
    assert main(["compare", str(d / "dist" / "model.json"), str(d / "pool" / "model.json")]) == 0
    assert json.loads(capsys.readouterr().out)["pass"] is True
    lines = (d / "t.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["tag"] == "Hello"


def test_compare_reports_a_mismatch(csv_run, tmp_path):
    d, common = csv_run
    assert main(["fit-pooled", *common, "--learning-rate", "0.2", "--out", str(tmp_path / "other")]) == 0
    assert main(["compare", str(d / "pool" / "model.json"), str(tmp_path / "other" / "model.json")]) == 1


def test_predict_needs_a_site_for_site_terms(csv_run, tmp_path):
    d, _ = csv_run
    model = AdditiveModel.from_json((d / "dist" / "model.json").read_text())
    assert model.has_site_terms()
    data = make_sites("binomial", 3, n=20, p=2, seed=9)
    with_site = tmp_path / "with_site.csv"
    write_csv(data, with_site)
    no_site = tmp_path / "no_site.csv"
    write_csv(Dataset({c: v for c, v in data.columns.items() if c != "site"},
                      {c: k for c, k in data.schema.items() if c != "site"}, "y"), no_site)
    m = str(d / "dist" / "model.json")
    assert main(["predict", "--model", m, "--data", str(no_site), "--out", str(tmp_path / "p.csv")]) == 2
    assert main(["predict", "--model", m, "--data", str(no_site), "--site", "2", "--out", str(tmp_path / "p2.csv")]) == 0
    assert main(["predict", "--model", m, "--data", str(with_site), "--out", str(tmp_path / "p3.csv")]) == 0
    assert main(["predict", "--model", m, "--data", str(no_site), "--shared-only", "--out", str(tmp_path / "p4.csv")]) == 0
    by_col = _rows(tmp_path / "p3.csv")
    fixed = _rows(tmp_path / "p2.csv")
    link = model.predict(data)
    np.testing.assert_allclose([float(r["link"]) for r in by_col], link, rtol=1e-12)
    rows2 = np.flatnonzero(data.columns["site"] == "2")
    np.testing.assert_allclose([float(fixed[i]["link"]) for i in rows2], link[rows2], rtol=1e-12)
    p = np.array([float(r["response"]) for r in _rows(tmp_path / "p4.csv")])
    assert np.all((p > 0) & (p < 1))


def test_effects_and_importance_tables(csv_run, tmp_path):
    d, _ = csv_run
    m = str(d / "dist" / "model.json")
    assert main(["effects", "--model", m, "--resolution", "11", "--out", str(tmp_path / "e.csv")]) == 0
    eff = _rows(tmp_path / "e.csv")
    assert eff and set(eff[0]) == {"feature", "x", "site", "shared", "site_effect", "total"}
    assert main(["importance", "--model", m, "--out", str(tmp_path / "i.csv")]) == 0
    imp = _rows(tmp_path / "i.csv")
    shares = [float(r["importance"]) for r in imp]
    assert shares == sorted(shares, reverse=True)
    assert sum(shares) == pytest.approx(1.0)
    assert sum(int(r["selections"]) for r in imp) >= 1


def test_audit_mode_checks_the_cost_formulas(csv_run, tmp_path):
    _, common = csv_run
    assert main(["fit-distributed", *common, "--max-iters", "6", "--audit", "--out", str(tmp_path / "a")]) == 0
    ledger = json.loads((tmp_path / "a" / "ledger.json").read_text())
    checks = ledger["audit"]["checks"]
    assert len(checks) == 3 * 3 and all(c["ledger"] == c["closed_form"] for c in checks)


@pytest.mark.parametrize(
    "argv",
    [
        ["fit-pooled", "--heart-dir", ".", "--out", "x", "--max-iters", "0"],
        ["compare", "a.json"],
    ],
)
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2


def test_config_errors_exit_2(tmp_path):
    assert main(["fit-pooled", "--out", str(tmp_path / "x")]) == 2
    (tmp_path / "c.json").write_text(json.dumps({"learning_rat": 0.1}))
    assert main(["fit-pooled", "--config", str(tmp_path / "c.json"), "--heart-dir", ".", "--out", "x"]) == 2
    assert main(["fit-pooled", "--config", str(tmp_path / "missing.json"), "--heart-dir", ".", "--out", "x"]) == 2
    assert main(["predict", "--model", str(tmp_path / "none.json"), "--data", "x", "--out", "y"]) == 2


def test_random_partition_needs_a_site_count(csv_run, tmp_path):
    d, common = csv_run
    assert main(["fit-pooled", *common, "--partition", "random", "--out", str(tmp_path / "r")]) == 2
    assert main(["fit-pooled", *common, "--partition", "random", "--simulate", "2", "--out", str(tmp_path / "r")]) == 0


def _serve(heart_dir, fname, site_id):
    proc = subprocess.Popen(
        [sys.executable, "-c", "import sys; from dcwb.cli import sitectl_main; sys.exit(sitectl_main())",
         "serve", "--heart-file", str(heart_dir / fname), "--site-id", str(site_id), "--listen", "127.0.0.1:0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    line = proc.stdout.readline()
    assert line.startswith(f"site {site_id} listening on "), line + proc.stderr.read()
    return proc, line.split()[-1]


def test_remote_sites_over_tcp_match_the_simulated_fit(heart_dir, tmp_path):
    hs = heart_schema()
    procs, addrs = [], []
    try:
        for k, fname in enumerate(hs["site_files"].values(), start=1):
            proc, addr = _serve(heart_dir, fname, k)
            procs.append(proc)
            addrs.append(addr)
        schema = {c: hs["types"][c] for c in hs["retained"]}
        schema[hs["response"]] = "numeric"
        cfg = {"schema": schema, "response": hs["response"], "site_column": None, "max_iters": 25}
        (tmp_path / "host.json").write_text(json.dumps(cfg))
        code = subprocess.run(
            [sys.executable, "-c", "import sys; from dcwb.cli import hostctl_main; sys.exit(hostctl_main())",
             "fit", "--config", str(tmp_path / "host.json"), "--sites", ",".join(addrs), "--out", str(tmp_path / "remote")],
            capture_output=True, text=True, timeout=300,
        )
        assert code.returncode == 0, code.stderr
        for p in procs:
            assert p.wait(timeout=30) == 0
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
            p.stdout.close()
            p.stderr.close()
    assert main(["fit-distributed", "--heart-dir", str(heart_dir), "--max-iters", "25", "--out", str(tmp_path / "sim")]) == 0
    remote = AdditiveModel.from_json((tmp_path / "remote" / "model.json").read_text())
    sim = AdditiveModel.from_json((tmp_path / "sim" / "model.json").read_text())
    assert [r.spec_id for r in remote.selection_log] == [r.spec_id for r in sim.selection_log]
    for k in sim.contributions:
        np.testing.assert_allclose(remote.contributions[k], sim.contributions[k], rtol=1e-12, atol=1e-15)


def test_tiny_site_exits_with_privacy_code(tmp_path):
    data = make_sites("gaussian", 1, n=4, seed=1)
    write_csv(data, tmp_path / "tiny.csv")
    (tmp_path / "c.json").write_text(json.dumps({"schema": dict(data.schema), "loss": "gaussian"}))
    assert main(["fit-distributed", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path / "tiny.csv"),
                 "--out", str(tmp_path / "o")]) == 3
