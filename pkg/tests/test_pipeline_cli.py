import csv
import json

import numpy as np
import pytest

from fedgc import cli, graphstore
from fedgc import pipeline as P

TINY = {
    "sbm": {"blocks": 3, "per_block": 30, "p_in": 0.2, "p_out": 0.02, "feat_dim": 8},
    "clients": 2,
    "hidden": 16,
    "phi_hidden": 8,
    "architectures": ["gcn", "mlp"],
    "seeds": [0],
    "self_train_epochs": 10,
    "ib_epochs": 10,
    "condense_epochs": 12,
    "select_every": 5,
    "train_epochs": 30,
    "finetune_epochs": 5,
    "target_epochs": 30,
    "shadow_epochs": 30,
    "attack_epochs": 30,
}


def _write_cfg(tmp_path, **over):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, **over}))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- config ------------------------------------------------------------------


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(P.ConfigError):
        P.RunConfig.from_dict({"bogus": 1})
    with pytest.raises(P.ConfigError):
        P.RunConfig(defense="dp")
    with pytest.raises(P.ConfigError):
        P.RunConfig(ablate=["xx"])
    with pytest.raises(P.ConfigError):
        P.RunConfig(ib_epochs=0)
    # a disabled stage may have zero epochs
    assert P.RunConfig(ib_epochs=0, ablate=["ib"]).uses_ib is False
    with pytest.raises(P.ConfigError):
        P.RunConfig.from_dict({"sbm": {"blocks": 2, "colour": 1}})


def test_defense_semantics():
    assert (P.RunConfig(defense="ib").uses_ib, P.RunConfig(defense="ib").uses_self_train) == (True, True)
    assert (P.RunConfig(defense="pl").uses_ib, P.RunConfig(defense="pl").uses_self_train) == (False, True)
    assert (P.RunConfig(defense="none").uses_ib, P.RunConfig(defense="none").uses_self_train) == (False, False)
    assert P.RunConfig(ablate=["st", "ib"]).ablation_tag == "-ib,-st"


def test_cli_config_errors_exit_one(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert cli.main(["run", "--config", str(_write_cfg(tmp_path, defense="xx"))]) == 1
    assert "config error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow")
def test_cli_runtime_abort_exit_two_and_partial_report(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _write_cfg(tmp_path, defense="none", lr_x=1e200, select_every=0)
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    assert "stage condense" in capsys.readouterr().err
    report = json.loads((out / "report.json").read_text())
    assert report["error"].startswith("stage condense")


# --- full runs -------------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg = base / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "seeds": [0, 1]}))
    outs = []
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(base / name)]) == 0
        outs.append(base / name)
    return outs


def test_report_sections_present(run_dirs):
    out = run_dirs[0]
    for name in ("metrics.csv", "curves.csv", "losses.csv", "config.echo", "report.json"):
        assert (out / name).exists()
    for s in (0, 1):
        assert (out / f"condensed_seed{s}" / "features.tsv").exists()
        assert (out / f"transcript_seed{s}.ndjson").exists()
    assert json.loads((out / "config.echo").read_text())["condense_epochs"] == 12


def test_metrics_rows_and_header(run_dirs):
    rows = _rows(run_dirs[0] / "metrics.csv")
    assert len(rows) == 2 * 2
    assert tuple(rows[0]) == P.METRIC_FIELDS
    assert {r["arch"] for r in rows} == {"gcn", "mlp"}
    assert all(r["ablation"] == "full" for r in rows)
    assert (run_dirs[0] / "metrics.csv").read_bytes().startswith(b"seed,arch,ablation,")
    assert b"\r\n" in (run_dirs[0] / "metrics.csv").read_bytes()


def test_curves_header_only_without_periodic_attack(run_dirs):
    assert (run_dirs[0] / "curves.csv").read_text() == ",".join(P.CURVE_FIELDS) + "\n"


def test_rerun_is_byte_identical(run_dirs):
    a, b = run_dirs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    ra, rb = (json.loads((d / "report.json").read_text()) for d in run_dirs)
    for s in ("0", "1"):
        assert ra["seeds"][s]["transcript_digest"] == rb["seeds"][s]["transcript_digest"]
        assert (a / f"transcript_seed{s}.ndjson").read_bytes() == (b / f"transcript_seed{s}.ndjson").read_bytes()


def test_loss_rows_per_round(run_dirs):
    rows = _rows(run_dirs[0] / "losses.csv")
    assert len(rows) == 2 * 12
    assert [int(r["round"]) for r in rows[:12]] == list(range(1, 13))


def test_periodic_attack_curve():
    cfg = P.RunConfig.from_dict({**TINY, "defense": "none", "mia_every": 4})
    res = P.run_seed(cfg, 0)
    assert [r for r, _, _ in res.curve] == [1, 4, 8, 12]
    assert all(0 <= a <= 1 for *_, a in res.curve)


def test_skipping_transform_keeps_raw_features():
    cfg = P.RunConfig.from_dict({**TINY, "ablate": ["ib"], "architectures": ["gcn"]})
    res = P.run_seed(cfg, 0)
    g = P.load_graph(cfg, 0)
    subs = graphstore.dirichlet_partition(g, cfg.clients, cfg.beta, P._int_seed(0, 0xD1))
    assert res.feature_checksums == {s.client_id: P._checksum(s.features) for s in subs}
    assert res.ib_losses == {}
    assert res.rows[0]["ablation"] == "-ib"


def test_transform_changes_features():
    cfg = P.RunConfig.from_dict({**TINY, "architectures": ["gcn"]})
    res = P.run_seed(cfg, 0)
    g = P.load_graph(cfg, 0)
    subs = graphstore.dirichlet_partition(g, cfg.clients, cfg.beta, P._int_seed(0, 0xD1))
    assert all(res.feature_checksums[s.client_id] != P._checksum(s.features) for s in subs)
    assert set(res.ib_losses) == {s.client_id for s in subs}


def test_single_client_matches_centralized_reference():
    base = {**TINY, "clients": 1, "defense": "none", "architectures": ["gcn"], "ablate": ["ft"]}
    fed = P.run_seed(P.RunConfig.from_dict(base), 0)
    cen = P.run_seed(P.RunConfig.from_dict({**base, "centralized": True}), 0)
    np.testing.assert_allclose(fed.losses, cen.losses, rtol=0, atol=1e-9)
    assert abs(float(fed.rows[0]["acc"]) - float(cen.rows[0]["acc"])) <= 1e-6


def test_ldp_defense_runs():
    res = P.run_seed(P.RunConfig.from_dict({**TINY, "defense": "ldp", "architectures": ["gcn"]}), 0)
    assert res.rows[0]["defense"] == "ldp"
    assert np.all(np.isfinite(res.losses))


# --- other commands -----------------------------------------------------------------


def test_gen_sbm_and_attack(tmp_path, capsys):
    bundle = tmp_path / "sbm"
    assert cli.main(["gen-sbm", "--out", str(bundle), "--blocks", "3", "--per-block", "40", "--feat-dim", "8", "--seed", "2"]) == 0
    g = graphstore.load_bundle(bundle)
    assert g.n == 120 and g.d == 8
    ref = graphstore.sbm_generate(3, 40, 0.1, 0.01, 8, 1.0, 2)
    np.testing.assert_array_equal(g.edges, ref.edges)

    cfg = _write_cfg(tmp_path, bundle=str(bundle), defense="none", architectures=["gcn"])
    run = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--out", str(run)]) == 0
    capsys.readouterr()
    report = tmp_path / "attack.csv"
    argv = ["attack", "--bundle", str(bundle), "--target", str(run / "condensed_seed0"), "--epochs", "20", "--hidden", "8", "--out", str(report)]
    assert cli.main(argv) == 0
    (row,) = _rows(report)
    assert 0 <= float(row["auc"]) <= 1 and row["run_id"] == "condensed_seed0"
    assert cli.main(["attack", "--bundle", str(bundle), "--target", str(tmp_path / "nope")]) == 1


def test_ablate_flag_parsing(tmp_path):
    parse = cli.build_parser().parse_args
    assert parse(["run", "--config", "c.json", "--ablate=-ib,-st"]).ablate == ["ib", "st"]
    assert parse(["run", "--config", "c.json", "--ablate", "com,ft"]).ablate == ["com", "ft"]
