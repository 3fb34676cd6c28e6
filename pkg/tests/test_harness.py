import json
import os

import numpy as np
import pytest

from fedco.cli import main
from fedco.datagen import make_classification_store, save_idx
from fedco.harness import ConfigError, build_dataset, parse_config, run_experiment
from fedco.reporting import CSV_HEADER, RoundReport, emit_reports, render_csv


def _config(**overrides):
    raw = {
        "seed": 5,
        "dataset": {"kind": "synthetic", "n_samples": 400, "input_dim": 6,
                    "num_classes": 3},
        "partition": {"kind": "dirichlet", "n_clients": 4, "alpha": 0.5,
                      "test_fraction": 0.25},
        "model": {"input_dim": 6, "hidden_widths": [8], "num_classes": 3},
        "rounds": {"algorithm": "fedco2-plain", "rounds": 2, "lr": 0.05,
                   "batch_size": 16},
    }
    raw.update(overrides)
    return raw


# ---------------------------------------------------------------------------
# config parsing


def test_parse_config_roundtrip():
    cfg = parse_config(_config())
    assert cfg.seed == 5
    assert cfg.rounds.algorithm == "fedco2-plain"
    assert cfg.rounds.seed == 5
    assert cfg.model.hidden_widths == [8]


def test_parse_config_requires_seed():
    raw = _config()
    del raw["seed"]
    with pytest.raises(ConfigError, match="seed"):
        parse_config(raw)


def test_parse_config_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(_config(bogus={}))


def test_parse_config_unknown_algorithm():
    raw = _config()
    raw["rounds"]["algorithm"] = "fancynet"
    with pytest.raises(ConfigError, match="algorithm"):
        parse_config(raw)


def test_parse_config_ablation_scope():
    raw = _config(ablation={"intra_transfer": False})
    with pytest.raises(ConfigError, match="ablation"):
        parse_config(raw)
    raw["rounds"]["algorithm"] = "fedco2-feature"
    cfg = parse_config(raw)
    assert cfg.rounds.intra_transfer is False
    assert cfg.rounds.inter_transfer is True


def test_build_dataset_kinds():
    for kind, extra in (("dirichlet", {"alpha": 0.4}),
                        ("pathological", {"classes_per_client": 2}),
                        ("iid", {})):
        raw = _config()
        raw["partition"] = {"kind": kind, "n_clients": 4,
                            "test_fraction": 0.25, **extra}
        ds = build_dataset(parse_config(raw))
        ds.validate()
        assert ds.n_clients == 4


def test_build_dataset_noise_overlay():
    raw = _config()
    raw["partition"]["noise_sigma_max"] = 1.0
    ds = build_dataset(parse_config(raw))
    assert ds.heterogeneity.kind == "noise_skew"


def test_build_dataset_idx_source(tmp_path):
    store = make_classification_store(200, 6, 3, seed=0)
    store.features.data[...] = np.clip(np.abs(store.features.data) / 6.0, 0, 1)
    feats, labs = str(tmp_path / "f.idx"), str(tmp_path / "l.idx")
    save_idx(store, feats, labs)
    raw = _config(dataset={"kind": "idx", "features": feats, "labels": labs})
    ds = build_dataset(parse_config(raw))
    ds.validate()
    assert ds.store.dim == 6


# ---------------------------------------------------------------------------
# report emission


def _report(**kw):
    base = dict(round=1, algorithm="fedavg", client_id=0, split="test",
                mode="online", accuracy=0.5, loss=1.25, wall_ms=0.0)
    base.update(kw)
    return RoundReport(**base)


def test_single_report_two_line_csv():
    text = render_csv([_report()])
    lines = text.strip().split("\n")
    assert len(lines) == 2
    assert lines[0] == CSV_HEADER


def test_csv_field_count_constant():
    reports = [_report(round=r, client_id=c, accuracy=0.1 * c)
               for r in (1, 2) for c in range(3)]
    lines = render_csv(reports).strip().split("\n")
    assert {len(line.split(",")) for line in lines} == {8}


def test_summary_matches_csv_recomputation(tmp_path):
    reports = [_report(round=r, client_id=c, mode=m, accuracy=0.1 * c + 0.01 * r)
               for r in (1, 2) for c in range(3) for m in ("fused", "online")]
    csv_path, summary_path = emit_reports(reports, str(tmp_path), config={"seed": 1})
    with open(summary_path) as fh:
        summary = json.load(fh)
    rows = [line.split(",") for line in
            open(csv_path).read().strip().split("\n")[1:]]
    last = max(int(r[0]) for r in rows)
    for mode, stated in summary["final_average_accuracy"].items():
        accs = [float(r[5]) for r in rows
                if int(r[0]) == last and r[4] == mode and r[3] == "test"]
        assert abs(stated - sum(accs) / len(accs)) < 1e-9


def test_report_validation():
    with pytest.raises(ValueError):
        _report(accuracy=1.5)
    with pytest.raises(ValueError):
        _report(split="validation")


def test_emit_requires_reports(tmp_path):
    with pytest.raises(ValueError):
        emit_reports([], str(tmp_path))


# ---------------------------------------------------------------------------
# experiment runner


def test_run_experiment_deterministic_across_workers():
    cfg = parse_config(_config())
    rep1, _ = run_experiment(cfg, workers=1)
    rep4, _ = run_experiment(cfg, workers=4)
    assert render_csv(rep1) == render_csv(rep4)


# ---------------------------------------------------------------------------
# CLI


def _write_config(tmp_path, raw):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return str(path)


def test_cli_run_success(tmp_path, capsys):
    cfg_path = _write_config(tmp_path, _config())
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg_path, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert os.path.exists(os.path.join(out, "summary.json"))


def test_cli_run_rerun_is_bitwise_identical(tmp_path):
    cfg_path = _write_config(tmp_path, _config())
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run", "--config", cfg_path, "--out", out_a]) == 0
    assert main(["run", "--config", cfg_path, "--out", out_b]) == 0
    with open(os.path.join(out_a, "metrics.csv"), "rb") as fh:
        bytes_a = fh.read()
    with open(os.path.join(out_b, "metrics.csv"), "rb") as fh:
        bytes_b = fh.read()
    assert bytes_a == bytes_b


def test_cli_run_set_override(tmp_path):
    cfg_path = _write_config(tmp_path, _config())
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg_path, "--out", out,
                 "--set", "rounds.rounds=1", "--set", "seed=9"]) == 0
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["config"]["seed"] == 9
    assert summary["rounds"] == 1


def test_cli_run_unknown_algorithm_exits_2(tmp_path, capsys):
    cfg_path = _write_config(tmp_path, _config())
    code = main(["run", "--config", cfg_path, "--out", str(tmp_path / "o"),
                 "--set", "rounds.algorithm=wat"])
    assert code == 2


def test_cli_run_missing_config_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_cli_theory_writes_outputs(tmp_path, capsys):
    out = str(tmp_path / "theory")
    code = main(["theory", "--n", "2", "--m", "3", "--d", "4", "--alpha", "0.5",
                 "--mc", "2000", "--trials", "2", "--steps", "5",
                 "--seed", "1", "--out", out])
    assert code == 0
    assert os.path.exists(os.path.join(out, "theorem1.json"))
    with open(os.path.join(out, "trajectories.csv")) as fh:
        lines = fh.read().strip().split("\n")
    assert lines[0] == "step,online_loss,offline_loss,ensemble_loss"
    assert len(lines) == 7  # header + steps 0..5


def test_cli_theory_alpha_validation(capsys):
    assert main(["theory", "--alpha", "1.5"]) == 2


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
