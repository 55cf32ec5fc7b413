import json

import numpy as np
import pytest

from ctharmonize import cli
from ctharmonize import pipeline as P
from ctharmonize.metrics import CCCReport

SMALL = {"depth": 3, "base_channels": 4, "latent_dim": 8, "epochs1": 1, "epochs2": 2,
         "batch": 4, "hidden": 16, "temb_dim": 8, "T": 20}


def run(argv, capsys):
    try:
        code = cli.main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["phantom", "gen", "--n", "6", "--n-train", "3", "--size", "32", "--slices", "4",
                     "--out-dir", str(root / "data")]) == 0
    man = root / "data" / "manifest.json"
    base = ["--manifest", man, "--config", cfg, "--out-dir", root / "run"]
    assert cli.main([str(a) for a in ["train", "phase1", *base]]) == 0
    assert cli.main([str(a) for a in ["train", "phase2", *base]]) == 0
    assert cli.main([str(a) for a in ["standardize", *base, "--start-mode", "truncated:10"]]) == 0
    return root, man, cfg


def test_usage_errors(capsys, tmp_path):
    assert run([], capsys)[0] == 1
    assert run(["train", "phase1", "--bogus"], capsys)[0] == 1
    assert run(["train", "phase1", "--epochs1", "many"], capsys)[0] == 1
    (tmp_path / "c.json").write_text('{"epochs": 3}')
    code, _, err = run(["train", "phase1", "--manifest", "m.json", "--config", tmp_path / "c.json"], capsys)
    assert code == 1 and "unknown config keys" in err
    (tmp_path / "bad.json").write_text("[1, 2]")
    assert run(["train", "phase1", "--manifest", "m.json", "--config", tmp_path / "bad.json"], capsys)[0] == 1
    assert run(["train", "phase1"], capsys)[0] == 1
    assert run(["train", "phase1", "--manifest", "m.json", "--method", "ddpm-only"], capsys)[0] == 1


def test_data_errors(capsys, tmp_path):
    code, _, err = run(["train", "phase1", "--manifest", tmp_path / "missing.json"], capsys)
    assert code == 2 and "manifest not found" in err
    (tmp_path / "junk.ltck").write_bytes(b"junk")
    man = tmp_path / "d" / "manifest.json"
    assert run(["phantom", "gen", "--n", "2", "--n-train", "1", "--size", "16", "--slices", "2",
                "--out-dir", tmp_path / "d"], capsys)[0] == 0
    code, _, err = run(["standardize", "--manifest", man, "--method", "autoencoder",
                        "--phase1", tmp_path / "junk.ltck"], capsys)
    assert code == 2 and "not an LTCK" in err
    assert run(["evaluate", "--manifest", man, "--std-dir", tmp_path], capsys)[0] == 2


def test_numeric_failure(capsys, workspace, monkeypatch):
    root, man, cfg = workspace

    def bad(heads, target, weights, kind):
        return float("inf"), [np.zeros_like(h) for h in heads]

    monkeypatch.setattr(P, "deep_supervision_loss", bad)
    code, _, err = run(["train", "phase1", "--manifest", man, "--config", cfg, "--out-dir", root / "nan"], capsys)
    assert code == 3 and "non-finite" in err


def test_help_shows_defaults(capsys):
    code, out, _ = run(["train", "phase1", "--help"], capsys)
    assert code == 0
    assert "(default: 40)" in out and "(default: 0.001)" in out
    assert "default: None" not in out
    code, out, _ = run(["standardize", "--help"], capsys)
    assert "(default: truncated:100)" in out


def test_effective_config_precedence(tmp_path):
    (tmp_path / "c.json").write_text('{"epochs1": 5, "lr": 0.01}')
    args = cli.build_parser().parse_args(["train", "phase1", "--config", str(tmp_path / "c.json"),
                                          "--lr", "0.5"])
    cfg = cli.effective_config(args)
    assert (cfg.epochs1, cfg.lr, cfg.batch) == (5, 0.5, 8)


def test_training_echo_and_determinism(capsys, workspace):
    root, man, cfg = workspace
    code, out, _ = run(["train", "phase1", "--manifest", man, "--config", cfg, "--out-dir", root / "again"], capsys)
    assert code == 0
    echo = json.loads(next(line for line in out.splitlines() if line.startswith('{"effective_config"')))
    assert echo["effective_config"]["depth"] == 3
    assert (root / "again" / "phase1.ltck").read_bytes() == (root / "run" / "phase1.ltck").read_bytes()
    doc = json.loads((root / "run" / "run_phase1.json").read_text())
    assert doc["outputs"]["checkpoint"].endswith("phase1.ltck")


def test_standardize_outputs(workspace):
    root, man, _ = workspace
    index = json.loads((root / "run" / "standardized" / "standardized.json").read_text())["volumes"]
    assert sorted(index) == ["3", "4", "5"]


def test_evaluate_b_against_itself(capsys, workspace):
    root, man, _ = workspace
    code, out, _ = run(["evaluate", "--manifest", man, "--against", "b", "--out-dir", root / "ev_b"], capsys)
    assert code == 0
    summary = json.loads((root / "ev_b" / "eval_summary.json").read_text())
    assert all(v == 1.0 for v in summary["model_ccc"].values())
    assert "1.00 +/- 0.00" in out


def test_evaluate_features_report(capsys, workspace):
    root, man, _ = workspace
    std = root / "run" / "standardized"
    code, out, _ = run(["evaluate", "--manifest", man, "--std-dir", std, "--out-dir", root / "ev"], capsys)
    assert code == 0 and "baseline (A vs B)" in out
    code, _, _ = run(["features", "--manifest", man, "--image", "std", "--std-dir", std,
                      "--out", root / "f.csv"], capsys)
    assert code == 0 and (root / "f.csv").read_text().startswith("volume_id,roi_id,class,feature,value")
    code, out, _ = run(["report", "--ccc", root / "ev" / "ccc_model.csv", "--baseline",
                        root / "ev" / "ccc_baseline.csv", "--out", root / "table.txt",
                        "--pgm-dir", root / "pgm", "--manifest", man, "--std-dir", std, "--n-dumps", 2], capsys)
    assert code == 0
    assert (root / "table.txt").read_text().strip() == out.split("wrote slice")[0].strip()
    pgms = sorted((root / "pgm").iterdir())
    assert len(pgms) == 2
    assert pgms[0].read_bytes().startswith(b"P5\n100 32\n255\n")


def test_pgm_bytes():
    img = np.array([[-2000.0, -1000.0], [-300.0, 400.0]])
    raw = cli.to_pgm_bytes(img)
    assert raw[:11] == b"P5\n2 2\n255\n"
    assert list(raw[11:]) == [0, 0, 128, 255]


def test_render_table_alignment():
    rep = CCCReport([("GLCM", "a", 0.5), ("GLCM", "b", 0.7), ("ID", "m", -0.25)],
                    {"GLCM": (0.6, 0.1, 2), "ID": (-0.25, 0.0, 1)})
    lines = cli.render_table(rep, rep).splitlines()
    assert lines[0].startswith("class")
    col = lines[0].index("model")
    assert all(line[col - 2:col] == "  " for line in lines[2:])
    assert "0.60 +/- 0.10" in lines[2] and "-0.25 +/- 0.00" in lines[3]
