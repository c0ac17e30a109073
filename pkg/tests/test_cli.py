import json

import pytest

from sdnas import cli
from sdnas.cli import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    config_to_ini,
    load_config,
    main,
)

TINY_INI = """\
[search]
total_epochs = 4
warmup_epochs = 2
batch_size = 32
num_cells = 1
feature_dim = 4

[dataset]
n = 120

[sharpness]
probe_size = 32
power_max_steps = 10

[evaluation]
discrete_epochs = 3
eval_seeds = 1
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_default_config_roundtrips():
    rc = RunConfig()
    assert config_from_dict(config_to_dict(rc)) == rc
    text = config_to_ini(rc)
    assert "lambda = 1.0" in text
    assert "warmup_epochs = 25" in text


def test_load_config_missing_file_defaults():
    rc = load_config(None)
    assert rc.search.total_epochs == 50
    assert rc.dataset.kind == "moons"


def test_unknown_key_rejected():
    with pytest.raises(cli.ConfigError, match="unknown config key"):
        config_from_dict({"search": {"warp_speed": "9"}})
    with pytest.raises(cli.ConfigError, match="unknown config section"):
        config_from_dict({"turbo": {}})


def test_bad_value_rejected():
    with pytest.raises(cli.ConfigError, match="bad value"):
        config_from_dict({"search": {"total_epochs": "fifty"}})


def test_invalid_invariant_rejected_before_compute(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[search]\nwarmup_epochs = 60\n")  # >= total_epochs
    rc_exit = main(["search", "--config", str(path), "--out", str(tmp_path / "x")])
    assert rc_exit == 2
    assert not (tmp_path / "x").exists()


def test_runtime_failure_exit_code(tmp_path, tiny_config):
    rc_exit = main(
        ["compare", "--config", str(tiny_config), "--oracle", str(tmp_path / "none.csv")]
    )
    assert rc_exit == 1


def test_search_writes_artifacts_and_manifest_reruns_identically(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("SDNAS_DETERMINISTIC", "1")
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["search", "--config", str(tiny_config), "--out", str(out1)]) == 0
    for name in ("genotype.txt", "epochs.csv", "sharpness.csv", "manifest.json"):
        assert (out1 / name).exists()
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert manifest["config"]["search"]["total_epochs"] == "4"
    assert main(["search", "--config", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
    for name in ("genotype.txt", "epochs.csv", "sharpness.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_nondeterministic_mode_keeps_wall_times(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("SDNAS_DETERMINISTIC", "0")
    out = tmp_path / "r"
    assert main(["search", "--config", str(tiny_config), "--out", str(out)]) == 0
    rows = (out / "epochs.csv").read_text().splitlines()[1:]
    assert any(row.rsplit(",", 1)[1] != "0.0" for row in rows)


def test_seed_override(tmp_path, tiny_config):
    out = tmp_path / "r"
    assert main(["search", "--config", str(tiny_config), "--seed", "9", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9
    assert manifest["config"]["search"]["seed"] == "9"


def test_eval_genotype_cmd(tmp_path, tiny_config, capsys):
    out = tmp_path / "r"
    main(["search", "--config", str(tiny_config), "--out", str(out)])
    code = main(
        ["eval-genotype", "--genotype", str(out / "genotype.txt"), "--config", str(tiny_config),
         "--out", str(tmp_path / "ev")]
    )
    assert code == 0
    text = capsys.readouterr().out
    assert "accuracy" in text
    assert (tmp_path / "ev" / "eval.json").exists()


def test_build_oracle_compare_and_sweep(tmp_path, tiny_config, capsys):
    table = tmp_path / "table.csv"
    assert main(["build-oracle", "--config", str(tiny_config), "--out", str(table)]) == 0
    assert table.exists()

    cmp_dir = tmp_path / "cmp"
    assert main(
        ["compare", "--config", str(tiny_config), "--oracle", str(table), "--seeds", "2",
         "--out", str(cmp_dir)]
    ) == 0
    rows = (cmp_dir / "compare.csv").read_text().splitlines()
    assert rows[0] == "method,seed,accuracy,rank,regret,percentile,lambda_max_final"
    assert len(rows) == 1 + 4  # 2 methods x 2 seeds
    summary = (cmp_dir / "compare_summary.csv").read_text().splitlines()
    assert summary[0].startswith("method,median_regret")
    assert {r.split(",")[0] for r in summary[1:]} == {"darts", "sd-darts"}

    sweep_csv = tmp_path / "sweep.csv"
    code = main(
        ["sweep", "--config", str(tiny_config), "--axis", "window", "--values", "1,2,7",
         "--seeds", "1", "--oracle", str(table), "--out", str(sweep_csv)]
    )
    assert code == 0
    err = capsys.readouterr().err
    assert "window=7" in err and "skipped" in err  # invalid point logged, sweep continued
    lines = sweep_csv.read_text().splitlines()
    assert lines[0] == "axis_value,seed,accuracy,rank,regret,lambda_max_final"
    assert len(lines) == 1 + 2
    for row in lines[1:]:
        parts = row.split(",")
        assert len(parts) == 6
        float(parts[2]), int(parts[3]), float(parts[4]), float(parts[5])


def test_sweep_rejects_empty_values(tiny_config):
    assert main(["sweep", "--config", str(tiny_config), "--axis", "lambda", "--values", " , "]) == 2


def test_analyze_merges_runs(tmp_path, tiny_config):
    r1, r2 = tmp_path / "a", tmp_path / "b"
    main(["search", "--config", str(tiny_config), "--seed", "0", "--out", str(r1)])
    main(["search", "--config", str(tiny_config), "--seed", "1", "--out", str(r2)])
    an = tmp_path / "an"
    assert main(["analyze", str(r1), str(r2), "--out", str(an)]) == 0
    lines = (an / "sharpness_long.csv").read_text().splitlines()
    assert lines[0] == "method,seed,epoch,lambda_max,grad_norm"
    assert len(lines) == 1 + 2 * 4  # two runs, four epochs each
    med = (an / "sharpness_medians.csv").read_text().splitlines()
    assert med[0] == "method,epoch,lambda_max_median,grad_norm_median"
    assert len(med) == 1 + 4


def test_analyze_skips_incomplete_and_rejects_empty(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["analyze", str(empty)]) == 2
    err = capsys.readouterr().err
    assert "skipping" in err and "missing" in err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
