import json

import pytest

from app.env import settings
from app.cli import main
from app.apis.experiments import (
    PRESETS,
    SCHEMA_LINE,
    dump_config,
    load_config,
    run_preset,
    validate_config,
)
from app.apis.models import StageStatus
from app.apis.utils import ConfigError


def test_preset_defaults_fill_the_config():
    cfg = load_config(preset="random-soundness")
    assert (cfg.complex.n, cfg.complex.d) == (16, 16)
    assert (cfg.tester.k, cfg.tester.s) == (8, 2)
    assert cfg.run.preset == "random-soundness"
    assert cfg.pipeline.delta == 0.3


def test_precedence_preset_file_override_flag():
    text = "[tester]\nk = 3\ns = 1\n\n[run]\nseed = 4\n"
    cfg = load_config(text, preset="completeness")
    assert cfg.tester.k == 3 and cfg.run.seed == 4
    cfg = load_config(text, preset="completeness", overrides=["tester.k=2"], seed=9, out="elsewhere")
    assert cfg.tester.k == 2 and cfg.tester.s == 1
    assert cfg.run.seed == 9 and cfg.run.out == "elsewhere"


def test_preset_named_in_the_file():
    cfg = load_config("[run]\npreset = rp2-coboundary\n")
    assert cfg.run.preset == "rp2-coboundary"
    assert cfg.complex.kind == "rp2" and cfg.complex.n is None


def test_s_above_k_names_both_keys():
    with pytest.raises(ConfigError) as err:
        load_config("[tester]\nk = 2\ns = 3\n", source="bad.ini", preset="completeness")
    assert "tester.s" in err.value.key and "tester.k" in err.value.key
    assert err.value.line == 3
    assert str(err.value).startswith("bad.ini:3:")


def test_unknown_section_and_key_are_located():
    with pytest.raises(ConfigError) as err:
        load_config("[tester]\nk = 4\n\n[testr]\nk = 2\n", preset="completeness")
    assert err.value.key == "testr" and (err.value.line, err.value.column) == (4, 1)
    with pytest.raises(ConfigError) as err:
        load_config("[tester]\nk = 4\nkk = 2\n", preset="completeness")
    assert err.value.key == "tester.kk" and err.value.line == 3
    with pytest.raises(ConfigError) as err:
        load_config("[tester]\nk = four\n", preset="completeness")
    assert err.value.key == "tester.k" and (err.value.line, err.value.column) == (2, 5)


def test_range_errors():
    for text, key in (
        ("[complex]\nd = 20\n", "complex.d"),
        ("[pipeline]\neta = 1.5\n", "pipeline.eta"),
        ("[pipeline]\nschedule = spiral\n", "pipeline.schedule"),
        ("[tester]\ncorruption = -0.1\n", "tester.corruption"),
        ("[run]\nworkers = -1\n", "run.workers"),
    ):
        with pytest.raises(ConfigError) as err:
            load_config(text, preset="completeness")
        assert err.value.key.split(", ")[0] == key
        assert err.value.line == 2


def test_unknown_preset_lists_the_available_ones():
    with pytest.raises(ConfigError) as err:
        load_config(preset="nope")
    assert "completeness" in str(err.value)
    with pytest.raises(ConfigError):
        run_preset("nope")


def test_bad_overrides():
    with pytest.raises(ConfigError):
        load_config(preset="completeness", overrides=["tester.k"])
    with pytest.raises(ConfigError):
        load_config(preset="completeness", overrides=["runner.seed=1"])


def test_facet_file_purity_error_cites_the_line(tmp_path, fixtures_dir):
    config = tmp_path / "facets.ini"
    config.write_text(f"[complex]\nkind = facets\nfacets = {fixtures_dir / 'mixed_sizes.facets'}\n", encoding="utf-8")
    with pytest.raises(ConfigError) as err:
        validate_config(config)
    assert err.value.key == "complex.facets"
    assert err.value.line == 5
    assert "PurityError" in str(err.value)


def test_dump_round_trips(tmp_path):
    cfg = load_config(preset="rp2-coboundary", overrides=["tester.nu=0.25"])
    path = tmp_path / "dumped.ini"
    path.write_text(dump_config(cfg), encoding="utf-8")
    assert validate_config(path) == cfg


def test_run_record_outputs(tmp_path):
    record = run_preset("completeness", overrides=["tester.functions=2"], out=tmp_path / "completeness")
    assert record.passed
    assert record.stages[0].status == StageStatus.GREEN
    out = tmp_path / "completeness"
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["preset"] == "completeness" and report["config_hash"] == record.config_hash
    assert "wall_seconds" in report["timing"]
    lines = (out / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == SCHEMA_LINE
    assert lines[1] == "stage,metric,value"
    assert "completeness,status,green" in lines


def test_plot_data_is_written(tmp_path):
    record = run_preset("random-soundness", overrides=["tester.trials=2000"], out=tmp_path)
    lines = (tmp_path / "plotdata" / "intersection_sizes.csv").read_text(encoding="utf-8").splitlines()
    assert lines[:2] == [SCHEMA_LINE, "x,y"]
    assert len(lines) > 2
    assert record.verdicts[0].criterion == "random-soundness"


def test_runs_are_reproducible():
    first = run_preset("rp2-coboundary", seed=3, write=False)
    second = run_preset("rp2-coboundary", seed=3, write=False)
    assert first.passed
    assert first.deterministic_json() == second.deterministic_json()


def test_failing_preset_still_yields_a_record(tmp_path):
    record = run_preset("planted-adversary", overrides=["tester.k=4", "tester.trials=100"], out=tmp_path)
    assert not record.passed
    assert record.stages[0].status == StageStatus.FAILED
    assert "error" in record.stages[0].metrics
    assert (tmp_path / "report.json").exists()


def test_every_preset_has_valid_defaults():
    for name in PRESETS:
        assert load_config(preset=name).run.preset == name


def test_cli_exit_codes(tmp_path, capsys, fixtures_dir):
    assert main(["list-presets"]) == 0
    assert "shortlist-recovery" in capsys.readouterr().out
    assert main(["run", "nope"]) == 2
    assert "available" in capsys.readouterr().err
    assert main(["run", "rp2-coboundary", "--out", str(tmp_path / "ok"), "--workers", "1"]) == 0
    assert "[PASS] rp2-coboundary" in capsys.readouterr().out
    assert main(["run", "planted-adversary", "--set", "tester.k=4", "--out", str(tmp_path / "failed")]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[tester]\nk = 2\ns = 3\n", encoding="utf-8")
    assert main(["validate", "--config", str(bad)]) == 2
    assert f"{bad}:3:" in capsys.readouterr().err
    good = tmp_path / "good.ini"
    good.write_text("[run]\npreset = completeness\n", encoding="utf-8")
    assert main(["validate", "--config", str(good)]) == 0
    assert "[tester]" in capsys.readouterr().out


def test_subinstance_preset_runs_at_the_exhaustive_cap():
    cfg = load_config(preset="subinstance-stability")
    assert cfg.complex.n == settings.exhaustive_n_cap
