import csv
import json

import numpy as np
import pytest
from PIL import Image

from gradleak import cli, experiment
from gradleak.experiment import ConfigError, parse_config, run_experiment, serialize

MINIMAL = """
[experiment]
schema_version = 1
"""

SMALL = """
[experiment]
schema_version = 1
seed = 2
samples = 4

[data]
size = 8
count = 8

[model]
name = mlp

[attack]
methods = idlg
max_iterations = 25
"""


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.attack.methods == ("dlg",)
    assert cfg.defense.mechanism == "none" and cfg.defense.levels == (0.0,)
    assert cfg.data.source == "synth" and cfg.model.name == "cnn4"
    assert cfg.federation.attack_round == 0


def test_unknown_key_named_with_line():
    text = MINIMAL + "\n[defense]\nnoise_lvel = 100\n"
    with pytest.raises(ConfigError, match=r"line 6: unknown key 'noise_lvel'"):
        parse_config(text)


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(MINIMAL + "[optimizer]\nlr = 1\n")


def test_syntax_error_line():
    with pytest.raises(ConfigError, match="line 4"):
        parse_config(MINIMAL + "this is not a key value pair\n")


def test_missing_schema_version():
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config("[experiment]\nseed = 1\n")


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "[attack]\nmethods = dlg, magic\n")
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "[defense]\nlevels =\n")
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config("[experiment]\nschema_version = 1\nseed = one\n")
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(MINIMAL + "[data]\nsource = /nonexistent/dir\n")


def test_round_trip():
    text = SMALL + "[defense]\nmechanism = laplace\nlevels = 0, 100, 400\nbase_unit = 2.5e-4\n"
    cfg = parse_config(text)
    again = parse_config(serialize(cfg))
    assert again == cfg
    assert serialize(again) == serialize(cfg)


def test_env_override(monkeypatch, tmp_path):
    cfg = parse_config(MINIMAL)
    monkeypatch.setenv(experiment.OUTPUT_ENV, str(tmp_path / "x"))
    assert experiment.output_dir_for(cfg) == tmp_path / "x"


def test_derive_seed_stable():
    assert experiment.derive_seed(1, 2) == experiment.derive_seed(1, 2)
    assert experiment.derive_seed(1, 2) != experiment.derive_seed(2, 1)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = parse_config(SMALL + "[defense]\nmechanism = laplace\nlevels = 0, 100, 400\n")
    out = tmp_path_factory.mktemp("run")
    return cfg, run_experiment(cfg, out)


def test_counts(small_run):
    cfg, b = small_run
    rows = list(csv.reader(open(b.summary_path)))
    assert rows[0] == experiment.SUMMARY_HEADER
    assert len(rows) == 1 + 3
    lines = b.records_path.read_text().splitlines()
    assert len(lines) == 3 * 4
    assert all(json.loads(l)["error"] is None for l in lines)


def test_summary_matches_records(small_run):
    cfg, b = small_run
    recs = [json.loads(l) for l in b.records_path.read_text().splitlines()]
    rows = list(csv.DictReader(open(b.summary_path)))
    for row in rows:
        cell = [r for r in recs if r["method"] == row["method"]
                and r["noise_level"] == float(row["noise_level"])]
        ok = [r for r in cell if r["ssim"] >= 0.9]
        assert int(row["n_samples"]) == len(cell)
        assert float(row["asr"]) == len(ok) / len(cell)
        if ok:
            assert float(row["mean_ssim_success"]) == pytest.approx(np.mean([r["ssim"] for r in ok]))
        else:
            assert row["mean_ssim_success"] == ""
        assert float(row["mean_seconds"]) == pytest.approx(np.mean([r["seconds"] for r in cell]))


def test_images_written(small_run):
    cfg, b = small_run
    img = b.output_dir / "images"
    assert len(list((img / "original").glob("*.png"))) == 4
    assert (img / "idlg" / "level_400" / "grid.png").exists()
    assert len(list((img / "idlg" / "level_0").glob("sample_*.png"))) == 4


def _strip_time(text):
    rows = list(csv.reader(text.splitlines()))
    return [r[:-1] for r in rows], [len(r) for r in rows]


def test_rerun_identical(small_run, tmp_path):
    cfg, b = small_run
    again = run_experiment(cfg, tmp_path)
    assert _strip_time(again.summary_path.read_text()) == _strip_time(b.summary_path.read_text())
    strip = [{k: v for k, v in json.loads(l).items() if k != "seconds"}
             for l in b.records_path.read_text().splitlines()]
    strip2 = [{k: v for k, v in json.loads(l).items() if k != "seconds"}
              for l in again.records_path.read_text().splitlines()]
    assert strip == strip2


def test_workers_same_records(small_run, tmp_path):
    from dataclasses import replace
    cfg, b = small_run
    par = run_experiment(replace(cfg, workers=2), tmp_path)
    assert _strip_time(par.summary_path.read_text()) == _strip_time(b.summary_path.read_text())


def test_failed_sample_recorded(tmp_path):
    # huge noise makes label inference ambiguous for some samples; the
    # cosine attack then falls back to the known label, the sweep never aborts
    cfg = parse_config(SMALL.replace("idlg", "gradinv") +
                       "[defense]\nmechanism = laplace\nlevels = 1e6\nbase_unit = 1.0\n")
    b = run_experiment(cfg, tmp_path)
    assert len(b.records) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_objective_recorded_as_error(tmp_path):
    # noise near the float range overflows the squared distance at the start
    cfg = parse_config(SMALL + "[defense]\nmechanism = laplace\nlevels = 1e300\nbase_unit = 1.0\n")
    b = run_experiment(cfg, tmp_path)
    assert len(b.records) == 4
    assert all(r["status"] == "error" and r["error"] for r in b.records)
    row = b.rows[0]
    assert row[3] == "0.0" and row[4] == ""


class TestCli:
    def write(self, tmp_path, text):
        p = tmp_path / "c.ini"
        p.write_text(text)
        return p

    def test_validate_ok(self, tmp_path, capsys):
        assert cli.main(["validate", str(self.write(tmp_path, MINIMAL))]) == 0
        assert capsys.readouterr().out.strip() == "OK"

    def test_validate_bad(self, tmp_path, capsys):
        assert cli.main(["validate", str(self.write(tmp_path, MINIMAL + "[model]\nwidth = 3\n"))]) != 0
        assert "width" in capsys.readouterr().err

    def test_usage_prints_grammar(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["frobnicate"])
        assert e.value.code != 0
        assert "gradleak attack-one" in capsys.readouterr().err

    def test_no_command(self, capsys):
        assert cli.main([]) != 0
        assert "usage" in capsys.readouterr().err

    def test_stats_two_images(self, tmp_path, capsys):
        for name, v in (("a", 0), ("b", 255)):
            d = tmp_path / "data" / name
            d.mkdir(parents=True)
            Image.fromarray(np.full((4, 4, 3), v, np.uint8)).save(d / "x.png")
        assert cli.main(["stats", str(tmp_path / "data")]) == 0
        out = capsys.readouterr().out
        assert out.count("0.5000  0.5000") == 3

    def test_run_with_seed(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(experiment.OUTPUT_ENV, str(tmp_path / "out"))
        cfg = self.write(tmp_path, SMALL.replace("samples = 4", "samples = 1"))
        assert cli.main(["run", str(cfg), "--seed", "9"]) == 0
        assert (tmp_path / "out" / "summary.csv").exists()
        assert json.loads((tmp_path / "out" / "records.jsonl").read_text().splitlines()[0])["seed"] \
            == experiment.derive_seed(9, 2, 0)

    def test_attack_one_snapshots(self, tmp_path, capsys):
        img = (np.random.default_rng(0).random((8, 8, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "img.png")
        cfg = self.write(tmp_path, SMALL.replace("max_iterations = 25",
                                                 "max_iterations = 20\nsnapshot_stride = 5"))
        out = tmp_path / "snaps"
        assert cli.main(["attack-one", str(tmp_path / "img.png"), str(cfg), "--label", "1",
                         "--out", str(out)]) == 0
        names = sorted(p.name for p in out.glob("iter_*.png"))
        assert names[0] == "iter_00000.png"
        assert all(int(n[5:10]) % 5 == 0 for n in names)
        assert (out / "grid.png").exists()

    def test_attack_one_bad_label(self, tmp_path, capsys):
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "img.png")
        cfg = self.write(tmp_path, SMALL)
        assert cli.main(["attack-one", str(tmp_path / "img.png"), str(cfg), "--label", "9"]) != 0
