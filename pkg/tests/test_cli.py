import csv
import hashlib
import xml.etree.ElementTree as ET

import pytest

from badgan.cli import ABLATION_COLUMNS, GRID_RESOLUTION, parse_setting, run
from badgan.config import load_config, save_config
from badgan.objectives import ConfigurationError
from badgan.trainer import TrainConfig

TINY = dict(steps=6, eval_interval=3, hidden=16, batch_size=16)


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "spins.cfg"
    save_config(TrainConfig(**TINY), p)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    p = base / "tiny.cfg"
    save_config(TrainConfig(**TINY), p)
    assert run(["train", "--config", str(p), "--seed", "7", "--out", str(base / "r")]) == 0
    return base / "r"


def test_train_twice_is_byte_identical(tmp_path, cfg_path):
    for name in ("a", "b"):
        assert run(["train", "--config", str(cfg_path), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "log.csv").read_bytes()
    assert a == (tmp_path / "b" / "log.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.txt").read_bytes() == (tmp_path / "b" / "checkpoint.txt").read_bytes()


def test_manifest_reproduces_run(tmp_path, trained):
    manifest = trained / "manifest.txt"
    text = manifest.read_text()
    for line in text.split("[artifacts]")[1].strip().splitlines():
        name, digest = (s.strip() for s in line.split("="))
        assert hashlib.sha256((trained / name).read_bytes()).hexdigest() == digest
    assert load_config(manifest).seed == 7
    assert run(["train", "--config", str(manifest), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "log.csv").read_bytes() == (trained / "log.csv").read_bytes()


def test_output_directory_created(tmp_path, cfg_path):
    out = tmp_path / "deep" / "nested"
    assert run(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "data.csv").exists() and (out / "manifest-gen-data.txt").exists()
    assert run(["fit-density", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "density.txt").exists()


def test_ablate_one_row_per_setting(tmp_path, cfg_path):
    grid = "fm,fm+ld,fm+pt,fm+pt+ent"
    code = run(["ablate", "--dataset", "spins", "--config", str(cfg_path), "--grid", grid, "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert [r["setting"] for r in rows] == grid.split(",")
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert [r["LD"] for r in rows] == ["0", "1", "0", "0"]
    assert [r["Ent"] for r in rows] == ["0", "0", "0", "1"]


def test_parse_setting():
    base = TrainConfig()
    c = parse_setting("fm+ld+q100", base)
    assert (c.w_fm, c.w_ld, c.q_centile, c.entropy_method) == (1.0, 1.0, 100.0, "none")
    assert parse_setting("fm+vi", base).entropy_method == "vi"
    with pytest.raises(ConfigurationError):
        parse_setting("fm+pt+vi", base)
    with pytest.raises(ConfigurationError):
        parse_setting("fm+bogus", base)


def test_eval_and_theory_check(tmp_path, trained):
    assert run(["eval", "--checkpoint", str(trained), "--out", str(tmp_path)]) == 0
    keys = [line.split()[0] for line in (tmp_path / "eval.txt").read_text().splitlines()]
    assert "test_error_rate" in keys and "boundary_fake_fraction" in keys
    assert run(["theory-check", "--checkpoint", str(trained), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "theory.csv").open()))
    names = {r["check"] for r in rows}
    assert {
        "ratio_true", "ratio_fake", "perfect_p_fake_dev", "lemma_max_violation",
        "prop2_min_fraction", "convexity_violations", "disjoint_fraction",
    } <= names
    assert (tmp_path / "manifest-theory-check.txt").exists()


def test_export_plots(tmp_path, trained):
    assert run(["export-plots", "--checkpoint", str(trained), "--out", str(tmp_path)]) == 0
    svgs = sorted(p.name for p in tmp_path.glob("*.svg"))
    assert svgs == ["data.svg", "decision_boundary.svg", "generated.svg", "true_fake.svg"]
    for name in svgs:
        assert ET.parse(tmp_path / name).getroot().tag.endswith("svg")
    lines = (tmp_path / "boundary_grid.csv").read_text().splitlines()
    assert len(lines) - 1 == GRID_RESOLUTION**2


def test_export_plots_feature_space_when_2d(tmp_path):
    p = tmp_path / "c.cfg"
    save_config(TrainConfig(dataset="circles", d_f=2, **TINY), p)
    assert run(["train", "--config", str(p), "--out", str(tmp_path / "r")]) == 0
    assert run(["export-plots", "--checkpoint", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "feature_space.svg").exists()
    assert len((tmp_path / "r" / "feature_grid.csv").read_text().splitlines()) - 1 == GRID_RESOLUTION**2


def test_exit_codes(tmp_path, capsys):
    assert run(["train", "--bogus"]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["eval", "--checkpoint", str(tmp_path / "missing")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("[optim]\nsteps = -3\n")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    # an oracle radius covering the whole box leaves nothing to sample
    sat = tmp_path / "sat.cfg"
    save_config(TrainConfig(generator_mode="oracle_complement", oracle_radius_factor=1e4, **TINY), sat)
    assert run(["train", "--config", str(sat), "--out", str(tmp_path / "y")]) == 2
    assert "runtime failure" in capsys.readouterr().err


def test_nan_abort_exit_code(tmp_path, cfg_path, monkeypatch, capsys):
    from badgan import trainer as tr
    from badgan.tensor import Tensor

    orig = tr.O.discriminator_loss
    monkeypatch.setattr(tr.O, "discriminator_loss", lambda *a, **k: orig(*a, **k) * Tensor(float("nan")))
    assert run(["train", "--config", str(cfg_path), "--out", str(tmp_path / "n")]) == 2
    assert "diagnostic" in capsys.readouterr().err


def test_preset_name_as_config(tmp_path):
    code = run(["gen-data", "--config", "circles-fm", "--out", str(tmp_path)])
    assert code == 0
    assert "dataset = circles" in (tmp_path / "manifest-gen-data.txt").read_text()
