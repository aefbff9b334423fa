import csv

import numpy as np
import pytest

from kneemorph import cli
from kneemorph.config import ConfigError, RunConfig, format_config, parse_config
from kneemorph.training import NumericalError

TINY = """\
# small enough to run in seconds
n_pairs = 6
size = 32
steps = 3
batch_size = 3
t_max = 40
denoiser_base = 8
regnet_base = 8
sup_per_class = 30
sup_epochs = 2
sup_min_accuracy = 0.5
checkpoint_every = 1
sweep_lambda_mph = 0, 0.1
sweep_lambda_sup = 0, 0.01
sweep_steps = 2
sweep_tail = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(verb, cfg_file, out, *extra):
    return cli.main([verb, "--config", str(cfg_file), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    codes = {v: run(v, cfg, out) for v in ("phantom-gen", "pretrain-supervisor", "train", "synthesize", "evaluate")}
    return root, cfg, out, codes


# ------------------------------------------------------------------- config

def test_parse_types_and_comments():
    cfg = parse_config("steps = 12  # short\netas = 0, 0.5, 1\nstop_sup_grad_at_noise = true\n\n# c\n")
    assert cfg.steps == 12 and cfg.etas == (0.0, 0.5, 1.0) and cfg.stop_sup_grad_at_noise is True


def test_unknown_key_is_error():
    with pytest.raises(ConfigError, match="lamda_sup"):
        parse_config("lamda_sup = 0.1\n")


def test_bad_value_is_error():
    with pytest.raises(ConfigError, match="steps"):
        parse_config("steps = many\n")
    with pytest.raises(ConfigError):
        parse_config("just words\n")


def test_format_parse_round_trip():
    cfg = parse_config(TINY)
    assert parse_config(format_config(cfg)) == cfg


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert (cfg.n_pairs, cfg.size, cfg.steps, cfg.batch_size, cfg.t_max, cfg.seed) == (60, 64, 300, 8, 200, 7)
    assert (cfg.lambda_mph, cfg.lambda_sup) == (0.1, 0.01)
    assert 0.1 in cfg.sweep_lambda_mph and 0.01 in cfg.sweep_lambda_sup


# ---------------------------------------------------------------------- cli

def test_pipeline_exit_codes(pipeline):
    assert all(code == 0 for code in pipeline[3].values()), pipeline[3]


def test_phantom_gen_outputs(pipeline):
    _, _, out, _ = pipeline
    assert len((out / "manifest.tsv").read_text().splitlines()) == 6
    assert len((out / "truth.tsv").read_text().splitlines()) == 18
    assert (out / "resolved_config.txt").exists()


def test_default_phantom_gen_writes_60_pairs(tmp_path):
    assert cli.main(["phantom-gen", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "manifest.tsv").read_text().splitlines()) == 60


def test_phantom_gen_is_byte_identical(tmp_path, cfg_file):
    assert run("phantom-gen", cfg_file, tmp_path / "a") == 0
    assert run("phantom-gen", cfg_file, tmp_path / "b") == 0
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.tsv").read_text() == (tmp_path / "b" / "manifest.tsv").read_text()


def test_invalid_gap_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("gap0 = 3\ngap1 = 4\n")
    assert cli.main(["phantom-gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "gap1" in capsys.readouterr().err


def test_missing_prerequisite_names_file(tmp_path, cfg_file, capsys):
    assert run("train", cfg_file, tmp_path / "empty") == 1
    assert "supervisor.dmmc" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.cfg")]) == 1


def test_synthesize_five_frames_eta0_is_source(pipeline):
    _, _, out, _ = pipeline
    frames = sorted((out / "frames").iterdir())
    assert len(frames) == 6 * 5
    for i in range(6):
        src = out / "images" / f"pair_{i:03d}_source.png"
        mine = [f for f in frames if f.name.startswith(f"{i:03d}_")]
        assert len(mine) == 5
        eta0 = [f for f in mine if f.name.endswith("eta0.00.png")][0]
        assert eta0.read_bytes() == src.read_bytes()


def test_source_only_synthesis(pipeline):
    root, cfg, out, _ = pipeline
    so = root / "so.cfg"
    so.write_text(TINY + "synth_mode = source-only\n")
    assert run("synthesize", so, out) == 0
    assert len(list((out / "frames_mean_flow").iterdir())) == 30


def test_evaluate_records(pipeline):
    _, _, out, _ = pipeline
    with open(out / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 * 3
    with open(out / "eval_summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 3


def test_train_resume_matches(pipeline):
    root, cfg, out, _ = pipeline
    full = (out / "train_log.csv").read_bytes()
    res = root / "resume.cfg"
    res.write_text(TINY + f"resume = {out / 'checkpoints' / 'step_000001.dmmc'}\n")
    assert run("train", res, out) == 0
    assert (out / "train_log.csv").read_bytes() == full


def test_sweep_rows_and_isolation(pipeline):
    root, cfg, out, _ = pipeline
    assert run("sweep", cfg, out) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert {(float(r["lambda_mph"]), float(r["lambda_sup"])) for r in rows} == {
        (0.0, 0.0), (0.0, 0.01), (0.1, 0.0), (0.1, 0.01)}
    for r in rows:
        assert float(r["neg_log_l_sup"]) == pytest.approx(-np.log(float(r["final_l_sup"])), abs=1e-12)
    # the cell rerun on its own reproduces its row
    one = root / "one.cfg"
    one.write_text(TINY + "sweep_lambda_mph = 0.1\nsweep_lambda_sup = 0.01\n"
                   f"supervisor = {out / 'supervisor.dmmc'}\nmanifest = {out / 'manifest.tsv'}\n")
    assert run("sweep", one, root / "single") == 0
    with open(root / "single" / "sweep.csv") as fh:
        single = list(csv.DictReader(fh))[0]
    match = [r for r in rows if float(r["lambda_mph"]) == 0.1 and float(r["lambda_sup"]) == 0.01][0]
    assert single == match


def test_numerical_failure_exit_code(pipeline, monkeypatch):
    root, cfg, _, _ = pipeline

    def boom(*a, **k):
        raise NumericalError("loss became NaN")

    monkeypatch.setattr(cli, "fit", boom)
    assert run("train", cfg, root / "run") == 3


def test_io_failure_exit_code(pipeline, tmp_path):
    root, cfg, out, _ = pipeline
    broken = tmp_path / "m.tsv"
    broken.write_text("missing_a.png\tmissing_b.png\n")
    c = tmp_path / "c.cfg"
    c.write_text(TINY + f"manifest = {broken}\nsupervisor = {out / 'supervisor.dmmc'}\n")
    assert run("train", c, tmp_path / "o") == 2


def test_seed_flag_overrides(tmp_path, cfg_file):
    assert run("phantom-gen", cfg_file, tmp_path / "s1", "--seed", "1") == 0
    assert run("phantom-gen", cfg_file, tmp_path / "s2", "--seed", "2") == 0
    a = (tmp_path / "s1" / "images" / "pair_000_source.png").read_bytes()
    b = (tmp_path / "s2" / "images" / "pair_000_source.png").read_bytes()
    assert a != b
    assert "seed = 1" in (tmp_path / "s1" / "resolved_config.txt").read_text()
