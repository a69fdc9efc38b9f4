import os

import numpy as np
import pytest

from rainscale import cli
from rainscale.grid import GridStack, Resolution, Variable, load_dataset, load_grid_stack, save_dataset, save_grid_stack
from rainscale.metrics import read_report_csv, read_pgm
from rainscale.synth import preset, synth_dataset


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--preset", "tiny", "--seed", 4, "--out", root) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = run("train", "--data", dataset, "--seed", 1, "--out", out, "--iterations", 2, "--batch", 2,
               "--val-every", 1)
    assert code == 0
    return out


def precip_stack(values, start=0):
    values = np.asarray(values, dtype=np.float64)
    steps = np.arange(start, start + values.shape[0], dtype=np.int64)
    return GridStack(Resolution.FINE, steps, {Variable.PRECIP: values})


# ---------------------------------------------------------------- synth


def test_synth_loadable(dataset):
    coarse, fine = load_dataset(dataset)
    assert coarse.shape == (8, 16) and fine.shape == (32, 64)
    assert len(coarse) == len(fine) == 64


def test_synth_same_seed_byte_identical(dataset, tmp_path):
    assert run("synth", "--preset", "tiny", "--seed", 4, "--out", tmp_path / "again") == 0
    assert tree_bytes(dataset) == tree_bytes(tmp_path / "again")


def test_synth_bad_fine_shape_exit_2(tmp_path, capsys):
    code = run("synth", "--preset", "tiny", "--seed", 0, "--fine-shape", "30,64", "--out", tmp_path / "d")
    assert code == 2
    assert "4" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_synth_seed_mandatory(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--out", tmp_path / "d")
    assert exc.value.code == 2


def test_synth_prints_summary(tmp_path, capsys):
    run("synth", "--preset", "tiny", "--seed", 2, "--steps", 16, "--out", tmp_path / "d")
    text = capsys.readouterr().out
    assert "p99.9" in text and "steps 16" in text


# ---------------------------------------------------------------- train


def test_train_outputs(trained):
    for sub in ("checkpoint", "final"):
        assert os.path.isfile(trained / sub / "checkpoint.txt")
    lines = (trained / "losses.csv").read_text().splitlines()
    assert len(lines) == 3


def test_train_missing_dataset_exit_3(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--seed", 0, "--out", tmp_path / "r") == 3


def test_train_invalid_config_exit_2(dataset, tmp_path):
    assert run("train", "--data", dataset, "--seed", 0, "--out", tmp_path / "r", "--batch", 0) == 2
    assert run("train", "--data", dataset, "--seed", 0, "--out", tmp_path / "r", "--cap-quantile", 1.5) == 2


def test_train_deterministic(dataset, trained, tmp_path):
    run("train", "--data", dataset, "--seed", 1, "--out", tmp_path / "r", "--iterations", 2, "--batch", 2,
        "--val-every", 1)
    assert tree_bytes(trained / "checkpoint") == tree_bytes(tmp_path / "r" / "checkpoint")


def test_train_sr_ignores_coarse(dataset, tmp_path):
    coarse, fine = load_dataset(dataset)
    rng = np.random.default_rng(0)
    for var in list(coarse.fields):
        coarse.fields[var] = coarse.fields[var] * rng.uniform(0.5, 1.5, coarse.fields[var].shape)
    save_dataset(coarse, fine, tmp_path / "other")
    args = ("--seed", 3, "--model", "sr-cgan", "--iterations", 1, "--batch", 2, "--k-d", 1)
    assert run("train", "--data", dataset, "--out", tmp_path / "a", *args) == 0
    assert run("train", "--data", tmp_path / "other", "--out", tmp_path / "b", *args) == 0
    assert tree_bytes(tmp_path / "a" / "checkpoint") == tree_bytes(tmp_path / "b" / "checkpoint")
    assert os.path.isfile(tmp_path / "a" / "critic" / "checkpoint.txt")


# ---------------------------------------------------------------- downscale


def test_downscale_shape_and_idempotent(dataset, trained, tmp_path):
    args = ("downscale", "--data", dataset, "--checkpoint", trained / "checkpoint")
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    out = load_grid_stack(tmp_path / "a")
    assert out.fields[Variable.PRECIP].shape == (16, 32, 64)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_downscale_interpolator_needs_no_checkpoint(dataset, tmp_path):
    code = run("downscale", "--data", dataset, "--model", "interpolator", "--checkpoint", tmp_path / "none",
               "--steps", "all", "--out", tmp_path / "i")
    assert code == 0
    precip = load_grid_stack(tmp_path / "i").fields[Variable.PRECIP]
    assert precip.shape == (64, 32, 64)
    assert precip.min() >= 0 and not ((precip > 0) & (precip < 0.05)).any()


def test_downscale_missing_checkpoint_exit_3(dataset, tmp_path):
    assert run("downscale", "--data", dataset, "--checkpoint", tmp_path / "none", "--out", tmp_path / "o") == 3


def test_downscale_spec_mismatch_exit_2(dataset, trained, tmp_path):
    # a checkpoint whose manifest no longer matches its weights
    ck = tmp_path / "ck"
    ck.mkdir()
    for name, blob in tree_bytes(trained / "checkpoint").items():
        (ck / name).parent.mkdir(parents=True, exist_ok=True)
        (ck / name).write_bytes(blob)
    text = (ck / "checkpoint.txt").read_text().replace("DIRECT", "ENCODED", 1)
    (ck / "checkpoint.txt").write_text(text)
    assert run("downscale", "--data", dataset, "--checkpoint", ck, "--out", tmp_path / "o") == 2


# ---------------------------------------------------------------- evaluate


def test_evaluate_identity(dataset, tmp_path):
    truth = dataset / "fine"
    assert run("evaluate", "--truth", truth, f"same={truth}", "--out", tmp_path / "rep") == 0
    rows = read_report_csv(tmp_path / "rep" / "metrics.csv").rows
    assert rows
    for region, model, metric, value in rows:
        if metric.startswith("corr"):
            assert value == pytest.approx(1.0, abs=1e-12) or np.isnan(value)
        else:
            assert value == 0.0


def test_evaluate_row_schema(dataset, trained, tmp_path):
    run("downscale", "--data", dataset, "--model", "interpolator", "--out", tmp_path / "interp")
    run("downscale", "--data", dataset, "--checkpoint", trained / "checkpoint", "--out", tmp_path / "cnn")
    code = run("evaluate", "--truth", dataset / "fine", f"interp={tmp_path / 'interp'}", f"cnn={tmp_path / 'cnn'}",
               "--out", tmp_path / "rep")
    assert code == 0
    rows = read_report_csv(tmp_path / "rep" / "metrics.csv").rows
    keys = [(r[0], r[1], r[2]) for r in rows]
    assert len(keys) == len(set(keys))
    regions = {r[0] for r in rows}
    metrics = {r[2] for r in rows}
    assert {r[1] for r in rows} == {"interp", "cnn"}
    assert len(rows) == len(regions) * 2 * len(metrics)
    for model in ("interp", "cnn"):
        for kind in ("mean", "std", "top5"):
            vals = read_pgm(tmp_path / "rep" / "maps" / f"{model}_{kind}.pgm")
            assert vals.shape == (32, 64)


def test_evaluate_misaligned_exit_2(dataset, tmp_path):
    save_grid_stack(precip_stack(np.zeros((3, 32, 64))), tmp_path / "short")
    assert run("evaluate", "--truth", dataset / "fine", f"x={tmp_path / 'short'}", "--out", tmp_path / "r") == 2


def test_evaluate_bad_candidate_syntax_exit_2(dataset, tmp_path):
    assert run("evaluate", "--truth", dataset / "fine", "nodir", "--out", tmp_path / "r") == 2


# ---------------------------------------------------------------- track


def blobs():
    p = np.zeros((4, 24, 24))
    p[0:2, 2:4, 2:4] = 20.0
    p[1:3, 12:15, 12:15] = 30.0
    p[3, 19:22, 3:5] = 15.0
    return p


def events_rows(path):
    return (path / "events.csv").read_text().splitlines()[1:]


def test_track_all_zero(tmp_path, capsys):
    save_grid_stack(precip_stack(np.zeros((5, 12, 12))), tmp_path / "z")
    assert run("track", "--data", tmp_path / "z", "--out", tmp_path / "e") == 0
    assert events_rows(tmp_path / "e") == []
    assert "0 events" in capsys.readouterr().out


def test_track_three_blobs(tmp_path):
    save_grid_stack(precip_stack(blobs()), tmp_path / "b")
    assert run("track", "--data", tmp_path / "b", "--out", tmp_path / "e") == 0
    assert len(events_rows(tmp_path / "e")) == 3


def test_track_threshold_above_max(tmp_path):
    save_grid_stack(precip_stack(blobs()), tmp_path / "b")
    assert run("track", "--data", tmp_path / "b", "--threshold", 31, "--out", tmp_path / "e") == 0
    assert events_rows(tmp_path / "e") == []


def test_track_missing_data_exit_3(tmp_path):
    assert run("track", "--data", tmp_path / "none", "--out", tmp_path / "e") == 3


def test_track_malformed_manifest_exit_3(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "manifest.txt").write_text("this is not a manifest\n")
    assert run("track", "--data", d, "--out", tmp_path / "e") in (2, 3)


# ---------------------------------------------------------------- plumbing


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_lists_flags_with_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        run(command, "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--verbose"):
        assert flag in text
    assert "(default:" in text


def test_help_defaults_match_training_protocol(capsys):
    with pytest.raises(SystemExit):
        run("train", "--help")
    text = " ".join(capsys.readouterr().out.split())
    for fragment in ("(default: 8000)", "(default: 32)", "(default: 0.01)", "(default: 3)", "(default: 0.0002)"):
        assert fragment in text


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[common]\nseed = 9\n\n[synth]\npreset = tiny\nsteps = 12\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 0
    assert len(load_grid_stack(tmp_path / "a" / "fine")) == 12
    assert run("synth", "--config", cfg, "--steps", 8, "--out", tmp_path / "b") == 0
    assert len(load_grid_stack(tmp_path / "b" / "fine")) == 8


def test_config_unknown_key_exit_2(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[synth]\nseed = 1\nbogus = 3\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 2


def test_config_missing_file_exit_3(tmp_path):
    assert run("synth", "--config", tmp_path / "none.ini", "--seed", 0, "--out", tmp_path / "a") == 3


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RAINSCALE_THREADS", "1")
    assert run("synth", "--preset", "tiny", "--steps", 4, "--seed", 0, "--out", tmp_path / "a") == 0
    monkeypatch.setenv("RAINSCALE_THREADS", "zero")
    assert run("synth", "--preset", "tiny", "--steps", 4, "--seed", 0, "--out", tmp_path / "b") == 2


def test_same_data_same_events(tmp_path):
    coarse, fine = synth_dataset(preset("tiny", n_steps=24, seed=8))
    save_grid_stack(fine, tmp_path / "f")
    for name in ("a", "b"):
        assert run("track", "--data", tmp_path / "f", "--threshold", 5, "--out", tmp_path / name) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
