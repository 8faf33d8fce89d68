import json
import struct

import numpy as np
import pytest

from s2mformer.cli import main
from s2mformer.cli.archive import ArchiveError, FeatureArchive, build_features, read_archive
from s2mformer.cli.config import RunConfig
from s2mformer.cli.eegb import EegbError, from_bytes, read_dataset, read_eegb, to_bytes, write_eegb
from s2mformer.cli.synth import HIGHPASS_HZ, SynthConfig, synth_dataset, synth_subject
from s2mformer.energy import EnergyReport
from s2mformer.features import EegRecording, Trial

SMALL = dict(subjects=2, trials=4, seconds=6.0)
# half-second windows keep the model small: T = 64 samples, 8 x 8 maps
TINY_SETS = ["window_seconds=0.5", "window=64", "map_size=8", "epochs=1", "batch_size=16",
             "precision=float32"]


def _rec():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 50)).astype(np.float32)
    return EegRecording(x, 128.0, [Trial(0, 20, 1), Trial(25, 25, 0)], subject=4)


def test_eegb_round_trip(tmp_path):
    rec = _rec()
    write_eegb(tmp_path / "a.eegb", rec)
    back = read_eegb(tmp_path / "a.eegb", subject=4)
    assert np.array_equal(back.samples, rec.samples) and back.samples.dtype == np.float32
    assert back.sample_rate == rec.sample_rate
    assert [(t.start, t.length, t.label) for t in back.trials] == [(0, 20, 1), (25, 25, 0)]
    assert to_bytes(back) == to_bytes(rec)


def test_eegb_header_layout():
    data = to_bytes(_rec())
    assert data[:4] == b"EEGB"
    version, channels, fs, n_samples, n_trials = struct.unpack("<HHfQI", data[4:24])
    assert (version, channels, fs, n_samples, n_trials) == (1, 3, 128.0, 50, 2)
    assert len(data) == 24 + 2 * 17 + 4 * 3 * 50


@pytest.mark.parametrize("mutate,field", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<H", 9) + d[6:], "version"),
    (lambda d: d[:6] + struct.pack("<H", 0) + d[8:], "channels"),
    (lambda d: d[:-4], "n_samples"),
    (lambda d: d[:10], "header"),
    (lambda d: d[:24] + d[24:40] + b"\x07" + d[41:], "label"),
])
def test_eegb_corruption_names_field(mutate, field):
    with pytest.raises(EegbError, match=field):
        from_bytes(mutate(to_bytes(_rec())))


def test_synth_deterministic_and_balanced():
    cfg = SynthConfig(**SMALL)
    a, b = synth_dataset(cfg), synth_dataset(cfg)
    assert [to_bytes(r) for r in a] == [to_bytes(r) for r in b]
    for r in a:
        assert r.channels == 64
        assert sorted(t.label for t in r.trials) == [0, 0, 1, 1]
    other = synth_subject(SynthConfig(**SMALL, seed=201), 0)
    assert to_bytes(other) != to_bytes(a[0])


def test_synth_difficulty_zero_has_no_class_source():
    zero = synth_subject(SynthConfig(**SMALL, difficulty=0.0), 0)
    one = synth_subject(SynthConfig(**SMALL, difficulty=1.0), 0)
    # class sources add variance at the source electrodes
    assert one.samples.var() > zero.samples.var()


def test_synth_background_has_no_slow_drift():
    # slow components spanning whole trials would let within-trial splits identify trials
    rec = synth_subject(SynthConfig(**SMALL, difficulty=0.0), 0)
    x = rec.samples.astype(np.float64)
    f = np.fft.rfftfreq(x.shape[1], 1.0 / rec.sample_rate)
    power = np.abs(np.fft.rfft(x, axis=1)) ** 2
    assert power[:, f < HIGHPASS_HZ].sum() < 1e-6 * power.sum()
    assert np.allclose(x.mean(axis=1), 0, atol=1e-5)


def test_config_parse_and_reject_unknown(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ndim = 8\nlearning_rate = 5e-4  # inline\nsplit_mode = cross_trial\n")
    cfg = RunConfig.load(p, [("epochs", "3")])
    assert cfg.model.dim == 8 and cfg.train.learning_rate == 5e-4 and cfg.train.epochs == 3
    assert cfg.data.split_mode == "cross_trial"
    assert cfg.train.weight_decay == 1e-2 and cfg.train.patience == 25
    assert RunConfig.parse(cfg.to_text()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.parse("bogus = 1\n")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "eeg"), "--subjects", "2", "--trials", "4", "--seconds", "6"]) == 0
    return root


def _sets(root, *extra):
    args = []
    for kv in [f"data_dir={root / 'eeg'}", f"features={root / 'f.s2fa'}", f"out_dir={root / 'run'}",
               *TINY_SETS, *extra]:
        args += ["--set", kv]
    return args


def test_features_archive_contents(workspace):
    assert main(["features", *_sets(workspace)]) == 0
    arch = read_archive(workspace / "f.s2fa")
    assert arch.e_s.shape[1:] == (64, 64) and arch.e_f.shape[1:] == (5, 8, 8)
    # every window was transformed with filters fitted on its own subject's train split
    for k in range(len(arch)):
        f = arch.filters[arch.filter_ids[k]]
        assert f.fitted_on == "train" and f.scope == f"subject={arch.keys[k, 0]}"
    assert set(np.unique(arch.splits)) == {0, 1, 2}
    first = (workspace / "f.s2fa").read_bytes()
    assert main(["features", *_sets(workspace)]) == 0
    assert (workspace / "f.s2fa").read_bytes() == first
    assert FeatureArchive.from_bytes(first).to_bytes() == first
    with pytest.raises(ArchiveError):
        FeatureArchive.from_bytes(first[:-1])


def test_csp_fit_uses_train_windows_only(workspace):
    recs = read_dataset(workspace / "eeg")
    arch = build_features(recs, "within_trial", 0.5, 0.5, map_size=8)
    train_keys = {tuple(k) for k, s in zip(arch.keys, arch.splits) if s == 0}
    # refit on exactly the train windows reproduces the stored filters
    from s2mformer.features import fit_csp, segment_windows
    for r in recs:
        ws = [w for w in segment_windows(r, 0.5, 0.5) if (r.subject, w.trial, w.index) in train_keys]
        for w in ws:
            w.split = "train"
        f = fit_csp(ws, scope=f"subject={r.subject}")
        stored = next(x for x in arch.filters if x.scope == f.scope)
        assert np.array_equal(f.projection, stored.projection)


def test_train_eval_profile(workspace):
    assert main(["train", *_sets(workspace)]) == 0
    run = workspace / "run"
    lines = [json.loads(l) for l in (run / "history.jsonl").read_text().splitlines()]
    assert lines[0]["record"] == "epoch" and lines[-1]["record"] == "summary"
    assert (run / "checkpoint.s2mf").exists() and (run / "run.cfg").exists()

    assert main(["eval", *_sets(workspace), "--split", "val"]) == 0
    rec = json.loads((run / "eval_val.jsonl").read_text())
    assert 0 <= rec["accuracy"] <= 1 and set(rec["per_subject"]) == {"0", "1"}

    assert main(["profile", *_sets(workspace)]) == 0
    first = (run / "energy.txt").read_text()
    assert main(["profile", *_sets(workspace)]) == 0
    assert (run / "energy.txt").read_text() == first
    report = EnergyReport.from_text(first.split("\n", 1)[1])
    assert report.energy_mj > 0


def test_eval_rejects_config_mismatch(workspace):
    from s2mformer.network import CheckpointError
    if not (workspace / "run" / "checkpoint.s2mf").exists():
        main(["train", *_sets(workspace)])
    with pytest.raises(CheckpointError):
        main(["eval", *_sets(workspace, "dim=4")])


def test_untrained_eval_near_chance(workspace):
    assert main(["eval", *_sets(workspace), "--untrained"]) == 0
    rec = json.loads((workspace / "run" / "eval_test.jsonl").read_text())
    # balanced labels; a small test split, so allow generous binomial slack
    assert 0.2 <= rec["window_accuracy"] <= 0.8


def test_profile_default_params(tmp_path, capsys):
    assert main(["profile", "--set", f"out_dir={tmp_path}", "--set", "profile_batch=1"]) == 0
    params = int((tmp_path / "energy.txt").read_text().split("\n", 1)[0].split()[1])
    assert 50_000 <= params <= 70_000


def test_seed_flag_changes_synth(tmp_path):
    main(["--seed", "7", "synth", "--out", str(tmp_path / "a"), "--subjects", "1", "--trials", "2", "--seconds", "3"])
    main(["synth", "--out", str(tmp_path / "b"), "--subjects", "1", "--trials", "2", "--seconds", "3"])
    main(["--seed", "200", "synth", "--out", str(tmp_path / "c"), "--subjects", "1", "--trials", "2", "--seconds", "3"])
    a, b, c = ((tmp_path / d / "subject00.eegb").read_bytes() for d in "abc")
    assert a != b and b == c
