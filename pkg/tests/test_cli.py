import json
import os

import pytest

from seqssl import cli
from seqssl.augment import AugmentPolicy
from seqssl.synthdata import load_dataset

SMALL = [
    "--override", "corpus.vocab_size=6",
    "--override", "corpus.feature_dim=4",
    "--override", "corpus.corpus_size=40",
    "--override", "corpus.test_size=6",
    "--override", "corpus.validation_size=4",
    "--override", "corpus.sequence_length=2,3",
    "--override", "model.encoder_units=4",
    "--override", "model.decoder_units=5",
    "--override", "model.embedding_dim=3",
    "--override", "model.attention_dim=4",
    "--override", "train.max_epochs=1",
    "--override", "train.batch_size_labeled=4",
    "--override", "beam.beam_width=2",
]


def make_data(tmp_path, name="data"):
    out = str(tmp_path / name)
    assert cli.main(["make-data", "--output", out] + SMALL) == 0
    return out


def test_make_data_writes_all_files_and_is_reproducible(tmp_path):
    import numpy as np

    a = make_data(tmp_path, "a")
    b = make_data(tmp_path, "b")
    strip = lambda p: [l for l in open(os.path.join(p, "config.txt")).read().splitlines()
                       if not l.startswith("output_dir")]
    assert strip(a) == strip(b)
    for fn in cli.DATASET_FILES.values():
        da = load_dataset(os.path.join(a, fn))
        db = load_dataset(os.path.join(b, fn))
        assert len(da) == len(db)
        for ua, ub in zip(da.utterances, db.utterances):
            assert ua.utt_id == ub.utt_id
            np.testing.assert_array_equal(ua.features, ub.features)
            np.testing.assert_array_equal(ua.tokens, ub.tokens)
    assert len(load_dataset(os.path.join(a, "labeled.npz"))) == 8  # 25 % of the 30 left


def test_make_data_ratio_override(tmp_path):
    out = str(tmp_path / "r")
    assert cli.main(["make-data", "--output", out, "--override", "split.ratios=0.5,0.25,0.25"]
                    + SMALL) == 0
    assert len(load_dataset(os.path.join(out, "labeled.npz"))) == 15
    assert len(load_dataset(os.path.join(out, "unlabeled2.npz"))) == 7  # takes the remainder


def test_config_text_round_trip():
    cfg = cli.load_config(None, ["train.learning_rate=0.01",
                                 "train.labeled_augment=strong",
                                 "corpus.feature_dim=8",
                                 "beam.lambda_cov=0.3"], seed=7, output="x")
    text = cli.config_to_text(cfg)
    cfg2 = cli.load_config(None, text.splitlines(), None, None)
    assert cli.config_to_text(cfg2) == text
    assert cfg.train.learning_rate == 0.01
    assert cfg.beam.lambda_cov == 0.3
    assert cfg.seed == 7
    # preset scaled to the overridden feature width
    assert cfg.train.labeled_augment == AugmentPolicy(f_max=7, t_max=10, m_f=1, m_t=2)
    # finalize keeps model in sync with the corpus
    assert cfg.model.feature_dim == 8 and cfg.model.vocab_size == cfg.corpus.vocab_size


def test_config_rejects_unknown_keys():
    with pytest.raises(cli.CliError, match="unknown config key"):
        cli.load_config(None, ["train.momentum=0.9"], None, None)
    with pytest.raises(cli.CliError, match="section"):
        cli.load_config(None, ["optimizer.lr=0.1"], None, None)
    with pytest.raises(cli.CliError, match="key = value"):
        cli.load_config(None, ["just some words"], None, None)


def test_train_then_evaluate(tmp_path, capsys):
    data = make_data(tmp_path)
    run = str(tmp_path / "run")
    assert cli.main(["train", "--data", data, "--mode", "supervised",
                     "--output", run, "--seed", "0"] + SMALL) == 0
    for fn in ("checkpoint.npz", "result.json", "metrics.jsonl", "config.txt"):
        assert os.path.exists(os.path.join(run, fn))
    result = json.load(open(os.path.join(run, "result.json")))
    assert result["steps"] >= 1 and len(result["validation_wer_history"]) == 1

    ev = str(tmp_path / "eval")
    assert cli.main(["evaluate", "--checkpoint", os.path.join(run, "checkpoint.npz"),
                     "--data", os.path.join(data, "test.npz"), "--output", ev] + SMALL) == 0
    report = json.load(open(os.path.join(ev, "eval_report.json")))
    assert report["wer"] >= 0.0
    assert {"substitutions", "deletions", "insertions", "reference_length"} <= set(report)
    assert "WER" in capsys.readouterr().out


def test_evaluate_relative_metrics(tmp_path):
    data = make_data(tmp_path)
    run = str(tmp_path / "run")
    assert cli.main(["train", "--data", data, "--output", run] + SMALL) == 0
    base = tmp_path / "baseline.json"
    oracle = tmp_path / "oracle.json"
    base.write_text(json.dumps({"wer": 80.0}))
    oracle.write_text(json.dumps({"wer": 1.0}))
    ev = str(tmp_path / "eval2")
    code = cli.main(["evaluate", "--checkpoint", os.path.join(run, "checkpoint.npz"),
                     "--data", os.path.join(data, "test.npz"), "--output", ev,
                     "--baseline-report", str(base), "--oracle-report", str(oracle)] + SMALL)
    report = json.load(open(os.path.join(ev, "eval_report.json")))
    if code == 0:
        assert "werr" in report and "wrr" in report
        assert abs(report["werr"] - 100 * (80.0 - report["wer"]) / 80.0) < 1e-9


def test_generate_pt_then_ssl_train(tmp_path):
    data = make_data(tmp_path)
    run = str(tmp_path / "run")
    assert cli.main(["train", "--data", data, "--output", run] + SMALL) == 0
    pt = str(tmp_path / "pt")
    assert cli.main(["generate-pt", "--checkpoint", os.path.join(run, "checkpoint.npz"),
                     "--data", data, "--output", pt, "--beam-width", "2"] + SMALL) == 0
    report = json.load(open(os.path.join(pt, "pt_report.json")))
    assert report["kept"] + report["rejected_loop"] + report["rejected_decode"] \
        == len(load_dataset(os.path.join(data, "unlabeled1.npz")))
    if report["kept"]:
        run2 = str(tmp_path / "run2")
        assert cli.main(["train", "--data", data, "--mode", "pt-fixed", "--output", run2,
                         "--pt-store", os.path.join(pt, "pt_store.tsv")] + SMALL) == 0
        assert os.path.exists(os.path.join(run2, "checkpoint.npz"))


def test_ssl_mode_without_pt_store_fails_with_remedy(tmp_path, capsys):
    data = make_data(tmp_path)
    run = str(tmp_path / "bad")
    code = cli.main(["train", "--data", data, "--mode", "fixmatch", "--output", run] + SMALL)
    assert code == 2
    err = capsys.readouterr().err
    assert "generate-pt" in err and "--pt-store" in err


def test_missing_dataset_fails_and_quarantines(tmp_path, capsys):
    run = str(tmp_path / "nodata")
    code = cli.main(["train", "--data", str(tmp_path / "absent"), "--output", run] + SMALL)
    assert code == 2
    err = capsys.readouterr().err
    assert "make-data" in err
    assert not os.path.isdir(run)
    assert os.path.isdir(run + ".quarantine")


def test_unknown_recipe_rejected(tmp_path, capsys):
    data = make_data(tmp_path)
    with pytest.raises(SystemExit):
        cli.main(["train", "--data", data, "--recipe", "mystery", "--output",
                  str(tmp_path / "x")] + SMALL)


def test_recipe_checkpoint_init_required(tmp_path, capsys):
    data = make_data(tmp_path)
    run = str(tmp_path / "run")
    assert cli.main(["train", "--data", data, "--output", run] + SMALL) == 0
    pt = str(tmp_path / "pt")
    assert cli.main(["generate-pt", "--checkpoint", os.path.join(run, "checkpoint.npz"),
                     "--data", data, "--output", pt, "--beam-width", "2"] + SMALL) == 0
    code = cli.main(["train", "--data", data, "--recipe", "iterative-w4",
                     "--pt-store", os.path.join(pt, "pt_store.tsv"),
                     "--output", str(tmp_path / "it")] + SMALL)
    assert code == 2
    assert "--init-checkpoint" in capsys.readouterr().err
