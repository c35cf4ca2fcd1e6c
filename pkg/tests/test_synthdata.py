import numpy as np
import pytest

from seqssl.synthdata import (CorpusConfig, Dataset, UnlabeledView, generate_corpus,
                              load_dataset, save_dataset, split_paper_protocol,
                              token_templates)


def small_cfg(**kw):
    base = dict(vocab_size=8, feature_dim=5, corpus_size=60, test_size=8,
                validation_size=4, sequence_length=(2, 4), seed=11)
    base.update(kw)
    return CorpusConfig(**base)


def test_same_seed_bit_identical():
    a = generate_corpus(small_cfg())
    b = generate_corpus(small_cfg())
    for ua, ub in zip(a.utterances, b.utterances):
        assert ua.utt_id == ub.utt_id
        np.testing.assert_array_equal(ua.features, ub.features)
        np.testing.assert_array_equal(ua.tokens, ub.tokens)


def test_noiseless_fixed_duration_features_are_template_concat():
    cfg = small_cfg(noise_sigma=0.0, frames_per_token=(2, 2))
    corpus = generate_corpus(cfg)
    templates = token_templates(cfg)
    u = corpus.utterances[0]
    content = u.tokens[:-1]
    expected = np.concatenate([np.repeat(templates[t][None, :], 2, axis=0) for t in content])
    np.testing.assert_array_equal(u.features, expected)


def test_tokens_end_with_terminator():
    cfg = small_cfg()
    for u in generate_corpus(cfg).utterances:
        assert u.tokens[-1] == cfg.eos_id
        assert (u.tokens[:-1] < cfg.content_symbols).all()


def test_split_sizes_and_disjointness():
    cfg = small_cfg(corpus_size=4120, test_size=80, validation_size=40)
    splits = split_paper_protocol(generate_corpus(cfg))
    assert len(splits["labeled"]) == 1000
    assert len(splits["unlabeled-tranche-1"]) == 1000
    assert len(splits["unlabeled-tranche-2"]) == 2000
    assert len(splits["test"]) == 80 and len(splits["validation"]) == 40
    ids = [u.utt_id for s in splits.values() for u in s.utterances]
    assert len(ids) == len(set(ids)) == 4120


def test_split_ratio_override():
    cfg = small_cfg(corpus_size=412, test_size=8, validation_size=4)
    splits = split_paper_protocol(generate_corpus(cfg), ratios=(0.5, 0.25, 0.25))
    assert len(splits["labeled"]) == 200
    assert len(splits["unlabeled-tranche-1"]) == 100


def test_split_seed_stable():
    cfg = small_cfg()
    a = split_paper_protocol(generate_corpus(cfg))
    b = split_paper_protocol(generate_corpus(cfg))
    for role in a:
        assert [u.utt_id for u in a[role].utterances] == [u.utt_id for u in b[role].utterances]


def test_split_requires_room_for_carveouts():
    cfg = small_cfg(corpus_size=10, test_size=8, validation_size=4)
    with pytest.raises(ValueError, match="too small"):
        split_paper_protocol(generate_corpus(cfg))


def test_unlabeled_view_hides_labels():
    corpus = generate_corpus(small_cfg())
    view = corpus.unlabeled_views()[0]
    assert isinstance(view, UnlabeledView)
    assert not hasattr(view, "tokens")
    # ground truth stays reachable for oracle scoring only
    assert corpus.labels_by_id()[view.utt_id] is corpus.utterances[0].tokens


def test_dataset_file_roundtrip_bit_exact(tmp_path):
    cfg = small_cfg()
    splits = split_paper_protocol(generate_corpus(cfg))
    path = tmp_path / "labeled.npz"
    save_dataset(splits["labeled"], path)
    loaded = load_dataset(path)
    assert loaded.role == "labeled"
    assert loaded.config == cfg
    assert len(loaded) == len(splits["labeled"])
    for a, b in zip(loaded.utterances, splits["labeled"].utterances):
        assert a.utt_id == b.utt_id
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.tokens, b.tokens)
