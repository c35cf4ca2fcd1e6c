import itertools
from functools import lru_cache

import numpy as np
import pytest

from seqssl.metrics import ScoreReport, corpus_report, edit_distance_align, werr, wrr


def test_identity_alignment():
    r = edit_distance_align([1, 2, 3], [1, 2, 3])
    assert r.errors == 0 and r.wer == 0.0


def test_single_substitution():
    r = edit_distance_align([1, 2, 3], [1, 9, 3])
    assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 0)
    assert abs(r.wer - 100 / 3) < 0.01


def test_all_deleted():
    r = edit_distance_align([1], [])
    assert (r.substitutions, r.deletions, r.insertions) == (0, 1, 0)
    assert r.wer == 100.0


def test_empty_reference_rejected():
    with pytest.raises(ValueError, match="empty reference"):
        edit_distance_align([], [1])


def test_tie_prefers_substitution_over_del_ins():
    # ref a, hyp b: cost 1 either as S or as D+I; must report a substitution
    r = edit_distance_align([1], [2])
    assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 0)


@lru_cache(maxsize=None)
def _oracle_distance(ref: tuple, hyp: tuple) -> int:
    """Independent top-down minimal-alignment search."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(_oracle_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
               _oracle_distance(ref[1:], hyp) + 1,
               _oracle_distance(ref, hyp[1:]) + 1)


def test_exhaustive_oracle_sampled_pairs():
    # dense random sample of the <=6-length 3-symbol space; the full sweep
    # lives in the acceptance suite
    rng = np.random.default_rng(0)
    for _ in range(2000):
        ref = tuple(rng.integers(0, 3, size=rng.integers(1, 7)))
        hyp = tuple(rng.integers(0, 3, size=rng.integers(0, 7)))
        r = edit_distance_align(ref, hyp)
        assert r.errors == _oracle_distance(ref, hyp)
        assert r.reference_length == len(ref)


def test_relabeling_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        ref = list(rng.integers(0, 4, size=rng.integers(1, 8)))
        hyp = list(rng.integers(0, 4, size=rng.integers(0, 8)))
        perm = rng.permutation(4)
        a = edit_distance_align(ref, hyp)
        b = edit_distance_align([perm[t] for t in ref], [perm[t] for t in hyp])
        assert a == b


def test_corpus_report_aggregates_counts_not_wers():
    # utterance WERs 100% and 0%; corpus WER weighted by reference length
    total = corpus_report([([1], [2]), ([3, 4, 5], [3, 4, 5])])
    assert total.errors == 1 and total.reference_length == 4
    assert total.wer == 25.0


def test_werr_reported_values():
    assert abs(werr(16.77, 15.22) - 9.2) < 0.05
    assert werr(16.77, 16.77) == 0.0
    assert abs(werr(15.97, 15.79) - 1.1) < 0.05


def test_werr_rejects_zero_baseline():
    with pytest.raises(ValueError):
        werr(0.0, 1.0)


def test_wrr_reported_values():
    assert abs(wrr(16.77, 15.60, 14.87) - 61.6) < 0.05
    assert abs(wrr(16.77, 15.02, 14.87) - 92.1) < 0.05
    assert wrr(16.77, 14.87, 14.87) == 100.0


def test_wrr_rejects_baseline_not_above_oracle():
    with pytest.raises(ValueError):
        wrr(10.0, 9.0, 10.0)


def test_wrr_affine_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        b, o = sorted(rng.uniform(5, 40, size=2), reverse=True)
        if b == o:
            continue
        s = rng.uniform(o, b)
        k = rng.uniform(0.1, 10)
        assert abs(wrr(b, s, o) - wrr(k * b, k * s, k * o)) < 1e-9


def test_score_report_format():
    r = ScoreReport(substitutions=1, deletions=2, insertions=3, reference_length=12)
    assert "WER 50.00 %" in r.format()
