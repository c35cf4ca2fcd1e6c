import itertools
import math

import numpy as np
import pytest

from seqssl import model as mdl
from seqssl import tensor as tz
from seqssl.decode import (BeamConfig, Hypothesis, beam_search, coverage,
                           greedy_decode, hypothesis_score, write_decode_output)


def tiny3_params(seed=0):
    # vocab 3: one content symbol 0, start 1, end-of-sequence 2
    cfg = mdl.ModelConfig(feature_dim=4, frontend="linear", encoder_layers=1,
                          encoder_units=4, decimation_after=(), decoder_layers=1,
                          decoder_units=5, vocab_size=3, embedding_dim=3,
                          attention_dim=4, dropout_p=0.0)
    return mdl.init_params(cfg, seed=seed)


def test_coverage_threshold_strict():
    accum = np.array([0.9, 0.6, 0.2])
    assert coverage(accum, tau=0.5) == 2
    assert coverage(accum, tau=0.9) == 0   # strictly greater than tau


def test_score_hand_computed():
    h = Hypothesis(tokens=(0, 1, 2), log_prob=-1.5,
                   attention_accum=np.array([0.9, 0.6, 0.2]),
                   token_probs=(0.5, 0.5, 0.9), state=None, finished=True)
    cfg = BeamConfig(beam_width=4, lambda_cov=0.2, lambda_wip=-0.1,
                     lambda_rlp=2.0, coverage_tau=0.5)
    expected = -1.5 + 0.2 * 2 + (-0.1) * 3 + ((5 + 3) / 6) ** 2.0
    assert abs(hypothesis_score(h, cfg) - expected) < 1e-12


def test_score_all_lambdas_zero_is_logprob_plus_one():
    cfg = BeamConfig(beam_width=1, lambda_cov=0.0, lambda_wip=0.0, lambda_rlp=0.0)
    for n in (1, 2, 7):
        h = Hypothesis(tokens=tuple([0] * n), log_prob=-2.25,
                       attention_accum=np.zeros(3), token_probs=tuple([0.1] * n),
                       state=None, finished=False)
        assert abs(hypothesis_score(h, cfg) - (-2.25 + 1.0)) < 1e-12


def test_score_rejects_empty_hypothesis():
    h = Hypothesis(tokens=(), log_prob=0.0, attention_accum=np.zeros(1),
                   token_probs=(), state=None, finished=False)
    with pytest.raises(ValueError, match="empty"):
        hypothesis_score(h, BeamConfig())


def test_wip_adds_constant_per_token():
    base = dict(log_prob=-1.0, attention_accum=np.zeros(2), state=None, finished=True)
    cfg0 = BeamConfig(lambda_cov=0.0, lambda_wip=0.0, lambda_rlp=0.0)
    cfg1 = BeamConfig(lambda_cov=0.0, lambda_wip=0.7, lambda_rlp=0.0)
    for n in (1, 3, 6):
        h = Hypothesis(tokens=tuple([0] * n), token_probs=tuple([0.1] * n), **base)
        assert abs((hypothesis_score(h, cfg1) - hypothesis_score(h, cfg0)) - 0.7 * n) < 1e-12


def test_tie_break_prefers_lexicographically_smaller():
    cfg = BeamConfig(lambda_cov=0.0, lambda_wip=0.0, lambda_rlp=0.0)
    mk = lambda toks: Hypothesis(tokens=toks, log_prob=-1.0,
                                 attention_accum=np.zeros(1),
                                 token_probs=tuple([0.1] * len(toks)),
                                 state=None, finished=True)
    pool = [mk((1, 0, 2)), mk((0, 2, 2)), mk((0, 1, 2))]
    pool.sort(key=lambda h: (-hypothesis_score(h, cfg), h.tokens))
    assert [h.tokens for h in pool] == [(0, 1, 2), (0, 2, 2), (1, 0, 2)]


def _oracle_finished(params, features, cfg):
    """Enumerate every sequence of non-terminal tokens up to the length cap,
    terminated by the end symbol, scoring each by a stepwise decoder pass."""
    mcfg = params.cfg
    with tz.no_grad():
        enc = mdl.encode(params, features)
        n_states = enc.states.shape[0]
        cap = max(1, int(math.ceil(cfg.max_len_factor * n_states)))
        hyps = []
        nonterm = [t for t in range(mcfg.vocab_size) if t != mcfg.eos_id]
        for k in range(cap):
            for prefix in itertools.product(nonterm, repeat=k):
                tokens = prefix + (mcfg.eos_id,)
                state = mdl.initial_state(params)
                prev = mcfg.start_id
                logp, accum, probs = 0.0, np.zeros(n_states), []
                for tok in tokens:
                    post, alpha, state = mdl.decoder_step(params, state, prev, enc)
                    p = float(post.data.reshape(-1)[tok])
                    logp += math.log(p)
                    probs.append(p)
                    accum = accum + alpha.data.reshape(-1)
                    prev = tok
                hyps.append(Hypothesis(tokens=tokens, log_prob=logp,
                                       attention_accum=accum,
                                       token_probs=tuple(probs),
                                       state=None, finished=True))
        hyps.sort(key=lambda h: (-hypothesis_score(h, cfg), h.tokens))
        return hyps


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unpruned_beam_matches_exhaustive_enumeration(seed):
    params = tiny3_params(seed)
    x = np.random.default_rng(seed + 100).normal(size=(1, 4))
    cfg = BeamConfig(beam_width=40, lambda_cov=0.2, lambda_wip=0.1,
                     lambda_rlp=1.0, coverage_tau=0.5, max_len_factor=4.0)
    oracle = _oracle_finished(params, x, cfg)
    got = beam_search(params, x, cfg)
    assert len(oracle) == 15  # 1 + 2 + 4 + 8 prefixes over two non-terminal symbols
    assert [h.tokens for h in got] == [h.tokens for h in oracle]
    for a, b in zip(got, oracle):
        assert abs(a.log_prob - b.log_prob) < 1e-10
        np.testing.assert_allclose(a.attention_accum, b.attention_accum, atol=1e-12)
        assert abs(hypothesis_score(a, cfg) - hypothesis_score(b, cfg)) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_pruned_beam_never_beats_exhaustive(seed):
    params = tiny3_params(seed)
    x = np.random.default_rng(seed + 200).normal(size=(2, 4))
    base = dict(lambda_cov=0.2, lambda_wip=0.0, lambda_rlp=1.0, max_len_factor=2.0)
    exhaustive = beam_search(params, x, BeamConfig(beam_width=200, **base))
    best = hypothesis_score(exhaustive[0], BeamConfig(beam_width=200, **base))
    for w in (1, 2, 4, 8):
        cfg = BeamConfig(beam_width=w, **base)
        got = beam_search(params, x, cfg)
        if got:
            assert hypothesis_score(got[0], cfg) <= best + 1e-10


@pytest.mark.parametrize("seed", range(6))
def test_greedy_matches_width_one_beam(seed):
    params = tiny3_params(seed)
    x = np.random.default_rng(seed + 300).normal(size=(3, 4))
    tokens, reached = greedy_decode(params, x, max_len_factor=3.0)
    cfg = BeamConfig(beam_width=1, lambda_cov=0.0, lambda_wip=0.0,
                     lambda_rlp=0.0, max_len_factor=3.0)
    hyps = beam_search(params, x, cfg)
    if reached:
        assert tokens[-1] == params.cfg.eos_id
        assert hyps and hyps[0].tokens == tuple(tokens)
    else:
        assert hyps == []


def test_results_sorted_and_finished():
    params = tiny3_params(4)
    x = np.random.default_rng(5).normal(size=(2, 4))
    cfg = BeamConfig(beam_width=8, max_len_factor=3.0)
    hyps = beam_search(params, x, cfg)
    scores = [hypothesis_score(h, cfg) for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        assert h.finished and h.tokens[-1] == params.cfg.eos_id
        assert h.state is None
        assert len(h.token_probs) == len(h.tokens)


def test_write_decode_output_format(tmp_path):
    params = tiny3_params(6)
    x = np.random.default_rng(6).normal(size=(2, 4))
    cfg = BeamConfig(beam_width=4)
    hyps = beam_search(params, x, cfg)
    path = tmp_path / "decode.tsv"
    write_decode_output(path, "utt000001", hyps, cfg)
    lines = path.read_text().splitlines()
    assert len(lines) == len(hyps)
    first = lines[0].split("\t")
    assert first[0] == "utt000001" and first[1] == "0"
    assert abs(float(first[2]) - hypothesis_score(hyps[0], cfg)) < 1e-6
    assert [int(t) for t in first[4].split()] == list(hyps[0].tokens)
