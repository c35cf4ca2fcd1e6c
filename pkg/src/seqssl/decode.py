"""Target-synchronous beam search with histogram pruning.

Hypotheses are ranked by an extended score: token log-probability plus a
coverage bonus (encoder states whose accumulated attention exceeds a
threshold), a constant per-token insertion bonus/penalty, and a root length
term ((5+|y|)/6)^rlp.  Partial and finished hypotheses compete in the same
top-W pool each step; finished hypotheses are retained and returned ranked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import tensor as tz


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 8
    lambda_cov: float = 0.2
    lambda_wip: float = 0.0
    lambda_rlp: float = 1.0
    coverage_tau: float = 0.5
    max_len_factor: float = 3.0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.lambda_cov < 0:
            raise ValueError("lambda_cov must be >= 0")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]               # includes end-of-sequence when finished
    log_prob: float                       # sum of chosen-token log posteriors
    attention_accum: np.ndarray           # per-encoder-state cumulative attention
    token_probs: tuple[float, ...]        # posterior of each chosen token
    state: mdl.DecoderState | None
    finished: bool


def coverage(attention_accum: np.ndarray, tau: float) -> int:
    return int(np.count_nonzero(attention_accum > tau))


def hypothesis_score(h: Hypothesis, cfg: BeamConfig) -> float:
    """log p + lambda_cov * cov + lambda_wip * |y| + ((5+|y|)/6)^lambda_rlp."""
    n = len(h.tokens)
    if n == 0:
        raise ValueError("hypothesis_score: empty hypothesis")
    return (h.log_prob
            + cfg.lambda_cov * coverage(h.attention_accum, cfg.coverage_tau)
            + cfg.lambda_wip * n
            + ((5.0 + n) / 6.0) ** cfg.lambda_rlp)


def _rank_key(cfg: BeamConfig):
    # score descending, ties broken by lexicographically smaller token sequence
    return lambda h: (-hypothesis_score(h, cfg), h.tokens)


def beam_search(params: mdl.ModelParams, features: np.ndarray, cfg: BeamConfig,
                utt_id: str | None = None) -> list[Hypothesis]:
    """Decode one utterance; returns finished hypotheses sorted by score.

    Expands every active hypothesis by one token per synchronous step and
    keeps the top-W of the combined (expansions + finished) pool.  Terminates
    when no hypothesis is active or the length cap max_len_factor * E is hit.
    An empty result means no hypothesis reached end-of-sequence within the
    cap; callers treat that as a decode failure.
    """
    mcfg = params.cfg
    with tz.no_grad():
        enc = mdl.encode(params, features, dropout=False, utt_id=utt_id)
        n_states = enc.states.shape[0]
        cap = max(1, int(math.ceil(cfg.max_len_factor * n_states)))
        root = Hypothesis(tokens=(), log_prob=0.0,
                          attention_accum=np.zeros(n_states), token_probs=(),
                          state=mdl.initial_state(params), finished=False)
        active = [root]
        finished: list[Hypothesis] = []
        finished_ids: set[int] = set()
        for _ in range(cap):
            if not active:
                break
            pool = list(finished)
            for h in active:
                prev = h.tokens[-1] if h.tokens else mcfg.start_id
                post, alpha, state = mdl.decoder_step(params, h.state, prev, enc)
                p = post.data.reshape(-1)
                logp = np.log(np.maximum(p, 1e-300))
                accum = h.attention_accum + alpha.data.reshape(-1)
                for k in range(mcfg.vocab_size):
                    pool.append(Hypothesis(
                        tokens=h.tokens + (k,),
                        log_prob=h.log_prob + float(logp[k]),
                        attention_accum=accum,
                        token_probs=h.token_probs + (float(p[k]),),
                        state=state,
                        finished=(k == mcfg.eos_id)))
            pool.sort(key=_rank_key(cfg))
            survivors = pool[:cfg.beam_width]
            active = [h for h in survivors if not h.finished]
            for h in survivors:
                if h.finished and id(h) not in finished_ids:
                    h.state = None  # finished hypotheses no longer need decoder state
                    finished.append(h)
                    finished_ids.add(id(h))
        finished.sort(key=_rank_key(cfg))
        return finished


def greedy_decode(params: mdl.ModelParams, features: np.ndarray,
                  max_len_factor: float = 3.0, utt_id: str | None = None):
    """Stepwise argmax decode; returns (tokens, reached_eos).

    Equivalent to beam_search with W=1 and all lambdas zero, but cheaper;
    used for per-epoch validation scoring.
    """
    mcfg = params.cfg
    with tz.no_grad():
        enc = mdl.encode(params, features, dropout=False, utt_id=utt_id)
        cap = max(1, int(math.ceil(max_len_factor * enc.states.shape[0])))
        state = mdl.initial_state(params)
        prev = mcfg.start_id
        tokens: list[int] = []
        for _ in range(cap):
            post, _, state = mdl.decoder_step(params, state, prev, enc)
            prev = int(np.argmax(post.data))
            tokens.append(prev)
            if prev == mcfg.eos_id:
                return tokens, True
        return tokens, False


def write_decode_output(path, utt_id: str, hyps: list[Hypothesis], cfg: BeamConfig) -> None:
    """Append ranked hypotheses for one utterance to a decode output file."""
    with open(path, "a", encoding="utf-8") as f:
        for rank, h in enumerate(hyps):
            f.write("\t".join([
                utt_id, str(rank), f"{hypothesis_score(h, cfg):.6f}", f"{h.log_prob:.6f}",
                " ".join(str(t) for t in h.tokens),
                " ".join(f"{p:.6f}" for p in h.token_probs)]) + "\n")
