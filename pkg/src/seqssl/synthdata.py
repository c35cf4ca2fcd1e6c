"""Deterministic synthetic corpus: a learnable feature-to-token task.

Each content token owns a fixed random feature template; an utterance is the
concatenation of its tokens' templates, each repeated for a random duration,
plus i.i.d. Gaussian noise.  Token sequences come from an order-1 Markov
chain so the decoder has an implicit language model to learn.  The split
mirrors the 25 / 25 / 50 labeled / unlabeled-1 / unlabeled-2 protocol with
test and validation carve-outs drawn first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DATASET_FORMAT_VERSION = 1

ROLES = ("labeled", "unlabeled-tranche-1", "unlabeled-tranche-2", "validation", "test")


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 26              # content symbols + start + end
    feature_dim: int = 16
    frames_per_token: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.1
    sequence_length: tuple[int, int] = (3, 12)
    markov_order: int = 1
    corpus_size: int = 2000
    test_size: int = 200
    validation_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be >= 3")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.markov_order != 1:
            raise ValueError("only order-1 token chains are supported")

    @property
    def content_symbols(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "feature_dim": self.feature_dim,
                "frames_per_token": list(self.frames_per_token),
                "noise_sigma": self.noise_sigma,
                "sequence_length": list(self.sequence_length),
                "markov_order": self.markov_order, "corpus_size": self.corpus_size,
                "test_size": self.test_size, "validation_size": self.validation_size,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        d["frames_per_token"] = tuple(d["frames_per_token"])
        d["sequence_length"] = tuple(d["sequence_length"])
        return cls(**d)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray        # (T, F)
    tokens: np.ndarray          # content ids ending with the end-of-sequence id


@dataclass
class UnlabeledView:
    """What training code is allowed to see of an unlabeled utterance."""
    utt_id: str
    features: np.ndarray


@dataclass
class Dataset:
    utterances: list[Utterance]
    role: str | None = None
    config: CorpusConfig | None = None

    def __len__(self):
        return len(self.utterances)

    def unlabeled_views(self) -> list[UnlabeledView]:
        return [UnlabeledView(u.utt_id, u.features) for u in self.utterances]

    def labels_by_id(self) -> dict[str, np.ndarray]:
        """Ground truth, for oracle evaluation only."""
        return {u.utt_id: u.tokens for u in self.utterances}


def token_templates(cfg: CorpusConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(-1.0, 1.0, size=(cfg.content_symbols, cfg.feature_dim))


def generate_corpus(cfg: CorpusConfig) -> Dataset:
    """Generate the full corpus deterministically from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    templates = rng.uniform(-1.0, 1.0, size=(cfg.content_symbols, cfg.feature_dim))
    trans_logits = rng.normal(size=(cfg.content_symbols, cfg.content_symbols))
    trans = np.exp(trans_logits * 1.5)
    trans /= trans.sum(axis=1, keepdims=True)
    utts = []
    lo_len, hi_len = cfg.sequence_length
    lo_d, hi_d = cfg.frames_per_token
    for n in range(cfg.corpus_size):
        length = int(rng.integers(lo_len, hi_len + 1))
        toks = [int(rng.integers(cfg.content_symbols))]
        for _ in range(length - 1):
            toks.append(int(rng.choice(cfg.content_symbols, p=trans[toks[-1]])))
        rows = []
        for t in toks:
            dur = int(rng.integers(lo_d, hi_d + 1))
            rows.append(np.repeat(templates[t][None, :], dur, axis=0))
        feats = np.concatenate(rows, axis=0)
        if cfg.noise_sigma > 0:
            feats = feats + rng.normal(0.0, cfg.noise_sigma, size=feats.shape)
        utts.append(Utterance(utt_id=f"utt{n:06d}", features=feats,
                              tokens=np.array(toks + [cfg.eos_id], dtype=np.int64)))
    return Dataset(utts, role=None, config=cfg)


def split_paper_protocol(corpus: Dataset,
                         ratios: tuple[float, float, float] = (0.25, 0.25, 0.5),
                         seed: int | None = None) -> dict[str, Dataset]:
    """Disjoint, exhaustive split: fixed test and validation carve-outs first,
    then the labeled / unlabeled-1 / unlabeled-2 ratios on the remainder."""
    cfg = corpus.config
    if cfg is None:
        raise ValueError("split requires the corpus config for carve-out sizes")
    n = len(corpus)
    carve = cfg.test_size + cfg.validation_size
    if n <= carve:
        raise ValueError(f"corpus of {n} too small for carve-outs of {carve}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} must sum to 1")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    order = rng.permutation(n)
    test_idx = order[:cfg.test_size]
    val_idx = order[cfg.test_size:carve]
    rest = order[carve:]
    n_rest = len(rest)
    n_lab = int(round(ratios[0] * n_rest))
    n_u1 = int(round(ratios[1] * n_rest))
    parts = {
        "test": test_idx,
        "validation": val_idx,
        "labeled": rest[:n_lab],
        "unlabeled-tranche-1": rest[n_lab:n_lab + n_u1],
        "unlabeled-tranche-2": rest[n_lab + n_u1:],
    }
    return {role: Dataset([corpus.utterances[i] for i in sorted(idx)], role=role, config=cfg)
            for role, idx in parts.items()}


# ---------------------------------------------------------------------------
# dataset files (bit-exact round trip)


def save_dataset(ds: Dataset, path) -> None:
    if ds.config is None:
        raise ValueError("dataset has no config to echo into the file header")
    header = json.dumps({"format_version": DATASET_FORMAT_VERSION,
                         "config": ds.config.to_dict(), "role": ds.role})
    feats = (np.concatenate([u.features for u in ds.utterances], axis=0)
             if ds.utterances else np.zeros((0, ds.config.feature_dim)))
    toks = (np.concatenate([u.tokens for u in ds.utterances])
            if ds.utterances else np.zeros((0,), dtype=np.int64))
    np.savez(path,
             __header__=np.frombuffer(header.encode(), dtype=np.uint8),
             ids=np.array([u.utt_id for u in ds.utterances]),
             frame_counts=np.array([len(u.features) for u in ds.utterances], dtype=np.int64),
             token_counts=np.array([len(u.tokens) for u in ds.utterances], dtype=np.int64),
             features=feats, tokens=toks)


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format: {header.get('format_version')}")
        cfg = CorpusConfig.from_dict(header["config"])
        ids = [str(s) for s in z["ids"]]
        fc, tc = z["frame_counts"], z["token_counts"]
        feats, toks = z["features"], z["tokens"]
    utts = []
    fo = to = 0
    for i, utt_id in enumerate(ids):
        utts.append(Utterance(utt_id, feats[fo:fo + fc[i]].copy(), toks[to:to + tc[i]].copy()))
        fo += fc[i]
        to += tc[i]
    return Dataset(utts, role=header.get("role"), config=cfg)
