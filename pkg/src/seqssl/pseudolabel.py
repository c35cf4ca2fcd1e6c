"""Pseudo-label production: offline beam-search transcription with loop
filtering, on-the-fly labels from the current model (consistency training
with weak augmentation and dropout), frozen-teacher labels (hard or soft),
and per-batch regeneration for iterative self-training.

Every label path runs with gradients disabled: labels are detached values
and never contribute gradients to the trained parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import augment as aug
from . import decode as dec
from . import model as mdl
from . import tensor as tz

PT_SOURCES = ("offline-beam", "fixmatch", "teacher-hard", "teacher-soft", "iterative")


@dataclass
class PTRecord:
    utt_id: str
    tokens: np.ndarray           # pseudo transcription, ends with end-of-sequence
    confidences: np.ndarray      # per-token posterior of the chosen token, in [0, 1]
    source: str
    generator_model_id: str

    def __post_init__(self):
        if len(self.tokens) != len(self.confidences):
            raise ValueError(f"{self.utt_id}: {len(self.confidences)} confidences "
                             f"for {len(self.tokens)} tokens")
        if self.source not in PT_SOURCES:
            raise ValueError(f"unknown PT source {self.source!r}")


@dataclass
class LabelMatrix:
    """Per-position label simplices (|tokens| x vocab), hard or soft."""
    rows: np.ndarray
    hard: bool


@dataclass
class PTGenerationReport:
    kept: int = 0
    rejected_loop: int = 0
    rejected_decode: int = 0
    rejected_ids: list = None

    def __post_init__(self):
        if self.rejected_ids is None:
            self.rejected_ids = []


def loop_filter(tokens, n_max: int = 4, r_min: int = 3) -> bool:
    """True (keep) unless some n-gram, n <= n_max, repeats at least r_min
    times consecutively."""
    if n_max < 1 or r_min < 2:
        raise ValueError("loop_filter requires n_max >= 1 and r_min >= 2")
    toks = [int(t) for t in tokens]
    for n in range(1, n_max + 1):
        for start in range(len(toks) - n * r_min + 1):
            gram = toks[start:start + n]
            repeats = 1
            pos = start + n
            while toks[pos:pos + n] == gram:
                repeats += 1
                pos += n
            if repeats >= r_min:
                return False
    return True


def _rescore_confidences(params: mdl.ModelParams, features: np.ndarray, tokens) -> np.ndarray:
    """Per-token posteriors from a clean teacher-forced pass."""
    with tz.no_grad():
        post = mdl.forward_teacher_forced(params, features, tokens).data
    return post[np.arange(len(tokens)), np.asarray(tokens, dtype=np.intp)]


def generate_pt_offline(params: mdl.ModelParams, utterances, beam_cfg: dec.BeamConfig,
                        n_max: int = 4, r_min: int = 3):
    """Transcribe unlabeled utterances with a wide beam (no augmentation, no
    dropout); returns (records, report).

    Each record carries the best hypothesis and per-token confidences from a
    clean teacher-forced rescoring pass.  Utterances whose transcription
    fails to reach end-of-sequence, or trips the loop filter, are excluded
    and reported.
    """
    records: list[PTRecord] = []
    report = PTGenerationReport()
    model_id = params.model_id()
    for u in utterances:
        hyps = dec.beam_search(params, u.features, beam_cfg, utt_id=u.utt_id)
        if not hyps:
            report.rejected_decode += 1
            report.rejected_ids.append(u.utt_id)
            continue
        tokens = np.array(hyps[0].tokens, dtype=np.int64)
        if not loop_filter(tokens[:-1], n_max=n_max, r_min=r_min):
            report.rejected_loop += 1
            report.rejected_ids.append(u.utt_id)
            continue
        conf = _rescore_confidences(params, u.features, tokens)
        records.append(PTRecord(u.utt_id, tokens, conf, "offline-beam", model_id))
        report.kept += 1
    return records, report


def _one_hot(tokens, vocab: int) -> np.ndarray:
    rows = np.zeros((len(tokens), vocab))
    rows[np.arange(len(tokens)), np.asarray(tokens, dtype=np.intp)] = 1.0
    return rows


def _labels_from_pass(params: mdl.ModelParams, features: np.ndarray, pt: PTRecord,
                      kind: str, weak: aug.AugmentPolicy | None, dropout: bool,
                      rng: np.random.Generator):
    """One teacher-forced pass conditioned on the PT history; detached."""
    with tz.no_grad():
        x = aug.spec_augment(features, weak, rng) if weak is not None and not weak.is_identity \
            else features
        post = mdl.forward_teacher_forced(params, x, pt.tokens,
                                          dropout=dropout, rng=rng if dropout else None).data
    conf = post.max(axis=1)
    if kind == "hard":
        return LabelMatrix(_one_hot(post.argmax(axis=1), post.shape[1]), hard=True), conf
    return LabelMatrix(post.copy(), hard=False), conf


def fixmatch_labels(params: mdl.ModelParams, features: np.ndarray, pt: PTRecord,
                    weak: aug.AugmentPolicy, rng: np.random.Generator,
                    kind: str = "hard", dropout: bool = True):
    """Labels from the CURRENT model on a weakly augmented input, teacher
    forced on the stored PT history, with dropout in the forward pass.

    Hard mode one-hots the argmax; soft mode returns the full posterior rows.
    Confidence is the row-max posterior either way.
    """
    if len(pt.tokens) == 0:
        raise ValueError(f"{pt.utt_id}: empty PT transcription")
    return _labels_from_pass(params, features, pt, kind, weak, dropout, rng)


def noisy_student_labels(teacher: mdl.ModelParams, features: np.ndarray, pt: PTRecord,
                         kind: str, noise: str, rng: np.random.Generator,
                         weak: aug.AugmentPolicy | None = None):
    """Labels from a frozen teacher.  hard+none short-circuits to one-hots of
    the stored PT transcription; every other mode is an on-the-fly
    teacher-forced pass with the requested noise (dropout or weak masking)."""
    if noise not in ("none", "dropout", "weak-sa"):
        raise ValueError(f"unknown PT noise {noise!r}")
    if kind not in ("hard", "soft"):
        raise ValueError(f"unknown PT label kind {kind!r}")
    if kind == "hard" and noise == "none":
        return LabelMatrix(_one_hot(pt.tokens, teacher.cfg.vocab_size), hard=True), \
            pt.confidences.copy()
    if noise == "weak-sa" and weak is None:
        weak = aug.preset("weak", teacher.cfg.feature_dim)
    return _labels_from_pass(teacher, features, pt, kind,
                             weak if noise == "weak-sa" else None,
                             dropout=(noise == "dropout"), rng=rng)


def iterative_self_train_labels(params: mdl.ModelParams, utt_id: str,
                                features: np.ndarray, beam_cfg: dec.BeamConfig,
                                previous: PTRecord | None = None):
    """Fresh lightweight beam-search transcription for one utterance; on
    decode failure falls back to the previous record.  Returns (record,
    fresh) where fresh is False on fallback."""
    hyps = dec.beam_search(params, features, beam_cfg, utt_id=utt_id)
    if not hyps:
        if previous is None:
            raise RuntimeError(f"{utt_id}: decode failed and no previous PT to fall back to")
        return previous, False
    best = hyps[0]
    return PTRecord(utt_id, np.array(best.tokens, dtype=np.int64),
                    np.array(best.token_probs), "iterative", params.model_id()), True


# ---------------------------------------------------------------------------
# multi-round Noisy Student


def noisy_student_rounds(base_params: mdl.ModelParams, labeled_ds, tranches,
                         cfg, validation_ds, beam_cfg: dec.BeamConfig | None = None,
                         seed: int = 0, init_from_gt: bool = False, log_dir=None):
    """Run len(tranches) rounds of the Noisy Student scheme.

    Round r generates PT for tranche r with the previous round's model (the
    base model for round 1), then trains a student on the labeled data plus
    all PT accumulated so far.  Returns (final params, per-round PT stores,
    per-round results).
    """
    from . import train as tr  # local import; train depends on this module

    if beam_cfg is None:
        beam_cfg = dec.BeamConfig(beam_width=16, lambda_cov=0.0, lambda_rlp=0.0)
    teacher = base_params
    pt_stores: list[list[PTRecord]] = []
    results = []
    features_by_id = {}
    params = base_params
    for r, tranche in enumerate(tranches, start=1):
        views = tranche.unlabeled_views()
        features_by_id.update({v.utt_id: v.features for v in views})
        records, report = generate_pt_offline(teacher, views, beam_cfg)
        pt_stores.append(records)
        all_records = [rec for store in pt_stores for rec in store]
        unlabeled = [(rec.utt_id, features_by_id[rec.utt_id], rec) for rec in all_records]
        student = (base_params.copy() if init_from_gt
                   else mdl.init_params(base_params.cfg, seed=seed + 1000 * r))
        result = tr.run_training(student, cfg, labeled_ds, unlabeled,
                                 validation_ds, seed=seed + r, teacher=teacher,
                                 log_path=(None if log_dir is None
                                           else f"{log_dir}/round{r}_metrics.jsonl"))
        params = result.params
        results.append((result, report))
        teacher = params
    return params, pt_stores, results


# ---------------------------------------------------------------------------
# PT store files


def save_pt_store(records: list[PTRecord], path) -> None:
    """Line-delimited store: id, generator, source, token ids, confidences
    (6 decimal places).  Round-trips bit-exactly."""
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write("\t".join([
                r.utt_id, r.generator_model_id, r.source,
                " ".join(str(int(t)) for t in r.tokens),
                " ".join(f"{c:.6f}" for c in r.confidences)]) + "\n")


def load_pt_store(path) -> list[PTRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, gen_id, source, toks, confs = line.split("\t")
            records.append(PTRecord(
                utt_id, np.array([int(t) for t in toks.split()], dtype=np.int64),
                np.array([float(c) for c in confs.split()]), source, gen_id))
    return records
