"""Supervised and semi-supervised losses, label smoothing, confidence-based
token selection, the Adam training loop, and early stopping.

Loss normalization follows the split-batch convention: per-utterance token
sums, averaged over the total batch size, so the combined loss equals
(1/|B|) (L_labeled + L_unlabeled).  Pseudo-label generation (see
``pseudolabel``) is detached; only the loss terms are gated by the
confidence threshold, while the decoder history is teacher-forced on the
full PT transcription.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment as aug
from . import decode as dec
from . import metrics as met
from . import model as mdl
from . import pseudolabel as pl
from . import tensor as tz
from .tensor import Tensor

SSL_MODES = ("none", "pt-fixed", "fixmatch", "noisy-student", "iterative-self-training")


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss or a broken precondition."""


@dataclass(frozen=True)
class TrainConfig:
    confidence_threshold: float = 0.5
    label_smoothing: float = 0.9          # target-class probability
    dropout_p: float = 0.3
    batch_size_labeled: int = 8
    batch_size_unlabeled: int = 8
    learning_rate: float = 2e-3
    max_epochs: int = 30
    max_steps: int | None = None
    early_stop_patience: int = 5
    labeled_augment: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)
    unlabeled_augment: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)
    weak_augment: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)
    ssl_mode: str = "none"
    pt_label_kind: str = "hard"           # hard | soft
    pt_noise: str = "none"                # none | dropout | weak-sa
    grad_clip: float = 5.0
    iterative_beam_width: int = 4

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")
        if not 0.0 < self.label_smoothing <= 1.0:
            raise ValueError("label_smoothing must be in (0, 1]")
        if self.ssl_mode not in SSL_MODES:
            raise ValueError(f"unknown ssl_mode {self.ssl_mode!r}")
        if self.pt_label_kind not in ("hard", "soft"):
            raise ValueError(f"unknown pt_label_kind {self.pt_label_kind!r}")
        if self.pt_noise not in ("none", "dropout", "weak-sa"):
            raise ValueError(f"unknown pt_noise {self.pt_noise!r}")


@dataclass
class Batch:
    labeled: list      # (utt_id, features, tokens)
    unlabeled: list    # (utt_id, features, PTRecord)


def smooth_labels(token: int, vocab: int, target_prob: float) -> np.ndarray:
    """Target class gets target_prob; the rest is uniform over other classes."""
    if not 0.0 < target_prob <= 1.0:
        raise ValueError("target_prob must be in (0, 1]")
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    row = np.full(vocab, (1.0 - target_prob) / (vocab - 1))
    row[int(token)] = target_prob
    return row


def _smoothed_rows(tokens, vocab: int, target_prob: float) -> np.ndarray:
    return np.stack([smooth_labels(t, vocab, target_prob) for t in tokens])


def _utterance_ce(params: mdl.ModelParams, features: np.ndarray, tokens,
                  target_rows: np.ndarray, policy: aug.AugmentPolicy,
                  dropout: bool, rng) -> Tensor:
    """Token-summed CE of one utterance against (already weighted) target rows."""
    x = features if policy.is_identity else aug.spec_augment(features, policy, rng)
    enc = mdl.encode(params, x, dropout=dropout, rng=rng)
    logits, _ = mdl._teacher_forced_logits(params, enc, tokens, dropout, rng)
    lp = tz.log_softmax(logits)
    return tz.scale(tz.tsum(tz.mul(tz.constant(target_rows), lp)), -1.0)


def supervised_loss(params: mdl.ModelParams, batch_l, cfg: TrainConfig,
                    rng: np.random.Generator, dropout: bool = True) -> Tensor:
    """Mean over utterances of the token-summed CE against smoothed ground
    truth, with the labeled augmentation policy applied to the inputs."""
    if not batch_l:
        raise ValueError("supervised_loss: empty batch")
    vocab = params.cfg.vocab_size
    total = None
    for features, tokens in batch_l:
        rows = _smoothed_rows(tokens, vocab, cfg.label_smoothing)
        ce = _utterance_ce(params, features, tokens, rows,
                           cfg.labeled_augment, dropout, rng)
        total = ce if total is None else tz.add(total, ce)
    return tz.scale(total, 1.0 / len(batch_l))


def unlabeled_loss(params: mdl.ModelParams, batch_u, labels, confidences,
                   cfg: TrainConfig, rng: np.random.Generator,
                   dropout: bool = True):
    """CE on pseudo-labeled utterances with per-token confidence gating.

    The decoder history is teacher-forced on the full PT transcription; only
    loss terms with confidence >= the threshold contribute.  Hard label rows
    are smoothed exactly like ground truth; soft rows pass through.  Returns
    (loss, selected_fraction).
    """
    if not batch_u:
        raise ValueError("unlabeled_loss: empty batch")
    vocab = params.cfg.vocab_size
    total = None
    selected = 0.0
    n_tokens = 0
    for (utt_id, features, pt), lm, conf in zip(batch_u, labels, confidences):
        if len(lm.rows) != len(pt.tokens):
            raise TrainingError(f"{utt_id}: {len(lm.rows)} label rows for "
                                f"{len(pt.tokens)} PT tokens")
        if lm.hard:
            rows = _smoothed_rows(lm.rows.argmax(axis=1), vocab, cfg.label_smoothing)
        else:
            rows = lm.rows
        w = (np.asarray(conf) >= cfg.confidence_threshold).astype(np.float64)
        selected += w.sum()
        n_tokens += len(w)
        ce = _utterance_ce(params, features, pt.tokens, rows * w[:, None],
                           cfg.unlabeled_augment, dropout, rng)
        total = ce if total is None else tz.add(total, ce)
    return tz.scale(total, 1.0 / len(batch_u)), selected / n_tokens


# ---------------------------------------------------------------------------
# optimizer


def init_opt_state() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def adam_update(params: mdl.ModelParams, grads: dict[str, np.ndarray],
                opt_state: dict, lr: float, clip: float = 5.0,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One Adam step with a global-norm gradient cap; returns new params."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = min(1.0, clip / norm) if norm > 0 else 1.0
    opt_state["t"] += 1
    t = opt_state["t"]
    b1, b2 = betas
    new_tensors = {}
    for name, tensor in params.tensors.items():
        g = grads.get(name)
        if g is None:
            new_tensors[name] = tensor
            continue
        g = g * scale
        m = opt_state["m"].get(name, np.zeros_like(g))
        v = opt_state["v"].get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt_state["m"][name] = m
        opt_state["v"][name] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_tensors[name] = tz.parameter(tensor.data - lr * mhat / (np.sqrt(vhat) + eps))
    return mdl.ModelParams(params.cfg, new_tensors), norm


# ---------------------------------------------------------------------------
# one step


def _make_unlabeled_labels(params: mdl.ModelParams, batch_u, cfg: TrainConfig,
                           rng: np.random.Generator, teacher: mdl.ModelParams | None):
    """Produce (labels, confidences, extra metrics) for the unlabeled part
    according to the SSL mode.  All label passes are detached."""
    labels, confs = [], []
    extra: dict = {}
    if cfg.ssl_mode == "pt-fixed":
        for _, _, pt in batch_u:
            labels.append(pl.LabelMatrix(pl._one_hot(pt.tokens, params.cfg.vocab_size), hard=True))
            confs.append(pt.confidences)
    elif cfg.ssl_mode == "fixmatch":
        weak = cfg.weak_augment if cfg.pt_noise == "weak-sa" else aug.AugmentPolicy()
        use_dropout = cfg.pt_noise != "none"
        for _, features, pt in batch_u:
            lm, c = pl.fixmatch_labels(params, features, pt, weak, rng,
                                       kind=cfg.pt_label_kind, dropout=use_dropout)
            labels.append(lm)
            confs.append(c)
    elif cfg.ssl_mode == "noisy-student":
        if teacher is None:
            raise TrainingError("noisy-student mode requires a frozen teacher model; "
                                "pass teacher= (e.g. the checkpoint that generated the PT store)")
        for _, features, pt in batch_u:
            lm, c = pl.noisy_student_labels(teacher, features, pt, cfg.pt_label_kind,
                                            cfg.pt_noise, rng, weak=cfg.weak_augment)
            labels.append(lm)
            confs.append(c)
    elif cfg.ssl_mode == "iterative-self-training":
        beam = dec.BeamConfig(beam_width=cfg.iterative_beam_width,
                              lambda_cov=0.0, lambda_wip=0.0, lambda_rlp=0.0)
        fallbacks = 0
        refreshed = []
        for utt_id, features, pt in batch_u:
            rec, fresh = pl.iterative_self_train_labels(params, utt_id, features, beam,
                                                        previous=pt)
            fallbacks += not fresh
            refreshed.append(rec)
            labels.append(pl.LabelMatrix(pl._one_hot(rec.tokens, params.cfg.vocab_size),
                                         hard=True))
            confs.append(rec.confidences)
        extra["pt_fallbacks"] = fallbacks
        batch_u = [(u, f, r) for (u, f, _), r in zip(batch_u, refreshed)]
    else:
        raise TrainingError(f"no label path for ssl_mode {cfg.ssl_mode!r}")
    return batch_u, labels, confs, extra


def train_step(params: mdl.ModelParams, batch: Batch, cfg: TrainConfig,
               opt_state: dict, rng: np.random.Generator,
               teacher: mdl.ModelParams | None = None, step: int = 0):
    """One gradient update on a mixed batch; returns (params, opt_state, metrics)."""
    nl = len(batch.labeled)
    nu = len(batch.unlabeled) if cfg.ssl_mode != "none" else 0
    if nl + nu == 0:
        raise TrainingError("train_step: empty batch")
    metrics: dict = {"step": step}
    sup = None
    if nl:
        sup = supervised_loss(params, [(f, t) for _, f, t in batch.labeled], cfg, rng)
        metrics["labeled_loss"] = float(sup.data)
    unl = None
    if nu:
        batch_u, labels, confs, extra = _make_unlabeled_labels(
            params, batch.unlabeled, cfg, rng, teacher)
        unl, frac = unlabeled_loss(params, batch_u, labels, confs, cfg, rng)
        metrics["unlabeled_loss"] = float(unl.data)
        metrics["selected_fraction"] = frac
        metrics.update(extra)
    if sup is not None and unl is not None:
        total = tz.scale(tz.add(tz.scale(sup, float(nl)), tz.scale(unl, float(nu))),
                         1.0 / (nl + nu))
    else:
        total = sup if sup is not None else unl
    if not np.isfinite(total.data):
        ids = [u for u, _, _ in batch.labeled] + [u for u, _, _ in batch.unlabeled]
        raise TrainingError(f"non-finite loss at step {step} (utterances: {', '.join(ids)})")
    grads = tz.backward(total)
    name_grads = {name: grads[t] for name, t in params.tensors.items() if t in grads}
    new_params, gnorm = adam_update(params, name_grads, opt_state,
                                    cfg.learning_rate, clip=cfg.grad_clip)
    metrics["grad_norm"] = gnorm
    metrics["total_loss"] = float(total.data)
    return new_params, opt_state, metrics


# ---------------------------------------------------------------------------
# early stopping and the epoch loop


def early_stop(history, patience: int):
    """('stop'|'continue', best_epoch), epochs 1-based.

    Stops once `patience` consecutive epochs pass without strict improvement
    over the running best; best_epoch is the argmin (ties -> earliest).
    """
    if not history:
        raise ValueError("early_stop: empty history")
    if patience < 1:
        raise ValueError("early_stop: patience must be >= 1")
    best = history[0]
    last_improve = 0
    for epoch, value in enumerate(history[1:], start=2):
        if value < best:
            best = value
            last_improve = epoch
    streak = len(history) - last_improve
    best_epoch = int(np.argmin(history)) + 1
    return ("stop" if streak >= patience else "continue"), best_epoch


def validation_wer(params: mdl.ModelParams, utterances) -> float:
    """Corpus WER of greedy decodes against ground truth (terminator stripped)."""
    eos = params.cfg.eos_id
    pairs = []
    for u in utterances:
        hyp, _ = dec.greedy_decode(params, u.features, utt_id=u.utt_id)
        hyp = [t for t in hyp if t != eos]
        pairs.append(([int(t) for t in u.tokens if t != eos], hyp))
    return met.corpus_report(pairs).wer


@dataclass
class TrainResult:
    params: mdl.ModelParams       # best checkpoint by validation WER
    final_params: mdl.ModelParams
    best_epoch: int
    history: list[float]          # validation WER per epoch
    steps: int


def run_training(params: mdl.ModelParams, cfg: TrainConfig, labeled_ds,
                 unlabeled_entries, validation_ds, seed: int = 0,
                 teacher: mdl.ModelParams | None = None,
                 log_path=None) -> TrainResult:
    """Epoch loop: shuffled labeled batches, unlabeled batches cycled
    alongside, per-epoch validation WER, early stopping on the WER history.

    `unlabeled_entries` is a list of (utt_id, features, PTRecord); pass None
    or [] for purely supervised training.  Step metrics go to `log_path` as
    line-delimited JSON records.
    """
    rng = np.random.default_rng(seed)
    labeled = [(u.utt_id, u.features, u.tokens) for u in labeled_ds.utterances]
    unlabeled = list(unlabeled_entries or [])
    use_unlabeled = cfg.ssl_mode != "none" and unlabeled
    if cfg.ssl_mode not in ("none", "fixmatch", "iterative-self-training") \
            and use_unlabeled and teacher is None and cfg.ssl_mode == "noisy-student":
        raise TrainingError("noisy-student training requires a teacher model")
    opt_state = init_opt_state()
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    history: list[float] = []
    best_params = params
    best_epoch = 0
    step = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(labeled))
            u_order = rng.permutation(len(unlabeled)) if use_unlabeled else []
            u_pos = 0
            for lo in range(0, len(order), cfg.batch_size_labeled):
                batch_l = [labeled[i] for i in order[lo:lo + cfg.batch_size_labeled]]
                batch_u = []
                if use_unlabeled:
                    for _ in range(cfg.batch_size_unlabeled):
                        if u_pos >= len(u_order):
                            u_order = rng.permutation(len(unlabeled))
                            u_pos = 0
                        batch_u.append(unlabeled[u_order[u_pos]])
                        u_pos += 1
                step += 1
                params, opt_state, m = train_step(
                    params, Batch(batch_l, batch_u), cfg, opt_state, rng,
                    teacher=teacher, step=step)
                m["epoch"] = epoch
                if log:
                    log.write(json.dumps(m) + "\n")
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            wer = validation_wer(params, validation_ds.utterances)
            history.append(wer)
            if log:
                log.write(json.dumps({"epoch": epoch, "validation_wer": wer}) + "\n")
                log.flush()
            decision, best_epoch = early_stop(history, cfg.early_stop_patience)
            if best_epoch == epoch:
                best_params = params
            if decision == "stop" or (cfg.max_steps and step >= cfg.max_steps):
                break
    finally:
        if log:
            log.close()
    return TrainResult(params=best_params, final_params=params,
                       best_epoch=best_epoch, history=history, steps=step)
