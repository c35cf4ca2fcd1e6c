"""Experiment harness: synthetic data generation, training in every SSL mode,
offline PT generation, and evaluation with WERR/WRR reporting.

Configs are flat, diff-able key=value text with section prefixes
(corpus.*, model.*, train.*, beam.*).  Every output directory receives the
complete resolved config that produced it.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import augment as aug
from . import decode as dec
from . import metrics as met
from . import model as mdl
from . import pseudolabel as pl
from . import synthdata as sd
from . import train as tr


class CliError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    corpus: sd.CorpusConfig = field(default_factory=sd.CorpusConfig)
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    beam: dec.BeamConfig = field(default_factory=dec.BeamConfig)
    split_ratios: tuple[float, float, float] = (0.25, 0.25, 0.5)
    recipe: str = ""
    seed: int = 0
    output_dir: str = "runs"


# rows of the experiment grid, by name; "mode" selects the training path and
# "init"/"tranche" tell the train subcommand what artifacts it needs
RECIPES: dict[str, dict] = {
    "baseline-25": {"ssl_mode": "none"},
    "fixmatch-scratch": {"ssl_mode": "fixmatch", "pt_label_kind": "soft",
                         "pt_noise": "dropout", "confidence_threshold": 0.5},
    "fixmatch-init-gt": {"ssl_mode": "fixmatch", "pt_label_kind": "soft",
                         "pt_noise": "dropout", "confidence_threshold": 0.0,
                         "_init": "checkpoint"},
    "ns-hard": {"ssl_mode": "noisy-student", "pt_label_kind": "hard", "pt_noise": "none"},
    "ns-soft": {"ssl_mode": "noisy-student", "pt_label_kind": "soft", "pt_noise": "none"},
    "ns-soft-sa": {"ssl_mode": "noisy-student", "pt_label_kind": "soft", "pt_noise": "weak-sa"},
    "ns-soft-dropout": {"ssl_mode": "noisy-student", "pt_label_kind": "soft",
                        "pt_noise": "dropout"},
    "iterative-w4": {"ssl_mode": "iterative-self-training", "pt_label_kind": "hard",
                     "pt_noise": "none", "iterative_beam_width": 4, "_init": "checkpoint"},
    "ns-round2": {"ssl_mode": "noisy-student", "pt_label_kind": "soft",
                  "pt_noise": "weak-sa", "_tranche": 2},
}

MODE_TO_SSL = {"supervised": "none", "fixmatch": "fixmatch",
               "noisy-student": "noisy-student",
               "iterative-self-training": "iterative-self-training",
               "pt-fixed": "pt-fixed"}


# ---------------------------------------------------------------------------
# config file handling


def _format_value(v) -> str:
    if isinstance(v, aug.AugmentPolicy):
        return f"{v.f_max},{v.t_max},{v.m_f},{v.m_t}"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _coerce(text: str, current, feature_dim: int):
    text = text.strip()
    if isinstance(current, aug.AugmentPolicy):
        if text in ("strong", "weak", "none"):
            return aug.preset(text, feature_dim)
        parts = [int(x) for x in text.split(",")]
        if len(parts) != 4:
            raise CliError(f"augment policy needs 4 ints or a preset name, got {text!r}")
        return aug.AugmentPolicy(*parts)
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (tuple, list)):
        elem = current[0] if current else 0
        conv = float if isinstance(elem, float) else int
        return tuple(conv(x) for x in text.split(","))
    if current is None:
        return None if text.lower() == "none" else int(text)
    return text


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for section, obj in (("corpus", cfg.corpus), ("model", cfg.model),
                         ("train", cfg.train), ("beam", cfg.beam)):
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    lines.append(f"split.ratios = {_format_value(cfg.split_ratios)}")
    lines.append(f"recipe = {cfg.recipe}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"


def _parse_pairs(lines) -> list[tuple[str, str]]:
    pairs = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"bad config line (expected key = value): {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    # resolve model/corpus keys first so augment presets can scale to feature_dim
    order = {"corpus": 0, "model": 1}
    for key, value in sorted(pairs, key=lambda kv: order.get(kv[0].split(".")[0], 2)):
        if key == "recipe":
            cfg.recipe = value
        elif key == "seed":
            cfg.seed = int(value)
        elif key == "output_dir":
            cfg.output_dir = value
        elif key == "split.ratios":
            cfg.split_ratios = tuple(float(x) for x in value.split(","))
        elif "." in key:
            section, name = key.split(".", 1)
            if section not in ("corpus", "model", "train", "beam"):
                raise CliError(f"unknown config section {section!r}")
            obj = getattr(cfg, section)
            if not any(f.name == name for f in fields(obj)):
                raise CliError(f"unknown config key {key!r}")
            new = _coerce(value, getattr(obj, name), cfg.model.feature_dim)
            setattr(cfg, section, replace(obj, **{name: new}))
        else:
            raise CliError(f"unknown config key {key!r}")
    return cfg


def finalize(cfg: ExperimentConfig) -> ExperimentConfig:
    """Keep the shared knobs consistent: the model mirrors the corpus vocab
    and feature width, and training's dropout probability."""
    cfg.model = replace(cfg.model, vocab_size=cfg.corpus.vocab_size,
                        feature_dim=cfg.corpus.feature_dim,
                        dropout_p=cfg.train.dropout_p)
    return cfg


def load_config(path: str | None, overrides, seed: int | None,
                output: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        with open(path, encoding="utf-8") as f:
            cfg = apply_pairs(cfg, _parse_pairs(f))
    if overrides:
        cfg = apply_pairs(cfg, _parse_pairs(overrides))
    if seed is not None:
        cfg.seed = seed
    if output is not None:
        cfg.output_dir = output
    return finalize(cfg)


def apply_recipe(cfg: ExperimentConfig, name: str) -> tuple[ExperimentConfig, dict]:
    if name not in RECIPES:
        raise CliError(f"unknown recipe {name!r} (choose from {sorted(RECIPES)})")
    spec = dict(RECIPES[name])
    meta = {"init": spec.pop("_init", "random"), "tranche": spec.pop("_tranche", 1)}
    cfg.train = replace(cfg.train, **spec)
    cfg.recipe = name
    return cfg, meta


# ---------------------------------------------------------------------------
# output handling


class _OutputDir:
    """Create the run directory up front; on failure move whatever was
    written to a quarantined path so partial outputs are never mistaken for
    results."""

    def __init__(self, path: str):
        self.path = path

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            q = self.path.rstrip("/") + ".quarantine"
            if os.path.isdir(q):
                shutil.rmtree(q)
            if os.path.isdir(self.path):
                os.rename(self.path, q)
                print(f"partial outputs quarantined to {q}", file=sys.stderr)
        return False


def _write_config(out_dir: str, cfg: ExperimentConfig) -> None:
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(config_to_text(cfg))


# ---------------------------------------------------------------------------
# subcommands

DATASET_FILES = {"labeled": "labeled.npz", "unlabeled-tranche-1": "unlabeled1.npz",
                 "unlabeled-tranche-2": "unlabeled2.npz",
                 "validation": "validation.npz", "test": "test.npz"}


def cmd_make_data(cfg: ExperimentConfig) -> None:
    with _OutputDir(cfg.output_dir) as out:
        corpus = sd.generate_corpus(cfg.corpus)
        splits = sd.split_paper_protocol(corpus, ratios=cfg.split_ratios)
        for role, filename in DATASET_FILES.items():
            sd.save_dataset(splits[role], os.path.join(out, filename))
            print(f"{role}: {len(splits[role])} utterances -> {filename}")
        _write_config(out, cfg)


def _load_split(data_dir: str, role: str) -> sd.Dataset:
    path = os.path.join(data_dir, DATASET_FILES[role])
    if not os.path.exists(path):
        raise CliError(f"missing dataset file {path}; run `seqssl make-data` first")
    return sd.load_dataset(path)


def cmd_train(cfg: ExperimentConfig, args) -> None:
    if args.recipe:
        cfg, meta = apply_recipe(cfg, args.recipe)
    else:
        if args.mode not in MODE_TO_SSL:
            raise CliError(f"unknown mode {args.mode!r}")
        cfg.train = replace(cfg.train, ssl_mode=MODE_TO_SSL[args.mode])
        meta = {"init": "checkpoint" if args.init_checkpoint else "random",
                "tranche": args.tranche}
    cfg = finalize(cfg)
    with _OutputDir(cfg.output_dir) as out:
        _write_config(out, cfg)
        labeled = _load_split(args.data, "labeled")
        if args.extra_labeled:
            for path in args.extra_labeled:
                extra = sd.load_dataset(path)
                labeled.utterances.extend(extra.utterances)
        validation = _load_split(args.data, "validation")

        teacher = None
        unlabeled_entries = []
        if cfg.train.ssl_mode != "none":
            if not args.pt_store:
                raise CliError(
                    f"ssl_mode {cfg.train.ssl_mode!r} needs a PT store; generate one with "
                    "`seqssl generate-pt --checkpoint <teacher> --data <dir>` and pass --pt-store")
            records = pl.load_pt_store(args.pt_store)
            tranche = "unlabeled-tranche-2" if meta.get("tranche") == 2 else "unlabeled-tranche-1"
            feats = {u.utt_id: u.features
                     for u in (_load_split(args.data, "unlabeled-tranche-1").utterances
                               + _load_split(args.data, "unlabeled-tranche-2").utterances)}
            missing = [r.utt_id for r in records if r.utt_id not in feats]
            if missing:
                raise CliError(f"PT store references unknown utterances: {missing[:5]} ...")
            unlabeled_entries = [(r.utt_id, feats[r.utt_id], r) for r in records]
            if cfg.train.ssl_mode == "noisy-student":
                if not args.teacher_checkpoint:
                    raise CliError("noisy-student needs --teacher-checkpoint "
                                   "(the model that generated the PT store)")
                teacher = mdl.load_checkpoint(args.teacher_checkpoint)

        if args.init_checkpoint:
            params = mdl.load_checkpoint(args.init_checkpoint)
        elif meta.get("init") == "checkpoint":
            raise CliError(f"recipe {cfg.recipe!r} initializes from a supervised checkpoint; "
                           "pass --init-checkpoint")
        else:
            params = mdl.init_params(cfg.model, seed=cfg.seed)

        result = tr.run_training(params, cfg.train, labeled, unlabeled_entries,
                                 validation, seed=cfg.seed, teacher=teacher,
                                 log_path=os.path.join(out, "metrics.jsonl"))
        mdl.save_checkpoint(result.params, os.path.join(out, "checkpoint.npz"))
        summary = {"best_epoch": result.best_epoch, "steps": result.steps,
                   "validation_wer_history": result.history,
                   "best_validation_wer": min(result.history),
                   "model_id": result.params.model_id(),
                   "config": config_to_text(cfg)}
        with open(os.path.join(out, "result.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
        print(f"best validation WER {min(result.history):.2f} % at epoch {result.best_epoch} "
              f"({result.steps} steps) -> {out}/checkpoint.npz")


def cmd_generate_pt(cfg: ExperimentConfig, args) -> None:
    params = mdl.load_checkpoint(args.checkpoint)
    role = "unlabeled-tranche-2" if args.tranche == 2 else "unlabeled-tranche-1"
    ds = _load_split(args.data, role)
    beam = replace(cfg.beam, beam_width=args.beam_width or 16)
    with _OutputDir(cfg.output_dir) as out:
        _write_config(out, cfg)
        records, report = pl.generate_pt_offline(params, ds.unlabeled_views(), beam)
        store = os.path.join(out, "pt_store.tsv")
        pl.save_pt_store(records, store)
        rep = {"kept": report.kept, "rejected_loop": report.rejected_loop,
               "rejected_decode": report.rejected_decode,
               "rejected_ids": report.rejected_ids,
               "generator_model_id": params.model_id(),
               "beam_width": beam.beam_width, "tranche": role,
               "config": config_to_text(cfg)}
        with open(os.path.join(out, "pt_report.json"), "w", encoding="utf-8") as f:
            json.dump(rep, f, indent=2)
        print(f"kept {report.kept}, rejected {report.rejected_loop} (loop) "
              f"+ {report.rejected_decode} (decode) -> {store}")


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    params = mdl.load_checkpoint(args.checkpoint)
    ds = sd.load_dataset(args.data)
    eos = params.cfg.eos_id
    with _OutputDir(cfg.output_dir) as out:
        _write_config(out, cfg)
        total = met.ScoreReport()
        for u in ds.utterances:
            hyps = dec.beam_search(params, u.features, cfg.beam, utt_id=u.utt_id)
            hyp = [t for t in hyps[0].tokens if t != eos] if hyps else []
            ref = [int(t) for t in u.tokens if t != eos]
            total = total + met.edit_distance_align(ref, hyp)
        report = {"wer": total.wer, "substitutions": total.substitutions,
                  "deletions": total.deletions, "insertions": total.insertions,
                  "reference_length": total.reference_length,
                  "dataset": args.data, "model_id": params.model_id(),
                  "config": config_to_text(cfg)}

        def _ref_wer(path):
            with open(path, encoding="utf-8") as f:
                return json.load(f)["wer"]

        if args.baseline_report:
            baseline = _ref_wer(args.baseline_report)
            report["baseline_wer"] = baseline
            report["werr"] = met.werr(baseline, total.wer)
            if args.oracle_report:
                oracle = _ref_wer(args.oracle_report)
                report["oracle_wer"] = oracle
                report["wrr"] = met.wrr(baseline, total.wer, oracle)
        with open(os.path.join(out, "eval_report.json"), "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
        line = total.format()
        if "werr" in report:
            line += f"  WERR {report['werr']:.1f} %"
        if "wrr" in report:
            line += f"  WRR {report['wrr']:.1f} %"
        print(line)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqssl",
                                description="semi-supervised seq2seq experiments at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (key = value)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--override", action="append", default=[],
                        help="KEY=VALUE config override (repeatable)")
        sp.add_argument("--output", default=None, help="output directory")

    sp = sub.add_parser("make-data", help="generate and split the synthetic corpus")
    common(sp)

    sp = sub.add_parser("train", help="train a model in one of the SSL modes")
    common(sp)
    sp.add_argument("--data", required=True, help="directory produced by make-data")
    sp.add_argument("--mode", default="supervised",
                    choices=sorted(MODE_TO_SSL), help="training mode (ignored with --recipe)")
    sp.add_argument("--recipe", default=None, choices=sorted(RECIPES),
                    help="named experiment recipe")
    sp.add_argument("--init-checkpoint", default=None)
    sp.add_argument("--teacher-checkpoint", default=None)
    sp.add_argument("--pt-store", default=None)
    sp.add_argument("--tranche", type=int, default=1, choices=(1, 2))
    sp.add_argument("--extra-labeled", action="append", default=[],
                    help="additional dataset file(s) treated as labeled (oracle runs)")

    sp = sub.add_parser("generate-pt", help="offline pseudo-transcription of a tranche")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--tranche", type=int, default=1, choices=(1, 2))
    sp.add_argument("--beam-width", type=int, default=None)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a dataset file")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset .npz file")
    sp.add_argument("--baseline-report", default=None,
                    help="eval_report.json of the baseline run (enables WERR)")
    sp.add_argument("--oracle-report", default=None,
                    help="eval_report.json of the oracle run (enables WRR)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override, args.seed, args.output)
        if args.command == "make-data":
            cmd_make_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, args)
        elif args.command == "generate-pt":
            cmd_generate_pt(cfg, args)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args)
    except (CliError, tr.TrainingError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
