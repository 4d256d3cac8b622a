"""Command-line front end: gen-data, train, evaluate, gradcheck, reproduce.

Exit codes: 0 success, 1 check failure, 2 config error, 3 missing
prerequisite artifact, 4 data-resolution error. Every command overwrites
its outputs and is byte-identical across reruns with the same inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .config import ExperimentConfig, config_hash, load_config
from .data import (
    Corpus,
    make_trials,
    pairs_from_utterances,
    read_features,
    read_trials,
    synth_corpus,
    write_features,
    write_trials,
)
from .errors import (
    ConfigError,
    FormatError,
    IdLookupError,
    MissingPrerequisiteError,
    XfersvError,
)
from .evaluate import (
    compare_report,
    extract_embeddings,
    project_2d,
    score_trials,
    write_projection_csv,
    write_scores,
)
from .model import (
    CheckpointMeta,
    checkpoint_hash,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Rng
from .train import train_baseline, train_student, train_teacher

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING_PREREQUISITE = 3
EXIT_DATA = 4

CONDITIONS = ("mismatched", "near_near", "far_far")


class _Paths:
    def __init__(self, output_dir: str):
        self.root = Path(output_dir)
        self.data = self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.logs = self.root / "logs"
        self.scores = self.root / "scores"
        self.reports = self.root / "reports"

    def train_features(self) -> Path:
        return self.data / "train.feats"

    def eval_features(self) -> Path:
        return self.data / "eval.feats"

    def trials(self, condition: str) -> Path:
        return self.data / f"trials_{condition}.txt"

    def checkpoint(self, system: str) -> Path:
        return self.checkpoints / f"{system}.ckpt"


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def cmd_gen_data(config: ExperimentConfig) -> int:
    """Write train/eval feature files, the three trial lists, and a manifest."""
    paths = _Paths(config.output_dir)
    paths.data.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus(config.corpus)
    write_features(corpus.train_utterances, paths.train_features())
    write_features(corpus.eval_utterances, paths.eval_features())
    trial_lists = make_trials(corpus.eval_utterances, config.eval.num_target,
                              config.eval.num_nontarget, Rng(config.stage_seed("trials")))
    for condition, trials in trial_lists.items():
        write_trials(trials, paths.trials(condition))
    _write_json(paths.data / "manifest.json", {
        "seed": config.seed,
        "config_hash": config_hash(config),
        "num_train_pairs": len(corpus.pairs),
        "num_eval_utterances": len(corpus.eval_utterances),
        "trials_per_condition": {"target": config.eval.num_target,
                                 "nontarget": config.eval.num_nontarget},
        "files": {
            "train_features": paths.train_features().name,
            "eval_features": paths.eval_features().name,
            "trials": {c: paths.trials(c).name for c in trial_lists},
        },
    })
    print(f"gen-data: {len(corpus.pairs)} train pairs, "
          f"{len(corpus.eval_utterances)} eval utterances -> {paths.data}")
    return EXIT_OK


def _load_train_pairs(config: ExperimentConfig, paths: _Paths):
    feats = paths.train_features()
    if not feats.exists():
        raise MissingPrerequisiteError(f"missing {feats}; run gen-data first")
    return pairs_from_utterances(read_features(feats))


def _shared_init(config: ExperimentConfig):
    """Fresh initialization shared by the baseline and teacher stages; the
    desk-scale stand-in for the pretrained out-of-domain model both are
    retrained from."""
    return init_params(config.model, Rng(config.stage_seed("init")))


def cmd_train(config: ExperimentConfig, stage: str, recipe: str | None = None) -> int:
    """Train one stage and write its checkpoint and epoch log."""
    paths = _Paths(config.output_dir)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    paths.logs.mkdir(parents=True, exist_ok=True)
    pairs = _load_train_pairs(config, paths)
    corpus = Corpus(config=config.corpus, pairs=pairs, eval_utterances=[])
    train_cfg = config.train[stage]

    if stage == "baseline":
        params, log = train_baseline(corpus, train_cfg, config.model,
                                     init=_shared_init(config))
        system = "baseline"
    elif stage == "teacher":
        params, log = train_teacher(corpus, train_cfg, config.model,
                                    init=_shared_init(config))
        system = "teacher"
    elif stage == "student":
        recipe = recipe or train_cfg.recipe
        teacher_path = paths.checkpoint("teacher")
        baseline_path = paths.checkpoint("baseline")
        for p in (teacher_path, baseline_path):
            if not p.exists():
                raise MissingPrerequisiteError(f"missing {p}; train that stage first")
        teacher = load_checkpoint(teacher_path)
        baseline = load_checkpoint(baseline_path)
        hash_before = checkpoint_hash(teacher_path)
        train_cfg = dataclasses.replace(train_cfg, recipe=recipe)
        params, log = train_student(teacher, baseline, pairs, train_cfg)
        hash_after = checkpoint_hash(teacher_path)
        system = f"student_{recipe}"
        _write_json(paths.logs / f"{system}_teacher_hash.json",
                    {"before": hash_before, "after": hash_after,
                     "identical": hash_before == hash_after})
        if hash_before != hash_after:
            raise XfersvError("teacher checkpoint changed during student training")
    else:
        raise ConfigError(f"unknown stage {stage!r}")

    meta = CheckpointMeta(epoch=train_cfg.epochs, seed=train_cfg.seed,
                          recipe=train_cfg.recipe if stage == "student" else "ce")
    save_checkpoint(params, paths.checkpoint(system), meta)
    log.write(paths.logs / f"{system}.jsonl")
    print(f"train[{system}]: final loss {log.records[-1].mean_loss:.4f} "
          f"-> {paths.checkpoint(system)}")
    return EXIT_OK


def cmd_evaluate(config: ExperimentConfig, checkpoint_paths: list[str],
                 trial_paths: list[str]) -> int:
    """Score every checkpoint on every trial list; emit metrics, the
    comparison table, score files, and 2-D projections."""
    paths = _Paths(config.output_dir)
    paths.scores.mkdir(parents=True, exist_ok=True)
    paths.reports.mkdir(parents=True, exist_ok=True)
    feats = paths.eval_features()
    if not feats.exists():
        raise IdLookupError(f"missing eval features: {feats}")
    eval_utts = read_features(feats)

    conditions = {}
    for tp in trial_paths:
        p = Path(tp)
        if not p.exists():
            raise IdLookupError(f"missing trial list: {p}")
        name = p.stem[len("trials_"):] if p.stem.startswith("trials_") else p.stem
        conditions[name] = read_trials(p)

    systems = {}
    for cp in checkpoint_paths:
        p = Path(cp)
        if not p.exists():
            raise IdLookupError(f"missing checkpoint: {p}")
        systems[p.stem] = load_checkpoint(p)

    scored = {}
    for name, params in systems.items():
        embeddings = extract_embeddings(params, eval_utts)
        scored[name] = {}
        for condition, trials in conditions.items():
            score_set = score_trials(embeddings, trials)
            scored[name][condition] = score_set
            write_scores(score_set, paths.scores / f"{name}__{condition}.txt")
        coords = project_2d(np.stack([embeddings[u.id] for u in eval_utts]))
        write_projection_csv(paths.reports / f"projection_{name}.csv",
                             [u.id for u in eval_utts],
                             [u.speaker for u in eval_utts], coords)

    report = compare_report(scored, p_target=config.eval.p_target,
                            c_miss=config.eval.c_miss, c_fa=config.eval.c_fa)
    _write_json(paths.reports / "metrics.json", report.to_json_dict())
    table = report.to_table()
    with open(paths.reports / "comparison.txt", "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(seed: int, trials: int, inject_fault: bool = False) -> int:
    """Verify all analytical gradients against central differences."""
    worst = gradcheck_mod.run_suite(seed=seed, trials=trials, inject_fault=inject_fault)
    print(gradcheck_mod.format_summary(worst), end="")
    ok = all(v < gradcheck_mod.DEFAULT_THRESHOLD for v in worst.values())
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} "
          f"({trials} instances per check, threshold {gradcheck_mod.DEFAULT_THRESHOLD})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_reproduce(config: ExperimentConfig) -> int:
    """Full pipeline: gen-data, baseline, teacher, every student recipe,
    then evaluation over all systems and conditions."""
    paths = _Paths(config.output_dir)
    rc = cmd_gen_data(config)
    if rc:
        return rc
    for stage in ("baseline", "teacher"):
        rc = cmd_train(config, stage)
        if rc:
            return rc
    system_names = ["baseline", "teacher"]
    for recipe in config.student_recipes:
        rc = cmd_train(config, "student", recipe=recipe)
        if rc:
            return rc
        system_names.append(f"student_{recipe}")
    checkpoints = [str(paths.checkpoint(name)) for name in system_names]
    trial_lists = [str(paths.trials(c)) for c in CONDITIONS]
    return cmd_evaluate(config, checkpoints, trial_lists)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xfersv",
        description="Teacher-student transfer learning for verification "
                    "under enrollment/test mismatch")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--output-dir", default=None,
                       help="override the config's output_dir")

    p = sub.add_parser("gen-data", help="synthesize the corpus and trial lists")
    add_config(p)
    p = sub.add_parser("train", help="train one pipeline stage")
    add_config(p)
    p.add_argument("--stage", required=True, choices=["baseline", "teacher", "student"])
    p.add_argument("--recipe", default=None, help="student loss recipe (student stage only)")
    p = sub.add_parser("evaluate", help="score checkpoints on trial lists")
    add_config(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--trials", nargs="+", required=True)
    p = sub.add_parser("gradcheck", help="verify analytical gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("reproduce", help="run the full pipeline end to end")
    add_config(p)
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.output_dir:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.trials, args.inject_fault)
        config = _load(args)
        if args.command == "gen-data":
            return cmd_gen_data(config)
        if args.command == "train":
            return cmd_train(config, args.stage, args.recipe)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoints, args.trials)
        if args.command == "reproduce":
            return cmd_reproduce(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQUISITE
    except (IdLookupError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except XfersvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
