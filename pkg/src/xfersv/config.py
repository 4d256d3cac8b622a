"""Experiment configuration: a strict JSON tree with defaults everywhere.

A config file may set any subset of the documented keys; everything else
takes the desk-scale default. Unknown keys are hard errors so typos cannot
silently fall back to defaults. One root seed governs every stage through
a documented derivation (the stage name is hashed into the seed, see
numerics.derive_seed), so each stage is independently reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .data import CorpusConfig
from .errors import ConfigError
from .losses import RECIPES, LossWeights
from .model import ExtractorConfig
from .numerics import derive_seed
from .train import TrainConfig

SEED_ENV_VAR = "XFERSV_SEED"

DEFAULT_STUDENT_RECIPES = ("ce_kl", "ce_cos", "ce_mse", "ce_mmd",
                           "ce_fprime", "ce_instance", "ce_fprime_instance")

STAGES = ("baseline", "teacher", "student")


@dataclass(frozen=True)
class EvalConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    num_target: int = 3000
    num_nontarget: int = 9000

    def __post_init__(self):
        if not (0.0 < self.p_target < 1.0):
            raise ConfigError("eval.p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ConfigError("eval cost parameters must be > 0")
        if self.num_target < 1 or self.num_nontarget < 1:
            raise ConfigError("eval trial counts must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: dict = field(default_factory=dict)  # stage -> TrainConfig
    student_recipes: tuple[str, ...] = DEFAULT_STUDENT_RECIPES
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.corpus.input_dim != self.model.input_dim:
            raise ConfigError(
                f"corpus.input_dim ({self.corpus.input_dim}) must equal "
                f"model.input_dim ({self.model.input_dim})")
        if self.corpus.num_speakers != self.model.num_speakers:
            raise ConfigError(
                f"corpus.num_speakers ({self.corpus.num_speakers}) must equal "
                f"model.num_speakers ({self.model.num_speakers})")
        for recipe in self.student_recipes:
            if recipe not in RECIPES:
                raise ConfigError(f"unknown student recipe {recipe!r}")
        for stage in STAGES:
            if stage not in self.train:
                raise ConfigError(f"missing train config for stage {stage!r}")

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)


def _build(cls, node: dict, path: str, overrides=None):
    """Construct a config dataclass from a dict, rejecting unknown keys."""
    if not isinstance(node, dict):
        raise ConfigError(f"{path} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(node) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {sorted(unknown)}")
    kwargs = dict(node)
    if overrides:
        kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


def _train_config(node: dict, path: str, seed: int) -> TrainConfig:
    node = dict(node)
    weights_node = node.pop("weights", None)
    overrides = {"seed": node.pop("seed", seed)}
    if weights_node is not None:
        overrides["weights"] = _build(LossWeights, weights_node, f"{path}.weights")
    return _build(TrainConfig, node, path, overrides)


def config_from_dict(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON tree.

    Per-stage seeds default to derive_seed(root, stage) and the corpus seed
    to derive_seed(root, "corpus"); explicit `seed` keys inside blocks win.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed", "output_dir", "corpus", "model", "train", "student_recipes", "eval"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {sorted(unknown)}")

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    corpus_node = dict(raw.get("corpus", {}))
    corpus_node.setdefault("seed", derive_seed(seed, "corpus"))
    corpus = _build(CorpusConfig, corpus_node, "corpus")

    model_node = dict(raw.get("model", {}))
    model_node.setdefault("num_speakers", corpus.num_speakers)
    model_node.setdefault("input_dim", corpus.input_dim)
    if "hidden_dims" in model_node:
        model_node["hidden_dims"] = tuple(model_node["hidden_dims"])
    model = _build(ExtractorConfig, model_node, "model")

    train_node = raw.get("train", {})
    if not isinstance(train_node, dict):
        raise ConfigError("train must be an object with per-stage blocks")
    unknown_stages = set(train_node) - set(STAGES)
    if unknown_stages:
        raise ConfigError(f"unknown train stage(s): {sorted(unknown_stages)}")
    train = {}
    for stage in STAGES:
        node = dict(train_node.get(stage, {}))
        if stage == "student":
            node.setdefault("recipe", "ce_fprime_instance")
        train[stage] = _train_config(node, f"train.{stage}",
                                     derive_seed(seed, f"train.{stage}"))

    recipes = tuple(raw.get("student_recipes", DEFAULT_STUDENT_RECIPES))
    eval_cfg = _build(EvalConfig, dict(raw.get("eval", {})), "eval")
    return ExperimentConfig(seed=seed, output_dir=str(raw.get("output_dir", "runs/default")),
                            corpus=corpus, model=model, train=train,
                            student_recipes=recipes, eval=eval_cfg)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Read and validate a JSON experiment config.

    The XFERSV_SEED environment variable (or an explicit override) replaces
    the file's root seed before any derivation happens.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if seed_override is None:
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                seed_override = int(env)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    return config_from_dict(raw, seed_override)


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "seed": config.seed,
        "output_dir": config.output_dir,
        "corpus": dataclasses.asdict(config.corpus),
        "model": {**dataclasses.asdict(config.model),
                  "hidden_dims": list(config.model.hidden_dims)},
        "train": {stage: {**dataclasses.asdict(tc),
                          "weights": dataclasses.asdict(tc.weights)}
                  for stage, tc in config.train.items()},
        "student_recipes": list(config.student_recipes),
        "eval": dataclasses.asdict(config.eval),
    }


def config_hash(config: ExperimentConfig) -> str:
    """sha256 over the canonical experiment parameters (output_dir is a
    location, not part of the experiment identity)."""
    tree = config_to_dict(config)
    del tree["output_dir"]
    canonical = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
