"""Embedding extraction, cosine trial scoring, and verification metrics.

EER and minDCF use an exhaustive threshold sweep over -inf, +inf and the
midpoints of consecutive sorted unique scores, with the accept rule
score >= threshold. Both metrics are pure order statistics, so they are
exactly invariant under strictly increasing score transforms and exactly
reproducible by brute-force enumeration.

The 2-D projection is PCA via orthogonal (block power) iteration with a
fixed seed and iteration count; component signs are fixed by making the
largest-magnitude loading positive, so output is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Trial, Utterance
from .errors import (
    DegenerateInputError,
    IdLookupError,
    ParameterError,
    ShapeError,
)
from .model import ModelParams, forward
from .numerics import Rng

_PCA_SEED = 0x2D5EED
_PCA_ITERATIONS = 128


@dataclass(frozen=True)
class ScoreSet:
    """Per-trial scores aligned with their trial list."""

    trials: list
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or len(self.trials) != s.size:
            raise ShapeError("scores must be 1-D and aligned with trials")
        if not np.all(np.isfinite(s)):
            raise ShapeError("scores must be finite")
        object.__setattr__(self, "scores", s)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.is_target for t in self.trials], dtype=bool)


def extract_embeddings(params: ModelParams, utterances: list[Utterance]) -> dict[str, np.ndarray]:
    """One embedding per utterance id, via a single deterministic forward."""
    if not utterances:
        return {}
    feats = np.stack([u.features for u in utterances])
    emb, _, _ = forward(params, feats)
    return {u.id: emb[i] for i, u in enumerate(utterances)}


def average_embeddings(embeddings: dict[str, np.ndarray],
                       groups: dict[str, list[str]]) -> dict[str, np.ndarray]:
    """Mean embeddings for multi-utterance enrollment models.

    `groups` maps a new enrollment id to the utterance ids it averages.
    Default scoring is single-utterance; this is the opt-in averaging path.
    """
    out = {}
    for name, ids in groups.items():
        missing = [i for i in ids if i not in embeddings]
        if missing:
            raise IdLookupError(f"unknown utterance ids: {missing}")
        out[name] = np.mean([embeddings[i] for i in ids], axis=0)
    return out


def score_trials(embeddings: dict[str, np.ndarray], trials: list[Trial]) -> ScoreSet:
    """Cosine similarity of enroll/test embeddings per trial, in [-1, 1]."""
    scores = np.empty(len(trials))
    for i, t in enumerate(trials):
        for ident in (t.enroll_id, t.test_id):
            if ident not in embeddings:
                raise IdLookupError(f"no embedding for utterance id {ident!r}")
        a = embeddings[t.enroll_id]
        b = embeddings[t.test_id]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise DegenerateInputError(f"zero-norm embedding in trial {i}")
        scores[i] = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return ScoreSet(trials=list(trials), scores=scores)


def _split_scores(score_set: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    labels = score_set.labels
    target = score_set.scores[labels]
    nontarget = score_set.scores[~labels]
    if target.size == 0 or nontarget.size == 0:
        raise ParameterError("need at least one target and one nontarget trial")
    return target, nontarget


def _sweep(score_set: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) over the full candidate sweep, in increasing
    threshold order. Accept rule: score >= threshold."""
    target, nontarget = _split_scores(score_set)
    uniq = np.unique(score_set.scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    sorted_t = np.sort(target)
    sorted_n = np.sort(nontarget)
    frr = np.searchsorted(sorted_t, thresholds, side="left") / target.size
    far = (nontarget.size - np.searchsorted(sorted_n, thresholds, side="left")) / nontarget.size
    return thresholds, far, frr


def eer(score_set: ScoreSet) -> tuple[float, float]:
    """(EER, threshold) at the sweep point minimizing |FAR - FRR|.

    EER is reported as (FAR + FRR) / 2 there; ties keep the lowest
    threshold.
    """
    thresholds, far, frr = _sweep(score_set)
    idx = int(np.argmin(np.abs(far - frr)))
    return (far[idx] + frr[idx]) / 2.0, float(thresholds[idx])


def min_dcf(score_set: ScoreSet, p_target: float = 0.01,
            c_miss: float = 1.0, c_fa: float = 1.0) -> tuple[float, float]:
    """(normalized minimum detection cost, threshold).

    Cost: c_miss * p_target * FRR + c_fa * (1 - p_target) * FAR, minimized
    over the sweep and normalized by min(c_miss * p_target,
    c_fa * (1 - p_target)).
    """
    if not (0.0 < p_target < 1.0):
        raise ParameterError(f"p_target must be in (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise ParameterError("c_miss and c_fa must be > 0")
    thresholds, far, frr = _sweep(score_set)
    costs = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    idx = int(np.argmin(costs))
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return costs[idx] / norm, float(thresholds[idx])


def det_points(score_set: ScoreSet) -> np.ndarray:
    """(FAR, FRR) per swept threshold, in increasing threshold order: a
    staircase from (1, 0) to (0, 1)."""
    _, far, frr = _sweep(score_set)
    return np.column_stack([far, frr])


def project_2d(embeddings) -> np.ndarray:
    """Center the rows and project onto the top-2 principal directions.

    Uses orthogonal iteration with a fixed seed and iteration count; the
    output basis is orthonormal, components are ordered by projected
    variance, and each component's largest-magnitude loading is made
    positive. Deterministic for identical input.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ShapeError("need >= 2 embeddings of dim >= 2")
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0):
        raise DegenerateInputError("rank-0 data: all embeddings identical")
    cov = centered.T @ centered / x.shape[0]
    q = Rng(_PCA_SEED).normal((x.shape[1], 2))
    for _ in range(_PCA_ITERATIONS):
        q, _ = np.linalg.qr(cov @ q)
    coords = centered @ q
    order = np.argsort(-coords.var(axis=0), kind="stable")
    q = q[:, order]
    for j in range(2):
        if q[np.argmax(np.abs(q[:, j])), j] < 0:
            q[:, j] = -q[:, j]
    return centered @ q


def write_projection_csv(path, ids, speakers, coords) -> None:
    """CSV `id,speaker,x,y` for external plotting."""
    coords = np.asarray(coords)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,speaker,x,y\n")
        for ident, spk, (px, py) in zip(ids, speakers, coords):
            fh.write(f"{ident},{spk},{px!r},{py!r}\n")


def write_scores(score_set: ScoreSet, path) -> None:
    """Score file: `<enroll_id> <test_id> <score>` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for t, s in zip(score_set.trials, score_set.scores):
            fh.write(f"{t.enroll_id} {t.test_id} {float(s)!r}\n")


def relative_reduction(baseline: float, value: float) -> float:
    """(baseline - value) / baseline, or 0 when the baseline is 0."""
    return (baseline - value) / baseline if baseline > 0 else 0.0


@dataclass(frozen=True)
class MetricsReport:
    """EER/minDCF per system and condition, plus reductions vs baseline."""

    conditions: tuple[str, ...]
    systems: tuple[str, ...]
    p_target: float
    c_miss: float
    c_fa: float
    # rows[system][condition] = {eer, min_dcf, eer_rel_reduction, ...}
    rows: dict
    trial_counts: dict

    def to_json_dict(self) -> dict:
        return {
            "dcf_params": {"p_target": self.p_target, "c_miss": self.c_miss,
                           "c_fa": self.c_fa,
                           "note": "p_target default is an assumption; configure per task"},
            "conditions": list(self.conditions),
            "systems": list(self.systems),
            "trial_counts": self.trial_counts,
            "rows": self.rows,
        }

    def to_table(self) -> str:
        header = ["system"]
        for cond in self.conditions:
            header += [f"{cond}.eer%", f"{cond}.mindcf", f"{cond}.eer_rr%", f"{cond}.dcf_rr%"]
        lines = [header]
        for name in self.systems:
            row = [name]
            for cond in self.conditions:
                m = self.rows[name][cond]
                row += [f"{100 * m['eer']:.2f}", f"{m['min_dcf']:.3f}",
                        f"{100 * m['eer_rel_reduction']:.1f}",
                        f"{100 * m['min_dcf_rel_reduction']:.1f}"]
            lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
        out = []
        for r in lines:
            out.append("  ".join(val.ljust(w) for val, w in zip(r, widths)).rstrip())
        return "\n".join(out) + "\n"


def compare_report(systems: dict[str, dict[str, ScoreSet]],
                   p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0,
                   baseline_name: str = "baseline") -> MetricsReport:
    """Tabulate EER/minDCF per system and condition with relative
    reductions against the baseline system.

    All systems must be scored on identical trial lists per condition.
    """
    if baseline_name not in systems:
        raise ParameterError(f"no system named {baseline_name!r} to compare against")
    names = list(systems)
    conditions = list(systems[baseline_name])
    for name in names:
        if list(systems[name]) != conditions:
            raise ParameterError(f"system {name!r} has different conditions")
        for cond in conditions:
            if systems[name][cond].trials != systems[baseline_name][cond].trials:
                raise ParameterError(f"trial lists differ for {name!r}/{cond}")

    metrics = {
        name: {cond: {"eer": eer(ss)[0],
                      "min_dcf": min_dcf(ss, p_target, c_miss, c_fa)[0]}
               for cond, ss in by_cond.items()}
        for name, by_cond in systems.items()
    }
    rows = {}
    for name in names:
        rows[name] = {}
        for cond in conditions:
            base = metrics[baseline_name][cond]
            m = metrics[name][cond]
            rows[name][cond] = {
                "eer": m["eer"],
                "min_dcf": m["min_dcf"],
                "eer_rel_reduction": relative_reduction(base["eer"], m["eer"]),
                "min_dcf_rel_reduction": relative_reduction(base["min_dcf"], m["min_dcf"]),
            }
    counts = {}
    for cond in conditions:
        labels = systems[baseline_name][cond].labels
        counts[cond] = {"target": int(labels.sum()), "nontarget": int((~labels).sum())}
    return MetricsReport(conditions=tuple(conditions), systems=tuple(names),
                         p_target=p_target, c_miss=c_miss, c_fa=c_fa,
                         rows=rows, trial_counts=counts)
