"""Transfer-learning losses with values and analytical student-side gradients.

Seven losses: cross entropy, teacher/student KL, three embedding distance
losses (MSE, cosine, MMD), the teacher-anchored contrastive loss, and the
instance-level pairwise Gram loss. Each returns a :class:`LossOutput` whose
gradients are taken w.r.t. the student-side argument only (the teacher is
a frozen reference). `combined_loss` forms the weighted CE + transfer
objectives used for student training.

Conventions:
  * batch dimension B indexes aligned near/far pairs; row i of the teacher
    and student matrices belong to the same pair,
  * all values are means over the batch (and over entries for MSE),
  * KL uses 0 * log(0/q) = 0; teacher probabilities are floored at 1e-12
    inside the log to avoid -inf,
  * the contrastive denominator includes the positive pair by default
    (bounded-below InfoNCE form); set include_positive=False for the
    negatives-only variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatchError,
    DegenerateInputError,
    LabelError,
    NumericError,
    ParameterError,
    ShapeError,
)
from .numerics import as_matrix, gram, l2_normalize_rows, log_softmax, softmax

POSTERIOR_ROW_TOL = 1e-9
_KL_FLOOR = 1e-12


@dataclass(frozen=True)
class LossOutput:
    """Scalar loss plus gradients w.r.t. the differentiated student inputs.

    `grad_embeddings` is B x F (or None when the loss does not touch
    embeddings); `grad_logits` is B x C (or None). `components` carries the
    unweighted per-component values for combined losses, for logging.
    """

    value: float
    grad_embeddings: np.ndarray | None = None
    grad_logits: np.ndarray | None = None
    components: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the transfer terms in the combined objectives."""

    lambda1: float = 0.1
    lambda2: float = 10.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LabeledBatch:
    """One aligned teacher/student batch with labels.

    teacher_embeddings, student_embeddings: B x F
    student_logits: B x C
    teacher_posteriors: B x C, rows sum to 1
    labels: B speaker indices in [0, C)
    """

    teacher_embeddings: np.ndarray
    student_embeddings: np.ndarray
    student_logits: np.ndarray
    teacher_posteriors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        t = as_matrix(self.teacher_embeddings, "teacher_embeddings")
        s = as_matrix(self.student_embeddings, "student_embeddings")
        logits = as_matrix(self.student_logits, "student_logits")
        post = as_matrix(self.teacher_posteriors, "teacher_posteriors")
        labels = np.asarray(self.labels, dtype=np.int64)
        b = t.shape[0]
        if not (s.shape[0] == logits.shape[0] == post.shape[0] == labels.shape[0] == b):
            raise ShapeError("batch size disagrees across LabeledBatch fields")
        if t.shape != s.shape:
            raise ShapeError(f"embedding shapes differ: {t.shape} vs {s.shape}")
        if logits.shape != post.shape:
            raise ShapeError(f"logit/posterior shapes differ: {logits.shape} vs {post.shape}")
        if np.max(np.abs(post.sum(axis=1) - 1.0)) > POSTERIOR_ROW_TOL:
            raise ParameterError("teacher posterior rows must sum to 1")
        c = logits.shape[1]
        if labels.min() < 0 or labels.max() >= c:
            raise LabelError(f"labels must lie in [0, {c})")
        object.__setattr__(self, "teacher_embeddings", t)
        object.__setattr__(self, "student_embeddings", s)
        object.__setattr__(self, "student_logits", logits)
        object.__setattr__(self, "teacher_posteriors", post)
        object.__setattr__(self, "labels", labels)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim != 1 or lab.size == 0:
        raise ShapeError("labels must be a non-empty 1-D array")
    if lab.min() < 0 or lab.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return lab


def ce_loss(student_logits, labels) -> LossOutput:
    """Mean cross entropy of softmax(logits) against integer labels.

    value = -(1/B) sum_i log softmax(logits_i)[label_i]
    grad_logits = (softmax(logits) - onehot(labels)) / B
    """
    logits = as_matrix(student_logits, "student_logits")
    b, c = logits.shape
    lab = _check_labels(labels, c)
    logp = log_softmax(logits)
    value = -float(np.mean(logp[np.arange(b), lab]))
    grad = softmax(logits)
    grad[np.arange(b), lab] -= 1.0
    return LossOutput(value=value, grad_logits=grad / b)


def kl_ts_loss(teacher_posteriors, student_logits, temperature: float = 1.0) -> LossOutput:
    """Mean KL(teacher || student) with a temperature on the student logits.

    value = (1/B) sum_i sum_c p_t(c) * log(p_t(c) / p_s(c)),
    p_s = softmax(logits / T). Terms with p_t(c) = 0 contribute 0.
    grad_logits = (p_s - p_t) / (B * T).
    """
    if not np.isfinite(temperature) or temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    post = as_matrix(teacher_posteriors, "teacher_posteriors")
    logits = as_matrix(student_logits, "student_logits")
    if post.shape != logits.shape:
        raise ShapeError(f"shape mismatch: {post.shape} vs {logits.shape}")
    if np.any(post < 0) or np.max(np.abs(post.sum(axis=1) - 1.0)) > POSTERIOR_ROW_TOL:
        raise ParameterError("teacher posterior rows must be distributions")
    b = post.shape[0]
    logp_s = log_softmax(logits / temperature)
    terms = np.where(post > 0, post * (np.log(np.maximum(post, _KL_FLOOR)) - logp_s), 0.0)
    value = float(terms.sum() / b)
    p_s = softmax(logits / temperature)
    grad = (p_s - post) / (b * temperature)
    return LossOutput(value=value, grad_logits=grad)


def feat_mse_loss(teacher_embeddings, student_embeddings) -> LossOutput:
    """Entry-mean squared distance between teacher and student embeddings."""
    t = as_matrix(teacher_embeddings, "teacher_embeddings")
    s = as_matrix(student_embeddings, "student_embeddings")
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {s.shape}")
    n = t.size
    diff = s - t
    value = float(np.sum(diff * diff) / n)
    return LossOutput(value=value, grad_embeddings=2.0 * diff / n)


def feat_cosine_loss(teacher_embeddings, student_embeddings) -> LossOutput:
    """Mean (1 - cosine similarity) over aligned embedding rows."""
    t = as_matrix(teacher_embeddings, "teacher_embeddings")
    s = as_matrix(student_embeddings, "student_embeddings")
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {s.shape}")
    tn = np.linalg.norm(t, axis=1)
    sn = np.linalg.norm(s, axis=1)
    if np.any(tn == 0.0) or np.any(sn == 0.0):
        raise DegenerateInputError("cosine loss undefined for zero-norm rows")
    b = t.shape[0]
    dots = np.sum(t * s, axis=1)
    cos = dots / (tn * sn)
    value = float(np.mean(1.0 - cos))
    # d(1 - cos)/ds_i = cos_i * s_i / ||s_i||^2 - t_i / (||t_i|| ||s_i||)
    grad = (cos / sn**2)[:, None] * s - t / (tn * sn)[:, None]
    return LossOutput(value=value, grad_embeddings=grad / b)


def _rbf_bandwidth(t: np.ndarray, s: np.ndarray, bandwidth) -> float:
    if bandwidth == "median":
        joint = np.vstack([t, s])
        sq = np.sum((joint[:, None, :] - joint[None, :, :]) ** 2, axis=2)
        d = np.sqrt(sq[np.triu_indices(joint.shape[0], k=1)])
        med = float(np.median(d)) if d.size else 0.0
        return med if med > 0 else 1.0
    try:
        bw = float(bandwidth)
    except (TypeError, ValueError):
        raise ParameterError(f"invalid rbf bandwidth: {bandwidth!r}") from None
    if not np.isfinite(bw) or bw <= 0:
        raise ParameterError(f"rbf bandwidth must be > 0, got {bandwidth}")
    return bw


def feat_mmd_loss(teacher_embeddings, student_embeddings, kernel: str = "linear",
                  bandwidth="median") -> LossOutput:
    """Maximum mean discrepancy between the two embedding batches.

    kernel="linear": squared distance of batch means, ||mean(t) - mean(s)||^2.
    kernel="rbf": biased MMD^2 estimator with k(x, y) =
    exp(-||x - y||^2 / (2 * bw^2)); bandwidth is a positive float or
    "median" (median pairwise distance over the stacked batches, treated as
    a constant for the gradient).
    """
    t = as_matrix(teacher_embeddings, "teacher_embeddings")
    s = as_matrix(student_embeddings, "student_embeddings")
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {s.shape}")
    b = t.shape[0]
    if kernel == "linear":
        delta = t.mean(axis=0) - s.mean(axis=0)
        value = float(np.dot(delta, delta))
        grad = np.tile(-2.0 * delta / b, (b, 1))
        return LossOutput(value=value, grad_embeddings=grad)
    if kernel != "rbf":
        raise ParameterError(f"unknown mmd kernel: {kernel!r}")
    bw = _rbf_bandwidth(t, s, bandwidth)
    gamma = 1.0 / (2.0 * bw * bw)

    def k(x, y):
        sq = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
        return np.exp(-gamma * sq)

    ktt = k(t, t)
    kss = k(s, s)
    kts = k(t, s)
    value = float(ktt.mean() + kss.mean() - 2.0 * kts.mean())
    # d k(x, y)/dy = k(x, y) * (x - y) / bw^2
    grad = np.zeros_like(s)
    inv = 2.0 * gamma
    # ss block: sum_{ij} k(s_i, s_j) contributes 2 * sum_j k(s_a, s_j)(s_j - s_a)
    grad += inv * 2.0 * (kss @ s - kss.sum(axis=1)[:, None] * s) / (b * b)
    # ts block: -2 sum_i k(t_i, s_a)(t_i - s_a)
    grad += inv * -2.0 * (kts.T @ t - kts.sum(axis=0)[:, None] * s) / (b * b)
    return LossOutput(value=value, grad_embeddings=grad)


def contrastive_ts_loss(teacher_embeddings, student_embeddings, labels,
                        normalize: bool = False,
                        include_positive: bool = True) -> LossOutput:
    """Teacher-anchored contrastive loss over one batch of aligned pairs.

    Anchor i is the teacher embedding t_i; its positive is the student
    embedding at the same index; its negatives are the student embeddings
    with a different label. Per anchor:

        -log exp(<t_i, s_i>) / sum_{a in D(i)} exp(<t_i, s_a>)

    where D(i) is the negatives plus, when include_positive, the positive
    itself. Same-label rows at other indices are excluded. The denominator
    is evaluated via log-sum-exp; with normalize on, both batches are row
    L2-normalized first and the gradient is chained through the student
    normalization.
    """
    t = as_matrix(teacher_embeddings, "teacher_embeddings")
    s = as_matrix(student_embeddings, "student_embeddings")
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {s.shape}")
    b = t.shape[0]
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},)")
    if b < 2 or np.unique(lab).size < 2:
        raise DegenerateBatchError("contrastive loss needs >= 2 distinct labels in the batch")

    if normalize:
        tn = l2_normalize_rows(t)
        sn = l2_normalize_rows(s)
    else:
        tn, sn = t, s

    z = tn @ sn.T  # z[i, a] = <t_i, s_a>
    mask = lab[None, :] != lab[:, None]
    if include_positive:
        np.fill_diagonal(mask, True)
    masked = np.where(mask, z, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    w = np.exp(masked - row_max)
    denom = w.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    value = float(np.mean(lse - np.diag(z)))

    g_z = w / denom  # softmax over each anchor's denominator set
    g_z[np.arange(b), np.arange(b)] -= 1.0
    grad_sn = (g_z.T @ tn) / b
    if normalize:
        s_norms = np.linalg.norm(s, axis=1, keepdims=True)
        grad = (grad_sn - np.sum(grad_sn * sn, axis=1, keepdims=True) * sn) / s_norms
    else:
        grad = grad_sn
    return LossOutput(value=value, grad_embeddings=grad)


def instance_pairwise_loss(teacher_embeddings, student_embeddings) -> LossOutput:
    """Mean squared difference of the two within-batch Gram matrices.

    d_t = T T', d_s = S S'; value = (1/B^2) sum_{ij} (d_s - d_t)_{ij}^2;
    grad w.r.t. the student batch = (4/B^2) (d_s - d_t) S. The teacher side
    is a constant.
    """
    t = as_matrix(teacher_embeddings, "teacher_embeddings")
    s = as_matrix(student_embeddings, "student_embeddings")
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {s.shape}")
    b = t.shape[0]
    diff = gram(s) - gram(t)
    value = float(np.sum(diff * diff) / (b * b))
    grad = 4.0 / (b * b) * (diff @ s)
    return LossOutput(value=value, grad_embeddings=grad)


# Recipe name -> transfer components combined with cross entropy. Component
# weights: "fprime" takes lambda1, "instance" takes lambda2, the comparison
# losses (kl / cos / mse / mmd) enter at weight 1 in the classic CE + aux form.
RECIPES: dict[str, tuple[str, ...]] = {
    "ce": (),
    "ce_kl": ("kl",),
    "ce_cos": ("cos",),
    "ce_mse": ("mse",),
    "ce_mmd": ("mmd",),
    "ce_fprime": ("fprime",),
    "ce_instance": ("instance",),
    "ce_fprime_instance": ("fprime", "instance"),
}


def combined_loss(batch: LabeledBatch, weights: LossWeights, recipe: str) -> LossOutput:
    """Cross entropy plus the recipe's weighted transfer terms.

    Gradients are the matching weighted sums of the component gradients;
    `components` maps each component name to its unweighted value.
    """
    if recipe not in RECIPES:
        raise ParameterError(f"unknown recipe {recipe!r}; expected one of {sorted(RECIPES)}")
    ce = ce_loss(batch.student_logits, batch.labels)
    value = ce.value
    components = {"ce": ce.value}
    grad_logits = ce.grad_logits.copy()
    grad_emb: np.ndarray | None = None

    def add_emb(g: np.ndarray, w: float):
        nonlocal grad_emb
        if grad_emb is None:
            grad_emb = np.zeros_like(batch.student_embeddings)
        grad_emb += w * g

    for comp in RECIPES[recipe]:
        if comp == "kl":
            out, w = kl_ts_loss(batch.teacher_posteriors, batch.student_logits), 1.0
            grad_logits += w * out.grad_logits
        elif comp == "cos":
            out, w = feat_cosine_loss(batch.teacher_embeddings, batch.student_embeddings), 1.0
            add_emb(out.grad_embeddings, w)
        elif comp == "mse":
            out, w = feat_mse_loss(batch.teacher_embeddings, batch.student_embeddings), 1.0
            add_emb(out.grad_embeddings, w)
        elif comp == "mmd":
            out, w = feat_mmd_loss(batch.teacher_embeddings, batch.student_embeddings), 1.0
            add_emb(out.grad_embeddings, w)
        elif comp == "fprime":
            out = contrastive_ts_loss(batch.teacher_embeddings, batch.student_embeddings,
                                      batch.labels)
            w = weights.lambda1
            add_emb(out.grad_embeddings, w)
        elif comp == "instance":
            out = instance_pairwise_loss(batch.teacher_embeddings, batch.student_embeddings)
            w = weights.lambda2
            add_emb(out.grad_embeddings, w)
        else:  # pragma: no cover - RECIPES is the single source of names
            raise ParameterError(f"unknown component {comp!r}")
        value += w * out.value
        components[comp] = out.value
    return LossOutput(value=value, grad_embeddings=grad_emb, grad_logits=grad_logits,
                      components=components)


def grad_check(fn, x, grad, step: float = 1e-5) -> float:
    """Max relative error of `grad` against central differences of `fn` at `x`.

    fn maps an array like `x` to a scalar. Per coordinate the numerical
    gradient is (fn(x + h e) - fn(x - h e)) / 2h and the relative error is
    |a - n| / max(|a|, |n|, 1e-8). Raises NumericError if a perturbed
    evaluation is non-finite.
    """
    x = np.array(x, dtype=np.float64)  # private copy; coordinates are perturbed in place
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ShapeError(f"gradient shape {grad.shape} != input shape {x.shape}")
    worst = 0.0
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = float(fn(x))
        flat[idx] = orig - step
        fm = float(fn(x))
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("loss non-finite at a perturbed point")
        numeric = (fp - fm) / (2.0 * step)
        analytic = gflat[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
