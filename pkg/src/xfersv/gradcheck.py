"""Randomized gradient verification for every loss and the full model.

Each named check draws small random instances (B <= 6, dims <= 8) and
compares the analytical gradient against central finite differences. The
end-to-end check differentiates the combined training loss w.r.t. every
model parameter; it uses tanh so the loss surface is smooth everywhere
(relu's kink makes central differences invalid on a measure-zero set, which
random instances can land near).
"""

from __future__ import annotations

import numpy as np

from .losses import (
    LabeledBatch,
    LossWeights,
    ce_loss,
    combined_loss,
    contrastive_ts_loss,
    feat_cosine_loss,
    feat_mmd_loss,
    feat_mse_loss,
    grad_check,
    instance_pairwise_loss,
    kl_ts_loss,
)
from .model import (
    ExtractorConfig,
    backward,
    forward,
    grads_to_vector,
    init_params,
    params_to_vector,
    vector_to_params,
)
from .numerics import Rng, softmax

DEFAULT_THRESHOLD = 1e-4
DEFAULT_STEP = 1e-5


def _labels_with_two_speakers(gen, b, c):
    while True:
        lab = gen.integers(0, c, size=b)
        if np.unique(lab).size >= 2:
            return lab


def _loss_checks(gen, fault: float):
    b = int(gen.integers(2, 7))
    f = int(gen.integers(2, 9))
    c = int(gen.integers(2, 9))
    t = gen.normal(size=(b, f))
    s = gen.normal(size=(b, f))
    logits = gen.normal(size=(b, c))
    post = gen.dirichlet(np.ones(c), size=b)
    labels = _labels_with_two_speakers(gen, b, c)

    def perturb(g):
        return g + fault if fault else g

    yield "ce", (lambda z: ce_loss(z, labels).value), logits, \
        perturb(ce_loss(logits, labels).grad_logits)
    yield "kl", (lambda z: kl_ts_loss(post, z).value), logits, \
        perturb(kl_ts_loss(post, logits).grad_logits)
    yield "mse", (lambda x: feat_mse_loss(t, x).value), s, \
        perturb(feat_mse_loss(t, s).grad_embeddings)
    yield "cosine", (lambda x: feat_cosine_loss(t, x).value), s, \
        perturb(feat_cosine_loss(t, s).grad_embeddings)
    kernel = "linear" if gen.integers(0, 2) == 0 else "rbf"
    kwargs = {"kernel": kernel} if kernel == "linear" else {"kernel": "rbf", "bandwidth": 1.5}
    yield "mmd", (lambda x: feat_mmd_loss(t, x, **kwargs).value), s, \
        perturb(feat_mmd_loss(t, s, **kwargs).grad_embeddings)
    yield "contrastive", (lambda x: contrastive_ts_loss(t, x, labels).value), s, \
        perturb(contrastive_ts_loss(t, s, labels).grad_embeddings)
    yield "instance_pairwise", (lambda x: instance_pairwise_loss(t, x).value), s, \
        perturb(instance_pairwise_loss(t, s).grad_embeddings)


def _end_to_end_check(gen, fault: float):
    cfg = ExtractorConfig(input_dim=int(gen.integers(2, 7)),
                          hidden_dims=(int(gen.integers(2, 9)),),
                          embedding_dim=int(gen.integers(2, 7)),
                          num_speakers=int(gen.integers(2, 6)),
                          activation="tanh")
    b = int(gen.integers(2, 7))
    feats_near = gen.normal(size=(b, cfg.input_dim))
    feats_far = gen.normal(size=(b, cfg.input_dim))
    labels = _labels_with_two_speakers(gen, b, cfg.num_speakers)
    teacher = init_params(cfg, Rng(int(gen.integers(0, 2**32))), role="teacher")
    student = init_params(cfg, Rng(int(gen.integers(0, 2**32))), role="student")
    weights = LossWeights()
    t_emb, t_logits, _ = forward(teacher, feats_near)
    post = softmax(t_logits)

    def loss_of(vec):
        params = vector_to_params(cfg, vec)
        s_emb, s_logits, _ = forward(params, feats_far)
        batch = LabeledBatch(teacher_embeddings=t_emb, student_embeddings=s_emb,
                             student_logits=s_logits, teacher_posteriors=post,
                             labels=labels)
        return combined_loss(batch, weights, "ce_fprime_instance").value

    s_emb, s_logits, cache = forward(student, feats_far)
    batch = LabeledBatch(teacher_embeddings=t_emb, student_embeddings=s_emb,
                         student_logits=s_logits, teacher_posteriors=post, labels=labels)
    out = combined_loss(batch, weights, "ce_fprime_instance")
    grads = backward(student, cache, out.grad_embeddings, out.grad_logits)
    analytic = grads_to_vector(grads) + (fault if fault else 0.0)
    return loss_of, params_to_vector(student), analytic


def run_suite(seed: int = 0, trials: int = 100, step: float = DEFAULT_STEP,
              threshold: float = DEFAULT_THRESHOLD,
              inject_fault: bool = False) -> dict[str, float]:
    """Max relative gradient error per check over `trials` random instances.

    `inject_fault` perturbs every analytical gradient by a constant offset;
    it exists to prove the harness actually detects wrong gradients.
    """
    fault = 1e-2 if inject_fault else 0.0
    worst: dict[str, float] = {}
    for i in range(trials):
        gen = np.random.default_rng((seed, i))
        for name, fn, x, grad in _loss_checks(gen, fault):
            err = grad_check(fn, x, grad, step=step)
            worst[name] = max(worst.get(name, 0.0), err)
        fn, x, grad = _end_to_end_check(gen, fault)
        err = grad_check(fn, x, grad, step=step)
        worst["model_end_to_end"] = max(worst.get("model_end_to_end", 0.0), err)
    return worst


def format_summary(worst: dict[str, float], threshold: float = DEFAULT_THRESHOLD) -> str:
    lines = []
    for name in sorted(worst):
        status = "ok" if worst[name] < threshold else "FAIL"
        lines.append(f"{name:20s} max_rel_err {worst[name]:.3e}  {status}")
    return "\n".join(lines) + "\n"
