"""Finite-difference verification of every differentiable op and of the
full combined loss on a tiny two-modality model."""

from __future__ import annotations

import numpy as np

from . import losses, models, tensor as T
from .tensor import Parameter, Tensor, grad_check

TOLERANCE = 1e-4


def _param(rng, shape, name):
    # keep magnitudes away from relu kinks and log domain edges
    return Parameter(name, rng.uniform(0.2, 1.5, size=shape))


def _op_checks(seed=0):
    """(name, report) pairs for every primitive op."""
    rng = np.random.default_rng(seed)
    checks = []

    a = _param(rng, (4, 5), "a")
    b = _param(rng, (5, 3), "b")
    checks.append(("matmul", grad_check(
        lambda t: T.tsum(T.matmul(a.node(t), b.node(t))), [a, b])))

    x = _param(rng, (3, 4), "x")
    y = _param(rng, (3, 4), "y")
    for name, fn in [
        ("add", lambda t: T.tsum(T.mul(T.add(x.node(t), y.node(t)), y.node(t)))),
        ("sub", lambda t: T.tsum(T.mul(T.sub(x.node(t), y.node(t)), y.node(t)))),
        ("mul", lambda t: T.tsum(T.mul(x.node(t), y.node(t)))),
    ]:
        checks.append((name, grad_check(fn, [x, y])))

    for name, op in [("relu", T.relu), ("tanh", T.tanh), ("exp", T.exp),
                     ("log", T.log)]:
        p = _param(rng, (3, 4), name + "_in")
        if name in ("relu", "tanh"):
            # exercise both branches, keeping values away from the relu kink
            p.value *= rng.choice([-1.0, 1.0], size=p.value.shape)
        checks.append((name, grad_check(
            lambda t, p=p, op=op: T.tsum(T.mul(op(p.node(t)), p.node(t))),
            [p])))

    p = _param(rng, (3, 4), "scale_in")
    checks.append(("scale", grad_check(
        lambda t: T.tsum(T.scale(T.mul(p.node(t), p.node(t)), 2.5)), [p])))

    q = _param(rng, (4, 6), "reduce_in")
    checks.append(("sum", grad_check(
        lambda t: T.tsum(T.mul(q.node(t), q.node(t))), [q])))
    checks.append(("mean", grad_check(
        lambda t: T.tmean(T.mul(q.node(t), q.node(t))), [q])))
    checks.append(("mean_over_axis", grad_check(
        lambda t: T.tsum(T.mul(T.mean_over_axis(
            T.reshape(q.node(t), (2, 2, 6)), 1), Tensor(np.ones((2, 6))))),
        [q])))

    r = _param(rng, (2, 5), "norm_in")
    checks.append(("l2_normalize", grad_check(
        lambda t: T.tsum(T.mul(T.l2_normalize(r.node(t)),
                               Tensor(np.arange(10.0).reshape(2, 5)))), [r])))

    s = _param(rng, (3, 6), "softmax_in")
    tgt = np.array([0, 2, 5])
    checks.append(("log_softmax_rows", grad_check(
        lambda t: T.tsum(T.take_per_row(T.log_softmax_rows(
            T.scale(s.node(t), 3.0)), tgt)), [s])))

    u = _param(rng, (4, 3), "rowvec_x")
    v = _param(rng, (3,), "rowvec_v")
    checks.append(("add_rowvec", grad_check(
        lambda t: T.tsum(T.mul(T.add_rowvec(u.node(t), v.node(t)),
                               u.node(t))), [u, v])))

    w = _param(rng, (4, 3), "transpose_in")
    checks.append(("transpose", grad_check(
        lambda t: T.tsum(T.mul(T.transpose(w.node(t)),
                               Tensor(np.ones((3, 4)) * 0.5))), [w])))
    checks.append(("reshape", grad_check(
        lambda t: T.tsum(T.mul(T.reshape(w.node(t), (2, 6)),
                               Tensor(np.arange(12.0).reshape(2, 6)))), [w])))

    g = _param(rng, (5, 3), "gather_in")
    checks.append(("take_rows", grad_check(
        lambda t: T.tsum(T.mul(T.take_rows(g.node(t), [0, 2, 2, 4]),
                               Tensor(np.ones((4, 3))))), [g])))
    checks.append(("take_per_row", grad_check(
        lambda t: T.tsum(T.take_per_row(T.mul(g.node(t), g.node(t)),
                                        [0, 1, 2, 0, 1])), [g])))
    return checks


def _loss_checks(seed=1):
    rng = np.random.default_rng(seed)
    checks = []

    v = _param(rng, (4, 6), "scores_v")
    c = _param(rng, (3, 6), "scores_c")
    tgt = np.array([0, 2, 1, 2])
    checks.append(("similarity+cls_loss", grad_check(
        lambda t: losses.cls_loss(
            losses.similarity_scores(v.node(t), c.node(t)), tgt, tau=0.7),
        [v, c])))

    a = _param(rng, (4, 5), "cl_a")
    b = _param(rng, (4, 5), "cl_b")
    checks.append(("cl_loss", grad_check(
        lambda t: losses.cl_loss(a.node(t), b.node(t), tau=0.8), [a, b])))
    return checks


def _full_loss_check(seed=2):
    """Full combined loss on a tiny 2-modality model: stage 0 frozen,
    stage 1 + its mapping head trainable."""
    rng = np.random.default_rng(seed)
    batch = 4
    frames = 2
    d_obs0, d_obs1 = 5, 4
    stage0 = models.init_stage(0, d_obs0, 6, 5, 4, seed=11)
    stage0.freeze()
    stage1 = models.init_stage(1, d_obs1, 6, 5, 4, seed=12)
    mh = models.init_mapping_head(0, 1, 5, 6, 5, seed=13)
    embedder = models.FrozenTextEmbedder(["eating", "drinking", "driving"],
                                         d_text=8, seed=3)
    text_head = models.init_text_head(8, 6, 4, seed=14)
    models._set_frozen(text_head.params())

    x0 = np.ascontiguousarray(rng.standard_normal((batch, frames, d_obs0)))
    x1 = np.ascontiguousarray(rng.standard_normal((batch, frames, d_obs1)))
    targets = np.array([0, 1, 2, 0])
    weights = losses.LossWeights(lam=0.5, eps=0.5, omega=[1.0], tau=1.0)

    def full_loss(tape):
        f0 = stage0.encoder(tape, Tensor(x0))
        f1 = stage1.encoder(tape, Tensor(x1))
        v1 = stage1.head(tape, f1)
        class_embeds = text_head(tape, Tensor(embedder.embed_vocab()))
        scores = losses.similarity_scores(v1, class_embeds)
        l_cls = losses.cls_loss(scores, targets, weights.tau_cls)
        w_batch = T.take_rows(class_embeds, targets)
        l_text = losses.text_loss(w_batch, v1, weights.tau)
        l_prompt = losses.prompt_loss([mh(tape, f0)], f1, weights.omega,
                                      weights.tau)
        return losses.total_loss(l_cls, l_text, l_prompt, weights)

    params = stage1.params() + mh.params()
    return [("full_combined_loss", grad_check(full_loss, params))]


def run_suite(tolerance=TOLERANCE):
    """Returns list of (name, max_error, passed). Covers every op plus the
    full combined loss on a tiny model."""
    results = []
    for name, report in _op_checks() + _loss_checks() + _full_loss_check():
        err = max(report.values()) if report else 0.0
        results.append((name, err, err <= tolerance))
    return results
