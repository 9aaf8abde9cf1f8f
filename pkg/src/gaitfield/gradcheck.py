"""Finite-difference checks of every hand-written reverse pass.

Each suite builds a tiny float64 instance, compares analytic gradients
against central differences and reports the largest elementwise relative
error over parameters and inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import (
    HeadConfig,
    GaitModel,
    batch_loss,
    cross_entropy_loss,
    embed_backward,
    embed_forward,
    fuse_backward,
    fuse_forward,
    init_model,
    triplet_loss,
)
from .matching import branch_backward, branch_forward, init_branch
from .tensor import finite_difference_grad, relative_error

TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _perturb(arrays, rng, scale=0.1):
    # move weights off their init so leaky kinks and ties are unlikely
    for a in arrays:
        a += rng.normal(scale=scale, size=a.shape)


def _tiny_model(rng: np.random.Generator, c_in: int = 4, channels: int = 3) -> GaitModel:
    cfg = HeadConfig(strips=2, embed_dim=3, num_classes=2, fusion_dim=3, backbone_dim=4)
    model = init_model(rng, c_in=c_in, channels=channels, delta_h=1, delta_w=1, delta_l=1, head=cfg,
                       suppress_m=0.3, suppress_p=0.5)
    _perturb([p for _, p in model.named_parameters()], rng)
    return model


def check_matching_branch(eps: float = 1e-5, seed: int = 0) -> GradcheckResult:
    """Weighted sum of a dynamic field w.r.t. both encoders and the input."""
    rng = np.random.default_rng(seed)
    branch = init_branch(rng, delta_l=1, c_in=3, channels=3, delta_h=1, delta_w=1)
    layers = [l for _, l in branch.layers()]
    _perturb([l.weights for l in layers] + [l.bias for l in layers], rng)
    x = rng.normal(size=(3, 5, 4, 3))
    m = (rng.random((3, 5, 4)) > 0.3).astype(np.float64)
    G, cache = branch_forward(x, m, branch)
    R = rng.normal(size=G.shape)
    dx, grads = branch_backward(R, cache)

    names = [n for n, _ in branch.layers()]
    params = [(n, l) for n, l in branch.layers()]
    analytic = np.concatenate([np.concatenate([grads[n][0].ravel(), grads[n][1].ravel()])
                               for n in names])
    flat0 = np.concatenate([np.concatenate([l.weights.ravel(), l.bias.ravel()]) for _, l in params])

    def load(flat):
        pos = 0
        for _, l in params:
            for arr in (l.weights, l.bias):
                arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
                pos += arr.size

    def loss_p(flat):
        load(flat)
        return float(np.sum(branch_forward(x, m, branch)[0] * R))

    numeric = finite_difference_grad(loss_p, flat0, eps)
    load(flat0)
    numeric_x = finite_difference_grad(
        lambda v: float(np.sum(branch_forward(v.reshape(x.shape), m, branch)[0] * R)), x, eps)
    err = max(relative_error(analytic, numeric), relative_error(dx, numeric_x))
    return GradcheckResult("matching_branch", err, analytic.size + x.size)


def _head_loss(model: GaitModel, fields: dict[str, np.ndarray], labels):
    B, Lp = next(iter(fields.values())).shape[:2]
    flat = {k: v.reshape(B * Lp, *v.shape[2:]) for k, v in fields.items()}
    fused, fcache = fuse_forward(flat, model.fusion)
    emb, logits, ecache = embed_forward(fused.reshape(B, Lp, *fused.shape[1:]), model.head)
    tl, demb, _ = triplet_loss(emb, labels, model.head.config.triplet_margin)
    ce, dlogits = cross_entropy_loss(logits, labels)
    return tl + ce, (demb, dlogits, fcache, ecache, B, Lp)


def check_fusion_head(eps: float = 1e-5, seed: int = 3) -> GradcheckResult:
    """Fusion gate, backbone, strip heads and both losses from given fields."""
    rng = np.random.default_rng(seed)
    model = _tiny_model(rng)
    labels = np.array([0, 0, 1, 1])
    fields = {b: rng.normal(size=(4, 2, 4, 4, 2)) for b in model.fusion.branches}
    _, (demb, dlogits, fcache, ecache, B, Lp) = _head_loss(model, fields, labels)
    dfused, grads = embed_backward(demb, dlogits, model.head, ecache)
    dfields, fgrads = fuse_backward(dfused.reshape(B * Lp, *dfused.shape[2:]), fcache)
    for k, (dw, db) in fgrads.items():
        grads[f"fusion.{k}.weights"] = dw
        grads[f"fusion.{k}.bias"] = db

    names = [n for n, _ in model.named_parameters() if n in grads]
    params = dict(model.named_parameters())
    analytic = np.concatenate([grads[n].ravel() for n in names])
    flat0 = np.concatenate([params[n].ravel() for n in names])

    def loss_p(flat):
        pos = 0
        for n in names:
            params[n][...] = flat[pos:pos + params[n].size].reshape(params[n].shape)
            pos += params[n].size
        return _head_loss(model, fields, labels)[0]

    numeric = finite_difference_grad(loss_p, flat0, eps)
    loss_p(flat0)
    err = relative_error(analytic, numeric)
    checked = analytic.size
    for b, f in fields.items():
        def loss_f(v, b=b):
            return _head_loss(model, {**fields, b: v.reshape(f.shape)}, labels)[0]
        err = max(err, relative_error(dfields[b].reshape(f.shape),
                                      finite_difference_grad(loss_f, f, eps)))
        checked += f.size
    return GradcheckResult("fusion_head", err, checked)


def check_full_pipeline(eps: float = 1e-5, seed: int = 2) -> GradcheckResult:
    """Training-mode loss, suppression included, w.r.t. all parameters and inputs."""
    rng = np.random.default_rng(seed)
    model = _tiny_model(rng, c_in=3, channels=2)
    X = rng.normal(size=(4, 3, 4, 4, 3))
    M = (rng.random((4, 3, 4, 4)) > 0.3).astype(np.float64)
    y = np.array([0, 0, 1, 1])

    def run(features):
        # a fresh generator per call keeps the suppression draws fixed
        return batch_loss(model, features, M, y, train=True, rng=np.random.default_rng(seed + 100))

    _, _, grads, dfeat = run(X)
    analytic = np.concatenate([grads[n].ravel() for n, _ in model.named_parameters()])
    flat0 = model.flat_parameters()

    def loss_p(flat):
        model.load_flat(flat)
        return run(X)[0]

    numeric = finite_difference_grad(loss_p, flat0, eps)
    model.load_flat(flat0)
    numeric_x = finite_difference_grad(lambda v: run(v.reshape(X.shape))[0], X, eps)
    err = max(relative_error(analytic, numeric), relative_error(dfeat, numeric_x))
    return GradcheckResult("full_pipeline", err, analytic.size + X.size)


SUITES = {
    "matching_branch": check_matching_branch,
    "fusion_head": check_fusion_head,
    "full_pipeline": check_full_pipeline,
}


def run_all(eps: float = 1e-5) -> list[GradcheckResult]:
    return [fn(eps) for fn in SUITES.values()]
