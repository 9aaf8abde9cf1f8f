"""Small recognition head on top of static/dynamic direction fields.

Pipeline per sequence::

    fields -> per-branch projection -> gated two-way fusion
           -> 2-layer conv backbone -> temporal max
           -> horizontal strips, spatial mean -> per-strip linear embedding
           -> per-strip classifier

Batches are arrays with a leading ``B`` (sequences) and ``L`` (frames) axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .matching import MatchingBranch, branch_backward, init_branch, pairs_forward, suppression_mask
from .tensor import (
    DEFAULT_SLOPE,
    ConvLayer,
    conv2d_backward,
    conv2d_forward,
    init_conv,
    softmax_rows,
    softmax_rows_backward,
    stack_backward,
    stack_forward,
)

BRANCH_ORDER = ("static", "dynamic")


@dataclass
class FusionBlock:
    projections: dict[str, ConvLayer]
    gate: ConvLayer | None = None

    def __post_init__(self):
        names = list(self.projections)
        if not names or any(n not in BRANCH_ORDER for n in names):
            raise ConfigError(f"fusion branches must be a non-empty subset of {BRANCH_ORDER}")
        if len(names) > 1 and self.gate is None:
            raise ConfigError("fusing two branches needs a gate layer")

    @property
    def branches(self) -> list[str]:
        return [b for b in BRANCH_ORDER if b in self.projections]


@dataclass
class HeadConfig:
    strips: int = 4
    embed_dim: int = 32
    num_classes: int = 8
    triplet_margin: float = 0.2
    fusion_dim: int = 16
    backbone_dim: int = 32

    def __post_init__(self):
        if self.strips < 1 or self.embed_dim < 1 or self.num_classes < 2:
            raise ConfigError("strips >= 1, embed_dim >= 1 and num_classes >= 2 required")
        if self.triplet_margin < 0:
            raise ConfigError("triplet margin must be non-negative")


@dataclass
class Head:
    backbone: list[ConvLayer]
    fc_w: np.ndarray      # (strips, D_b, D_e)
    fc_b: np.ndarray      # (strips, D_e)
    cls_w: np.ndarray     # (strips, D_e, classes)
    cls_b: np.ndarray     # (strips, classes)
    config: HeadConfig


@dataclass
class GaitModel:
    branches: dict[str, MatchingBranch]
    fusion: FusionBlock
    head: Head
    suppress_m: float = 0.5
    suppress_p: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def delta_l(self) -> int:
        return self.branches["dynamic"].delta_l if "dynamic" in self.branches else 0

    def named_parameters(self):
        """Yields ``(name, array)`` in a fixed order; arrays are live references."""
        for b in self.fusion.branches:
            for lname, layer in self.branches[b].layers():
                yield f"{b}.{lname}.weights", layer.weights
                yield f"{b}.{lname}.bias", layer.bias
        for b in self.fusion.branches:
            yield f"fusion.{b}.weights", self.fusion.projections[b].weights
            yield f"fusion.{b}.bias", self.fusion.projections[b].bias
        if self.fusion.gate is not None:
            yield "fusion.gate.weights", self.fusion.gate.weights
            yield "fusion.gate.bias", self.fusion.gate.bias
        for i, layer in enumerate(self.head.backbone):
            yield f"backbone.{i}.weights", layer.weights
            yield f"backbone.{i}.bias", layer.bias
        h = self.head
        yield "fc.weights", h.fc_w
        yield "fc.bias", h.fc_b
        yield "cls.weights", h.cls_w
        yield "cls.bias", h.cls_b

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.named_parameters()])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for _, p in self.named_parameters():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ConfigError(f"flat vector has {flat.size} entries, model has {pos}")


def init_model(rng: np.random.Generator, *, c_in: int = 4, channels: int = 16,
               delta_h: int = 3, delta_w: int = 3, delta_l: int = 1,
               branches=BRANCH_ORDER, head: HeadConfig | None = None,
               suppress_m: float = 0.5, suppress_p: float = 0.5,
               kernel: int = 3) -> GaitModel:
    head_cfg = head or HeadConfig()
    branches = [b for b in BRANCH_ORDER if b in branches]
    mb = {}
    for b in branches:
        mb[b] = init_branch(rng, 0 if b == "static" else delta_l, c_in, channels,
                            delta_h, delta_w, kernel)
    d_f, d_b = head_cfg.fusion_dim, head_cfg.backbone_dim
    proj = {b: init_conv(rng, 2, d_f, kernel, DEFAULT_SLOPE) for b in branches}
    gate = init_conv(rng, d_f * len(branches), len(branches), 1, None) if len(branches) > 1 else None
    backbone = [init_conv(rng, d_f, d_b, kernel, DEFAULT_SLOPE),
                init_conv(rng, d_b, d_b, kernel, DEFAULT_SLOPE)]
    s, d_e, n_cls = head_cfg.strips, head_cfg.embed_dim, head_cfg.num_classes
    fc_w = rng.uniform(-1, 1, size=(s, d_b, d_e)) * np.sqrt(3.0 / d_b)
    cls_w = rng.uniform(-1, 1, size=(s, d_e, n_cls)) * np.sqrt(3.0 / d_e)
    h = Head(backbone, fc_w, np.zeros((s, d_e)), cls_w, np.zeros((s, n_cls)), head_cfg)
    return GaitModel(mb, FusionBlock(proj, gate), h, suppress_m, suppress_p)


# -- fusion -----------------------------------------------------------------

def fuse_forward(fields: dict[str, np.ndarray], fusion: FusionBlock):
    """Fuse aligned ``(n, h, w, 2)`` fields. Returns ``(fused, cache)``."""
    names = fusion.branches
    shapes = {fields[b].shape for b in names}
    if len(shapes) != 1:
        raise ConfigError(f"fields to fuse differ in shape: {sorted(shapes)}")
    projs, pcaches = [], []
    for b in names:
        p, c = conv2d_forward(fields[b], fusion.projections[b])
        projs.append(p)
        pcaches.append(c)
    if len(names) == 1:
        return projs[0], (names, pcaches, None, None, projs)
    logits, gcache = conv2d_forward(np.concatenate(projs, axis=-1), fusion.gate)
    a = softmax_rows(logits)
    fused = sum(a[..., i:i + 1] * p for i, p in enumerate(projs))
    return fused, (names, pcaches, gcache, a, projs)


def fuse_backward(dfused: np.ndarray, cache):
    """Returns ``(dfields, grads)`` keyed by branch / ``"gate"``."""
    names, pcaches, gcache, a, projs = cache
    grads = {}
    if gcache is None:
        dproj = [dfused]
    else:
        dproj = [a[..., i:i + 1] * dfused for i in range(len(names))]
        da = np.stack([np.sum(dfused * p, axis=-1) for p in projs], axis=-1)
        dlogits = softmax_rows_backward(da, a)
        dcat, dw, db = conv2d_backward(dlogits, gcache)
        grads["gate"] = (dw, db)
        d_f = projs[0].shape[-1]
        for i in range(len(names)):
            dproj[i] = dproj[i] + dcat[..., i * d_f:(i + 1) * d_f]
    dfields = {}
    for b, d, c in zip(names, dproj, pcaches):
        dfields[b], dw, db = conv2d_backward(d, c)
        grads[b] = (dw, db)
    return dfields, grads


def gate_weights(fields: dict[str, np.ndarray], fusion: FusionBlock) -> np.ndarray | None:
    cache = fuse_forward(fields, fusion)[1]
    return cache[3]


def align_fields(static: np.ndarray | None, dynamic: np.ndarray | None, delta_l: int):
    """Drop the trailing static frames that have no dynamic partner (axis -4)."""
    if static is None or dynamic is None:
        return static, dynamic
    keep = static.shape[-4] - delta_l
    if keep != dynamic.shape[-4]:
        raise ConfigError(f"static field has {static.shape[-4]} frames, dynamic {dynamic.shape[-4]}; "
                          f"expected a difference of {delta_l}")
    return static[..., :keep, :, :, :], dynamic


def fuse(static_field, dynamic_field, fusion: FusionBlock) -> np.ndarray:
    """Fuse a static and a dynamic field of one sequence into ``(L', h, w, D_f)``."""
    s = getattr(static_field, "frames", static_field)
    d = getattr(dynamic_field, "frames", dynamic_field)
    if s.shape[1:] != d.shape[1:]:
        raise ConfigError(f"spatial mismatch: {s.shape[1:]} vs {d.shape[1:]}")
    delta_l = getattr(dynamic_field, "delta_l", s.shape[0] - d.shape[0])
    s, d = align_fields(s, d, delta_l)
    return fuse_forward({"static": s, "dynamic": d}, fusion)[0]


# -- embedding --------------------------------------------------------------

def _strip_pad(h: int, strips: int) -> int:
    return (-h) % strips


def embed_forward(fused: np.ndarray, head: Head):
    """``fused`` is ``(B, L', h, w, D_f)``; returns ``(emb (B,S,D_e), logits (B,S,N), cache)``."""
    B, L = fused.shape[:2]
    if L < 1:
        raise ConfigError("cannot embed an empty sequence")
    x, bcaches = stack_forward(fused.reshape(B * L, *fused.shape[2:]), head.backbone)
    x = x.reshape(B, L, *x.shape[1:])
    arg = np.argmax(x, axis=1)
    pooled_t = np.take_along_axis(x, arg[:, None], axis=1)[:, 0]          # (B, h, w, D_b)
    h = pooled_t.shape[1]
    S = head.config.strips
    pad = _strip_pad(h, S)
    if pad:
        pooled_t = np.pad(pooled_t, ((0, 0), (0, pad), (0, 0), (0, 0)))
    B_, hp, w, d_b = pooled_t.shape
    strips = pooled_t.reshape(B, S, hp // S, w, d_b).mean(axis=(2, 3))    # (B, S, D_b)
    emb = np.einsum("bsd,sde->bse", strips, head.fc_w) + head.fc_b
    logits = np.einsum("bse,sek->bsk", emb, head.cls_w) + head.cls_b
    cache = (x.shape, arg, bcaches, h, pad, strips, emb)
    return emb, logits, cache


def embed_backward(demb: np.ndarray, dlogits: np.ndarray, head: Head, cache):
    """Returns ``(dfused, grads)``."""
    xshape, arg, bcaches, h, pad, strips, emb = cache
    B, L, _, w, d_b = xshape
    S = head.config.strips
    grads = {
        "cls.weights": np.einsum("bse,bsk->sek", emb, dlogits),
        "cls.bias": dlogits.sum(axis=0),
    }
    demb = demb + np.einsum("bsk,sek->bse", dlogits, head.cls_w)
    grads["fc.weights"] = np.einsum("bsd,bse->sde", strips, demb)
    grads["fc.bias"] = demb.sum(axis=0)
    dstrips = np.einsum("bse,sde->bsd", demb, head.fc_w)
    hp = h + pad
    dpooled = np.broadcast_to(dstrips[:, :, None, None, :] / ((hp // S) * w),
                              (B, S, hp // S, w, d_b)).reshape(B, hp, w, d_b)[:, :h]
    dx = np.zeros(xshape)
    np.put_along_axis(dx, arg[:, None], dpooled[:, None], axis=1)
    dfused, bgrads = stack_backward(dx.reshape(B * L, *xshape[2:]), bcaches)
    for i, (dw, db) in enumerate(bgrads):
        grads[f"backbone.{i}.weights"] = dw
        grads[f"backbone.{i}.bias"] = db
    return dfused.reshape(B, L, *dfused.shape[1:]), grads


def embed_sequence(fused: np.ndarray, head: Head) -> np.ndarray:
    """Embedding ``(strips, D_e)`` of one fused sequence ``(L', h, w, D_f)``."""
    fused = np.asarray(fused, dtype=np.float64)
    if fused.ndim != 4 or fused.shape[0] < 1:
        raise ConfigError(f"expected a non-empty (L', h, w, D_f) sequence, got {fused.shape}")
    return embed_forward(fused[None], head)[0][0]


# -- losses -----------------------------------------------------------------

@dataclass
class TripletStats:
    valid: int
    active: int

    @property
    def warning(self) -> bool:
        return self.valid == 0


def triplet_loss(emb: np.ndarray, labels, margin: float = 0.2):
    """Batch-all triplet loss averaged over the strictly positive terms.

    ``emb`` is ``(B, S, D)``; distances are Euclidean per strip. Returns
    ``(loss, demb, stats)``; with no valid triplet the loss is 0 and
    ``stats.warning`` is set.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    B = emb.shape[0]
    diff = emb[:, None] - emb[None, :]                       # (B, B, S, D)
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))               # (B, B, S)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(B, dtype=bool)
    neg = ~same
    valid = pos[:, :, None] & neg[:, None, :]                # (a, p, n)
    n_valid = int(valid.sum())
    terms = dist[:, :, None, :] - dist[:, None, :, :] + margin   # (a, p, n, S)
    terms = np.where(valid[..., None], np.maximum(terms, 0.0), 0.0)
    active = terms > 0
    n_active = int(active.sum())
    demb = np.zeros_like(emb)
    stats = TripletStats(n_valid, n_active)
    if n_active == 0:
        return 0.0, demb, stats
    loss = float(terms.sum() / n_active)
    g = active / n_active
    ddist = g.sum(axis=2) - g.sum(axis=1)                    # (B, B, S)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    coef = ddist[..., None] * unit
    demb = coef.sum(axis=1) - coef.sum(axis=0)
    return loss, demb, stats


def cross_entropy_loss(logits: np.ndarray, labels):
    """Mean over sequences and strips of ``-log softmax(logits)[label]``.

    ``logits`` is ``(B, S, N)`` (or ``(S, N)`` for a single sequence).
    Returns ``(loss, dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 2
    if single:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels))
    B, S, N = logits.shape
    if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= N):
        raise ConfigError(f"labels must be {B} class indices in [0, {N})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    loss = float(-logp[np.arange(B), :, labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(B), :, labels] -= 1.0
    dlogits /= B * S
    return loss, (dlogits[0] if single else dlogits)


# -- full model -------------------------------------------------------------

def model_forward(model: GaitModel, features: np.ndarray, masks: np.ndarray, *,
                  train: bool = False, rng: np.random.Generator | None = None):
    """Fields, fusion and embedding for a batch ``(B, L, h, w, C)``.

    Returns ``(emb, logits, cache)``. In training mode the static field
    goes through texture suppression driven by ``rng``.
    """
    features = np.asarray(features, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if features.ndim != 5 or masks.shape != features.shape[:4]:
        raise ConfigError(f"expected features (B, L, h, w, C) and masks (B, L, h, w), "
                          f"got {features.shape} and {masks.shape}")
    B, L = features.shape[:2]
    flat_f = features.reshape(B * L, *features.shape[2:])
    flat_m = masks.reshape(B * L, *masks.shape[2:])
    fields, bcaches = {}, {}
    keep = None
    for name in model.fusion.branches:
        G, c = _batched_branch(flat_f, flat_m, B, L, model.branches[name])
        if name == "static" and train and model.suppress_p > 0:
            if rng is None:
                raise ConfigError("training-mode forward needs an rng")
            keep = suppression_mask(G, model.suppress_m, model.suppress_p, rng)
            G = G * keep
        fields[name], bcaches[name] = G, c
    s, d = align_fields(fields.get("static"), fields.get("dynamic"), model.delta_l)
    aligned = {k: v for k, v in (("static", s), ("dynamic", d)) if v is not None}
    Lp = next(iter(aligned.values())).shape[1]
    fused, fcache = fuse_forward({k: v.reshape(B * Lp, *v.shape[2:]) for k, v in aligned.items()},
                                 model.fusion)
    fused = fused.reshape(B, Lp, *fused.shape[1:])
    emb, logits, ecache = embed_forward(fused, model.head)
    cache = (fields, bcaches, keep, Lp, fcache, ecache, B, L)
    return emb, logits, cache


def _batched_branch(flat_f, flat_m, B, L, branch: MatchingBranch):
    """Run one branch over ``B`` sequences of ``L`` frames stacked on axis 0."""
    dl = branch.delta_l
    if L <= dl:
        raise ConfigError(f"sequence of {L} frames is too short for delta_l={dl}")
    qi = (np.arange(B)[:, None] * L + np.arange(L - dl)[None]).ravel()
    G, cache = pairs_forward(flat_f, flat_m, qi, qi + dl, branch)
    return G.reshape(B, L - dl, *G.shape[1:]), cache


def model_backward(model: GaitModel, demb: np.ndarray, dlogits: np.ndarray, cache,
                   need_dx: bool = True):
    """Gradients for every named parameter plus the input features (or None)."""
    fields, bcaches, keep, Lp, fcache, ecache, B, L = cache
    dfused, grads = embed_backward(demb, dlogits, model.head, ecache)
    dfields, fgrads = fuse_backward(dfused.reshape(B * Lp, *dfused.shape[2:]), fcache)
    for k, (dw, db) in fgrads.items():
        grads[f"fusion.{k}.weights"] = dw
        grads[f"fusion.{k}.bias"] = db
    dfeat = None
    for name in model.fusion.branches:
        G = fields[name]
        dG = np.zeros_like(G)
        dG[:, :Lp] = dfields[name].reshape(B, Lp, *G.shape[2:])
        if name == "static" and keep is not None:
            dG = dG * keep
        dflat, bgrads = branch_backward(dG.reshape(-1, *dG.shape[2:]), bcaches[name], need_dx)
        for lname, (dw, db) in bgrads.items():
            grads[f"{name}.{lname}.weights"] = dw
            grads[f"{name}.{lname}.bias"] = db
        if need_dx:
            dfeat = dflat if dfeat is None else dfeat + dflat
    return grads, (dfeat.reshape(B, L, *dfeat.shape[1:]) if need_dx else None)


def batch_loss(model: GaitModel, features, masks, labels, *, train: bool = False,
               rng: np.random.Generator | None = None, triplet_weight: float = 1.0,
               ce_weight: float = 1.0, need_dx: bool = True):
    """Forward + backward of ``triplet + ce``. Returns ``(total, parts, grads, dfeatures)``."""
    emb, logits, cache = model_forward(model, features, masks, train=train, rng=rng)
    tl, demb, stats = triplet_loss(emb, labels, model.head.config.triplet_margin)
    ce, dlogits = cross_entropy_loss(logits, labels)
    total = triplet_weight * tl + ce_weight * ce
    grads, dfeat = model_backward(model, triplet_weight * demb, ce_weight * dlogits, cache, need_dx)
    parts = {"triplet": tl, "ce": ce, "active_triplets": stats.active, "valid_triplets": stats.valid}
    return total, parts, grads, dfeat


def embed_batch(model: GaitModel, features, masks) -> np.ndarray:
    """Eval-mode embeddings ``(B, strips, D_e)``."""
    return model_forward(model, features, masks, train=False)[0]
