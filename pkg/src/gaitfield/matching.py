"""Local feature matching that turns C-channel features into 2-D direction fields.

For each foreground pixel the query vector is dotted with the key vectors
in a ``(2dh+1) x (2dw+1)`` window, the scores are softmaxed, and the
resulting distribution weights a fixed template of integer offsets. Keys
that fall outside the frame are zero vectors and stay in the softmax.

Offsets are ``(row, col)``; row 0 of a field is the vertical component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import FeatureSequence, MaskSequence, check_pair
from .errors import ConfigError
from .tensor import (
    DEFAULT_SLOPE,
    ConvLayer,
    init_conv,
    matmul,
    stack_backward,
    stack_forward,
)

ENCODER_DEPTH = 4


@dataclass(frozen=True)
class DirectionTemplate:
    delta_h: int
    delta_w: int
    rows: np.ndarray = field(repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    def index(self, di: int, dj: int) -> int:
        return (di + self.delta_h) * (2 * self.delta_w + 1) + (dj + self.delta_w)


def build_template(delta_h: int, delta_w: int) -> DirectionTemplate:
    if delta_h < 0 or delta_w < 0:
        raise ConfigError("template half-sizes must be non-negative")
    di, dj = np.meshgrid(np.arange(-delta_h, delta_h + 1),
                         np.arange(-delta_w, delta_w + 1), indexing="ij")
    rows = np.stack([di.ravel(), dj.ravel()], axis=1).astype(np.float64)
    rows.flags.writeable = False
    return DirectionTemplate(delta_h, delta_w, rows)


@dataclass
class MatchingBranch:
    encoder_q: list[ConvLayer]
    encoder_k: list[ConvLayer]
    delta_l: int
    template: DirectionTemplate

    def __post_init__(self):
        if self.delta_l < 0:
            raise ConfigError("delta_l must be >= 0")
        shapes_q = [l.weights.shape for l in self.encoder_q]
        shapes_k = [l.weights.shape for l in self.encoder_k]
        if shapes_q != shapes_k:
            raise ConfigError("query and key encoders must have identical shapes")

    @property
    def kind(self) -> str:
        return "static" if self.delta_l == 0 else "dynamic"

    @property
    def c_in(self) -> int:
        return self.encoder_q[0].c_in

    def layers(self):
        for prefix, enc in (("q", self.encoder_q), ("k", self.encoder_k)):
            for i, layer in enumerate(enc):
                yield f"{prefix}.{i}", layer


def init_encoder(rng: np.random.Generator, c_in: int = 4, channels: int = 16, k: int = 3,
                 depth: int = ENCODER_DEPTH, slope: float = DEFAULT_SLOPE) -> list[ConvLayer]:
    """Leaky activations after every layer but the last, which stays linear."""
    dims = [c_in] + [channels] * depth
    return [init_conv(rng, dims[i], dims[i + 1], k, slope if i < depth - 1 else None)
            for i in range(depth)]


def init_branch(rng: np.random.Generator, delta_l: int, c_in: int = 4, channels: int = 16,
                delta_h: int = 3, delta_w: int = 3, k: int = 3) -> MatchingBranch:
    enc_q = init_encoder(rng, c_in, channels, k)
    enc_k = init_encoder(rng, c_in, channels, k)
    return MatchingBranch(enc_q, enc_k, delta_l, build_template(delta_h, delta_w))


@dataclass
class GaitFeatureField:
    """Direction vectors ``(L', h, w, 2)``; ``L' = L - delta_l``."""

    kind: str
    frames: np.ndarray
    delta_l: int

    def __len__(self) -> int:
        return self.frames.shape[0]


def encode_and_mask(features: np.ndarray, mask: np.ndarray, encoder: list[ConvLayer]) -> np.ndarray:
    """Run the conv stack on ``(n, h, w, C_in)`` frames, then zero the background.

    ``mask`` is ``(n, h, w)`` or ``(n, h, w, 1)``.
    """
    out, _ = _encode_forward(features, mask, encoder)
    return out


def _mask4(mask: np.ndarray, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[..., None]
    if mask.shape != (*shape[:3], 1):
        raise ConfigError(f"mask shape {mask.shape[:3]} does not match features {shape[:3]}")
    return mask


def _encode_forward(features, mask, encoder):
    enc, caches = stack_forward(features, encoder)
    m = _mask4(mask, enc.shape)
    return enc * m, (caches, m)


def _encode_backward(dout, cache, need_dx=True):
    caches, m = cache
    return stack_backward(dout * m, caches, need_dx)


def _pad_keys(fk: np.ndarray, t: DirectionTemplate) -> np.ndarray:
    return np.pad(fk, ((0, 0), (t.delta_h, t.delta_h), (t.delta_w, t.delta_w), (0, 0)))


def _offsets(t: DirectionTemplate):
    h0, w0 = t.delta_h, t.delta_w
    for di, dj in t.rows.astype(int):
        yield h0 + di, w0 + dj


def _scores_kmajor(fq: np.ndarray, fk: np.ndarray, template: DirectionTemplate) -> np.ndarray:
    # (K, n, h, w): each offset's scores are contiguous
    if fq.shape != fk.shape:
        raise ConfigError(f"query {fq.shape} and key {fk.shape} shapes differ")
    n, h, w, _ = fq.shape
    kp = _pad_keys(fk, template)
    scores = np.empty((template.K, n, h, w))
    for idx, (r, c) in enumerate(_offsets(template)):
        np.einsum("nhwc,nhwc->nhw", fq, kp[:, r:r + h, c:c + w], out=scores[idx])
    return scores


def _softmax_k(scores: np.ndarray) -> np.ndarray:
    e = scores - scores.max(axis=0)
    np.exp(e, out=e)
    e /= e.sum(axis=0)
    return e


def _directions_k(P: np.ndarray, template: DirectionTemplate) -> np.ndarray:
    # template columns sum to zero, so centring P changes nothing except
    # making a uniform distribution (masked query) land on exactly (0, 0)
    K = P.shape[0]
    G = template.rows.T @ (P.reshape(K, -1) - 1.0 / K)
    # centring can overshoot a one-hot corner by an ulp; clamp to the template
    bound = np.array([[template.delta_h], [template.delta_w]], dtype=np.float64)
    np.clip(G, -bound, bound, out=G)
    return np.ascontiguousarray(G.T).reshape(*P.shape[1:], 2)


def neighborhood_scores(fq: np.ndarray, fk: np.ndarray, template: DirectionTemplate) -> np.ndarray:
    """Dot products of each query with its K neighbouring keys: ``(n, h, w, K)``."""
    return np.moveaxis(_scores_kmajor(fq, fk, template), 0, -1)


def neighborhood_scores_backward(dscores, fq, fk, template):
    """``dscores`` is K-major ``(K, n, h, w)``. Returns ``(dfq, dfk)``."""
    n, h, w, _ = fq.shape
    kp = _pad_keys(fk, template)
    dq = np.zeros_like(fq)
    dkp = np.zeros_like(kp)
    for idx, (r, c) in enumerate(_offsets(template)):
        g = dscores[idx][..., None]
        dq += g * kp[:, r:r + h, c:c + w]
        dkp[:, r:r + h, c:c + w] += g * fq
    dk = dkp[:, template.delta_h:template.delta_h + h, template.delta_w:template.delta_w + w]
    return dq, dk


def neighborhood_distribution(fq: np.ndarray, fk: np.ndarray, template: DirectionTemplate) -> np.ndarray:
    """Softmax over the K neighbour similarities. Accepts ``(h, w, C)`` or ``(n, h, w, C)``."""
    fq = np.asarray(fq, dtype=np.float64)
    fk = np.asarray(fk, dtype=np.float64)
    single = fq.ndim == 3
    if single:
        fq, fk = fq[None], fk[None]
    p = np.moveaxis(_softmax_k(_scores_kmajor(fq, fk, template)), 0, -1)
    return p[0] if single else p


def assign_directions(P: np.ndarray, template: DirectionTemplate) -> np.ndarray:
    """Per-pixel expectation of template offsets under ``P``."""
    if P.shape[-1] != template.K:
        raise ConfigError(f"distribution has {P.shape[-1]} entries, template has {template.K}")
    return matmul(P, template.rows)


def _branch_pairs(L: int, delta_l: int):
    if L <= delta_l:
        raise ConfigError(f"sequence of {L} frames is too short for delta_l={delta_l}")
    return np.arange(L - delta_l), np.arange(delta_l, L)


def pairs_forward(features: np.ndarray, masks: np.ndarray, qi, ki, branch: MatchingBranch):
    """Match query frames ``features[qi]`` against key frames ``features[ki]``.

    Index arrays must each be free of repeats so the backward scatter is a
    plain add.
    """
    fq, cache_q = _encode_forward(features[qi], masks[qi], branch.encoder_q)
    fk, cache_k = _encode_forward(features[ki], masks[ki], branch.encoder_k)
    P = _softmax_k(_scores_kmajor(fq, fk, branch.template))
    G = _directions_k(P, branch.template)
    return G, (branch, features.shape, qi, ki, fq, fk, P, cache_q, cache_k)


def branch_forward(features: np.ndarray, masks: np.ndarray, branch: MatchingBranch):
    """Field for a single sequence ``(L, h, w, C_in)``; returns ``(G, cache)``."""
    qi, ki = _branch_pairs(features.shape[0], branch.delta_l)
    return pairs_forward(features, masks, qi, ki, branch)


def branch_backward(dG: np.ndarray, cache, need_dx: bool = True):
    """Reverse pass of :func:`branch_forward`.

    Returns ``(dfeatures, grads)`` where ``grads`` maps layer names such as
    ``"q.0"`` to ``(dweights, dbias)``.
    """
    if cache is None:
        raise ConfigError("branch_backward needs the forward cache")
    branch, shape, qi, ki, fq, fk, P, cache_q, cache_k = cache
    dP = (branch.template.rows @ dG.reshape(-1, 2).T).reshape(P.shape)
    ds = P * (dP - np.sum(dP * P, axis=0))
    dfq, dfk = neighborhood_scores_backward(ds, fq, fk, branch.template)
    dxq, gq = _encode_backward(dfq, cache_q, need_dx)
    dxk, gk = _encode_backward(dfk, cache_k, need_dx)
    dx = None
    if need_dx:
        dx = np.zeros(shape)
        dx[qi] += dxq
        dx[ki] += dxk
    grads = {f"q.{i}": g for i, g in enumerate(gq)}
    grads.update({f"k.{i}": g for i, g in enumerate(gk)})
    return dx, grads


matching_backward = branch_backward


def compute_field(seq: FeatureSequence, masks: MaskSequence, branch: MatchingBranch) -> GaitFeatureField:
    check_pair(seq, masks)
    if seq.shape[2] != branch.c_in:
        raise ConfigError(f"features have {seq.shape[2]} channels, encoders expect {branch.c_in}")
    G, _ = branch_forward(seq.frames, masks.frames, branch)
    return GaitFeatureField(branch.kind, G, branch.delta_l)


def field_magnitude(G) -> np.ndarray:
    frames = G.frames if isinstance(G, GaitFeatureField) else np.asarray(G)
    return np.sqrt(np.sum(frames ** 2, axis=-1))


def suppression_mask(frames: np.ndarray, m: float, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask ``(..., 1)``: 0 where a pixel with magnitude > m lost its draw.

    One uniform draw per pixel is consumed whatever the magnitudes are, so
    the RNG stream does not depend on the data.
    """
    if m < 0:
        raise ConfigError("threshold m must be non-negative")
    if not 0 <= p <= 1:
        raise ConfigError("probability p must lie in [0, 1]")
    draws = rng.random(frames.shape[:-1])
    drop = (field_magnitude(frames) > m) & (draws < p)
    return (~drop).astype(np.float64)[..., None]


def texture_suppress(G_static: GaitFeatureField, m: float = 0.5, p: float = 0.5,
                     rng: np.random.Generator | None = None) -> GaitFeatureField:
    """Randomly zero high-magnitude pixels of a static field (training-time only)."""
    if G_static.kind != "static":
        raise ConfigError("texture suppression applies to static fields only")
    rng = rng if rng is not None else np.random.default_rng(0)
    keep = suppression_mask(G_static.frames, m, p, rng)
    return GaitFeatureField("static", G_static.frames * keep, G_static.delta_l)
