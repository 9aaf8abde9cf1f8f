"""Slow, loop-based reference implementations used as test oracles.

Nothing here shares code with the package beyond plain numpy; every sum is
written out pixel by pixel.
"""

from __future__ import annotations

import math

import numpy as np


def conv_oracle(x, weights, bias, slope):
    """Zero-padded 'same' cross-correlation of one ``(h, w, c_in)`` frame."""
    h, w, c_in = x.shape
    c_out, _, k, _ = weights.shape
    p = k // 2
    out = np.zeros((h, w, c_out))
    for i in range(h):
        for j in range(w):
            for o in range(c_out):
                acc = bias[o]
                for a in range(k):
                    for b in range(k):
                        ii, jj = i + a - p, j + b - p
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += float(np.dot(weights[o, :, a, b], x[ii, jj]))
                if slope is not None and acc < 0:
                    acc *= slope
                out[i, j, o] = acc
    return out


def encoder_oracle(x, mask, layers):
    for layer in layers:
        x = conv_oracle(x, layer.weights, layer.bias, layer.slope)
    return x * mask[..., None]


def template_oracle(dh, dw):
    return [(di, dj) for di in range(-dh, dh + 1) for dj in range(-dw, dw + 1)]


def match_pixel_oracle(fq, fk, i, j, dh, dw):
    """Softmax-weighted mean offset at one pixel, keys outside the frame are zero."""
    h, w, c = fk.shape
    offsets = template_oracle(dh, dw)
    scores = []
    for di, dj in offsets:
        ii, jj = i + di, j + dj
        key = fk[ii, jj] if (0 <= ii < h and 0 <= jj < w) else np.zeros(c)
        scores.append(sum(float(fq[i, j, ch]) * float(key[ch]) for ch in range(c)))
    top = max(scores)
    weights = [math.exp(s - top) for s in scores]
    total = sum(weights)
    g0 = sum(wt * di for wt, (di, _) in zip(weights, offsets)) / total
    g1 = sum(wt * dj for wt, (_, dj) in zip(weights, offsets)) / total
    return g0, g1


def field_oracle(features, masks, branch):
    """Brute-force field for a ``MatchingBranch`` on ``(L, h, w, C_in)`` features."""
    L, h, w, _ = features.shape
    dl = branch.delta_l
    dh, dw = branch.template.delta_h, branch.template.delta_w
    out = np.zeros((L - dl, h, w, 2))
    for l in range(L - dl):
        fq = encoder_oracle(features[l], masks[l], branch.encoder_q)
        fk = encoder_oracle(features[l + dl], masks[l + dl], branch.encoder_k)
        for i in range(h):
            for j in range(w):
                out[l, i, j] = match_pixel_oracle(fq, fk, i, j, dh, dw)
    return out


def rank1_oracle(probe_emb, probe_ids, probe_labels, gallery_emb, gallery_ids, gallery_labels):
    """Rank-1 by explicit loops; ties go to the smaller gallery sequence id."""
    hits = 0
    counted = 0
    for p in range(len(probe_ids)):
        best = None
        for g in range(len(gallery_ids)):
            if gallery_ids[g] == probe_ids[p]:
                continue
            d = 0.0
            for s in range(probe_emb.shape[1]):
                d += math.sqrt(sum((probe_emb[p, s, e] - gallery_emb[g, s, e]) ** 2
                                   for e in range(probe_emb.shape[2])))
            key = (d, gallery_ids[g])
            if best is None or key < best[0]:
                best = (key, gallery_labels[g])
        if best is None:
            continue
        counted += 1
        hits += best[1] == probe_labels[p]
    return hits / counted if counted else 0.0
