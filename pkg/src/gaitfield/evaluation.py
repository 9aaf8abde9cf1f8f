"""Synthetic walker dataset and rank-k retrieval evaluation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .container import FeatureSequence, MaskSequence
from .errors import ConfigError

CLEAN, RECOLORED = "clean", "recolored"
MAX_WIDTHS = 4
SILHOUETTE_HALF = 5.0  # upper-body half width when flicker hides the torso
HEAD_HALF = 1.5
COLOUR_SCALE = 2.0  # recolored part colours, relative to the texture level
SWING = 0.075  # leg swing at the foot, as a fraction of the frame width


@dataclass(frozen=True)
class IdentitySignature:
    frequency: float      # limb oscillation, cycles per frame
    phase: float          # cycles
    torso_width: int      # pixels


@dataclass
class SyntheticWalkerSpec:
    num_ids: int = 8
    seqs_per_id: int = 6
    frames: int = 20
    h: int = 32
    w: int = 16
    c_in: int = 4
    texture_noise_level: float = 0.5
    recolored_per_id: int = 2
    shake: int = 0          # max per-frame horizontal camera jitter, pixels
    flicker: bool = False   # per-frame random sign on the upper-body part code
    seed: int = 0
    signatures: list[IdentitySignature] = field(default_factory=list)

    def __post_init__(self):
        if self.num_ids < 2 or self.seqs_per_id < 1 or self.frames < 2:
            raise ConfigError("need num_ids >= 2, seqs_per_id >= 1, frames >= 2")
        if self.h < 16 or self.w < 8:
            raise ConfigError(f"frame {self.h}x{self.w} too small for a walker (min 16x8)")
        if self.c_in < 4:
            raise ConfigError("walkers need at least 4 feature channels")
        if not 0 <= self.recolored_per_id <= self.seqs_per_id:
            raise ConfigError("recolored_per_id must lie in [0, seqs_per_id]")
        if not 0 <= self.shake <= self.w // 8:
            raise ConfigError(f"shake must lie in [0, {self.w // 8}] for width {self.w}")
        if self.texture_noise_level < 0:
            raise ConfigError("texture_noise_level must be non-negative")
        if not self.signatures:
            self.signatures = default_signatures(self.num_ids, self.w, self.seed)
        if len(self.signatures) != self.num_ids:
            raise ConfigError("one signature per identity required")
        pairs = {(s.frequency, s.torso_width) for s in self.signatures}
        if len(pairs) != self.num_ids:
            raise ConfigError("identities must have distinct (frequency, torso_width) pairs")


def default_signatures(num_ids: int, w: int, seed: int) -> list[IdentitySignature]:
    """Up to four even torso widths crossed with frequencies spread over [0.1, 0.3]."""
    rng = np.random.default_rng([seed, 0x51])
    widths = list(range(2, w // 2 + 1, 2))[:MAX_WIDTHS]
    n_f = -(-num_ids // len(widths))
    freqs = np.linspace(0.1, 0.3, n_f) if n_f > 1 else np.array([0.2])
    sigs = []
    for i in range(num_ids):
        sigs.append(IdentitySignature(float(freqs[i // len(widths)]), float(rng.random()),
                                      widths[i % len(widths)]))
    return sigs


@dataclass
class WalkerSample:
    sequence_id: str
    identity: int
    covariate: str
    features: FeatureSequence
    masks: MaskSequence


def limb_positions(sig: IdentitySignature, frames: int, phase_jitter: float = 0.0,
                   amplitude: float = 1.0) -> np.ndarray:
    t = np.arange(frames)
    return amplitude * np.sin(2 * np.pi * (sig.frequency * t + sig.phase + phase_jitter))


def _render(sig: IdentitySignature, spec: SyntheticWalkerSpec, rng: np.random.Generator):
    """Channels 0-1 (support and part code), per-part coverage ``(L, h, w, 3)``
    for head/torso/legs, and the binary mask for one sequence."""
    L, h, w = spec.frames, spec.h, spec.w
    top = int(round(h * 0.1))
    centre = w / 2 - 0.5 + int(rng.integers(-1, 2))
    head_end = top + max(2, h // 8)
    hip = top + int(round(h * 0.45))
    foot = min(h - 1, top + int(round(h * 0.85)))
    swing = limb_positions(sig, L, rng.uniform(-0.05, 0.05), amplitude=w * SWING)
    rows = np.arange(h)[:, None].astype(float)
    cols = np.arange(w)[None, :].astype(float)
    body = np.zeros((L, h, w, 2))
    parts = np.zeros((L, h, w, 3))
    jitter = rng.integers(-spec.shake, spec.shake + 1, size=L) if spec.shake else np.zeros(L, int)
    signs = rng.choice([-1.0, 1.0], size=L) if spec.flicker else np.ones(L)
    half = sig.torso_width / 2
    # with flicker the silhouette is identity-free (torso plus arms, fixed
    # width) and the torso only shows as an internal part-code boundary
    outline = SILHOUETTE_HALF if spec.flicker else half
    frac = np.clip((rows - hip) / max(foot - hip, 1), 0, 1)
    for l in range(L):
        c = centre + jitter[l]
        head = (rows >= top) & (rows < head_end) & (np.abs(cols - c) <= HEAD_HALF)
        upper = (rows >= head_end) & (rows < hip) & (np.abs(cols - c) <= outline)
        torso = upper & (np.abs(cols - c) <= half)
        arms = upper & ~torso
        trunk = signs[l] * (np.where(torso, -0.5, 0.0) + np.where(arms, 0.5, 0.0)) \
            + np.where(head, 0.5, 0.0)
        # anti-aliased legs so sub-pixel motion shows up in the features
        legs = np.zeros((h, w))
        for side in (1.0, -1.0):
            x = c + side * swing[l] * frac
            cov = np.clip(1.5 - np.abs(cols - x), 0.0, 1.0)
            legs = np.maximum(legs, np.where((rows >= hip) & (rows <= foot), cov, 0.0))
        body[l, ..., 0] = np.maximum(legs, head | upper)
        body[l, ..., 1] = legs + (1.0 - legs) * trunk
        parts[l, ..., 0] = (1.0 - legs) * head
        parts[l, ..., 1] = (1.0 - legs) * upper
        parts[l, ..., 2] = legs
    masks = (body[..., 0] >= 0.5).astype(np.float64)
    return body, parts, masks


def synth_walkers(spec: SyntheticWalkerSpec) -> list[WalkerSample]:
    """Deterministic toy walking sequences.

    Identity lives only in channels 0-1 (body support and part code, whose
    geometry follows the identity's limb frequency/phase and torso width).
    Channels 2+ carry i.i.d. Gaussian texture at ``texture_noise_level``;
    "recolored" sequences also get a random per-sequence colour on each body
    part in those channels, so nothing in them is shared across sequences.
    """
    out = []
    n_tex = spec.c_in - 2
    for ident, sig in enumerate(spec.signatures):
        for s in range(spec.seqs_per_id):
            rng = np.random.default_rng([spec.seed, ident, s])
            body, parts, masks = _render(sig, spec, rng)
            feats = np.zeros((spec.frames, spec.h, spec.w, spec.c_in))
            feats[..., :2] = body
            recolored = s >= spec.seqs_per_id - spec.recolored_per_id
            lvl = spec.texture_noise_level
            if lvl > 0:
                feats[..., 2:] = lvl * rng.standard_normal((spec.frames, spec.h, spec.w, n_tex))
                if recolored:
                    palette = COLOUR_SCALE * rng.standard_normal((3, n_tex))
                    feats[..., 2:] += lvl * (parts @ palette)
            tag = RECOLORED if recolored else CLEAN
            sid = f"id{ident:03d}-s{s:02d}"
            out.append(WalkerSample(sid, ident, tag,
                                    FeatureSequence(feats, source_tag="synth"),
                                    MaskSequence(masks)))
    return out


def default_split(dataset: list[WalkerSample], train_clean: int = 2,
                  train_recolored: int = 1) -> dict[str, str]:
    """Per identity: the first clean/recolored sequences train, one clean
    sequence forms the gallery, the rest are probes."""
    split = {}
    by_id: dict[int, list[WalkerSample]] = {}
    for smp in dataset:
        by_id.setdefault(smp.identity, []).append(smp)
    for ident, items in by_id.items():
        clean = [x for x in items if x.covariate == CLEAN]
        recol = [x for x in items if x.covariate != CLEAN]
        if len(clean) < train_clean + 1:
            raise ConfigError(f"identity {ident} has too few clean sequences for the split")
        for x in clean[:train_clean]:
            split[x.sequence_id] = "train"
        split[clean[train_clean].sequence_id] = "gallery"
        for x in clean[train_clean + 1:]:
            split[x.sequence_id] = "probe"
        for x in recol[:train_recolored]:
            split[x.sequence_id] = "train"
        for x in recol[train_recolored:]:
            split[x.sequence_id] = "probe"
    return split


# -- retrieval ----------------------------------------------------------------

@dataclass
class EmbeddingSet:
    sequence_ids: list[str]
    labels: np.ndarray
    tags: list[str]
    embeddings: np.ndarray   # (N, strips, D_e)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.sequence_ids)
        if self.embeddings.ndim != 3 or self.embeddings.shape[0] != n:
            raise ConfigError(f"embeddings must be (N={n}, strips, D_e), got {self.embeddings.shape}")
        if len(self.labels) != n or len(self.tags) != n:
            raise ConfigError("sequence_ids, labels and tags must have equal length")
        if not np.all(np.isfinite(self.embeddings)):
            raise ConfigError("embeddings must be finite")

    def __len__(self) -> int:
        return len(self.sequence_ids)

    def subset(self, idx) -> "EmbeddingSet":
        idx = list(idx)
        return EmbeddingSet([self.sequence_ids[i] for i in idx], self.labels[idx],
                            [self.tags[i] for i in idx], self.embeddings[idx])


@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    per_covariate: dict[str, float]
    distance_matrix_checksum: str
    num_probes: int
    excluded: int
    topk: dict[int, float] = field(default_factory=dict)

    def records(self) -> list[str]:
        """``key=value`` lines, one fact per line."""
        lines = [f"rank1={self.rank1:.6f}", f"rank5={self.rank5:.6f}"]
        for k in sorted(self.topk):
            if k not in (1, 5):
                lines.append(f"rank{k}={self.topk[k]:.6f}")
        for tag in sorted(self.per_covariate):
            lines.append(f"rank1.{tag}={self.per_covariate[tag]:.6f}")
        lines += [f"num_probes={self.num_probes}", f"excluded={self.excluded}",
                  f"distance_checksum={self.distance_matrix_checksum}"]
        return lines

    def table(self) -> str:
        rows = [("metric", "value"), ("rank-1", f"{100 * self.rank1:.1f}"),
                ("rank-5", f"{100 * self.rank5:.1f}")]
        rows += [(f"rank-1 [{t}]", f"{100 * v:.1f}") for t, v in sorted(self.per_covariate.items())]
        rows += [("probes", str(self.num_probes)), ("excluded", str(self.excluded))]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{width}}  {b:>6}" for a, b in rows)


def strip_distances(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Sum over strips of Euclidean distances: ``(P, G)``."""
    diff = probe[:, None] - gallery[None]
    return np.sqrt(np.sum(diff ** 2, axis=-1)).sum(axis=-1)


def _hits(probe: EmbeddingSet, gallery: EmbeddingSet, ks):
    if len(gallery) == 0:
        raise ConfigError("gallery is empty")
    dist = strip_distances(probe.embeddings, gallery.embeddings)
    gid = np.array(gallery.sequence_ids)
    # ties resolve by ascending sequence id
    gid_rank = np.argsort(np.argsort(gid, kind="stable"), kind="stable")
    present = set(gallery.labels.tolist())
    hits = {k: [] for k in ks}
    used = []
    for i in range(len(probe)):
        if probe.labels[i] not in present:
            continue
        keep = gid != probe.sequence_ids[i]
        cand = np.flatnonzero(keep)
        order = cand[np.lexsort((gid_rank[cand], dist[i, cand]))]
        ranked = gallery.labels[order]
        for k in ks:
            hits[k].append(bool(np.any(ranked[:k] == probe.labels[i])))
        used.append(i)
    checksum = hashlib.sha256(np.ascontiguousarray(dist).tobytes()).hexdigest()[:16]
    return hits, used, checksum


def rank_k(gallery: EmbeddingSet, probe: EmbeddingSet, k: int = 1) -> RetrievalReport:
    """Rank-1/rank-5 (and rank-``k``) retrieval accuracy of ``probe`` against ``gallery``."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ks = sorted({1, 5, k})
    hits, used, checksum = _hits(probe, gallery, ks)
    n = len(used)
    frac = {kk: (float(np.mean(hits[kk])) if n else 0.0) for kk in ks}
    per_cov = {}
    for tag in sorted({probe.tags[i] for i in used}):
        sel = [j for j, i in enumerate(used) if probe.tags[i] == tag]
        per_cov[tag] = float(np.mean([hits[1][j] for j in sel]))
    return RetrievalReport(frac[1], frac[5], per_cov, checksum, n, len(probe) - n, frac)


def embed_dataset(model, samples: list[WalkerSample], batch: int = 8) -> EmbeddingSet:
    """Eval-mode embeddings (no texture suppression) for ``samples``."""
    from .head import embed_batch

    if not samples:
        raise ConfigError("nothing to embed")
    embs = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        lengths = {len(s.features) for s in chunk}
        if len(lengths) == 1:
            f = np.stack([s.features.frames for s in chunk])
            m = np.stack([s.masks.frames for s in chunk])
            embs.append(embed_batch(model, f, m))
        else:
            for s in chunk:
                embs.append(embed_batch(model, s.features.frames[None], s.masks.frames[None]))
    return EmbeddingSet([s.sequence_id for s in samples], [s.identity for s in samples],
                        [s.covariate for s in samples], np.concatenate(embs))


def evaluate(model, dataset: list[WalkerSample], split_spec: dict[str, str]) -> RetrievalReport:
    """Embed the probe and gallery sequences named in ``split_spec`` and rank them."""
    probe = [s for s in dataset if split_spec.get(s.sequence_id) == "probe"]
    gallery = [s for s in dataset if split_spec.get(s.sequence_id) == "gallery"]
    if not probe or not gallery:
        raise ConfigError("split must name at least one probe and one gallery sequence")
    return rank_k(embed_dataset(model, gallery), embed_dataset(model, probe))
