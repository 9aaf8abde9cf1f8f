"""SGD training of the full field + head pipeline, plus checkpoint files.

Checkpoint layout (little-endian)::

    0   4s  magic "GCK1"
    4   u32 format version (1)
    8   u32 manifest length in bytes
    12  ... UTF-8 manifest: "config <key>=<value>" lines, then
            "param <name> <d0>x<d1>x... <offset>" lines (offset in elements)
    ..  float64 payload, parameters concatenated in manifest order
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError
from .evaluation import WalkerSample
from .head import BRANCH_ORDER, GaitModel, HeadConfig, batch_loss, init_model

CKPT_MAGIC = b"GCK1"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 600
    lr: float = 0.1
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (400, 550)
    gamma: float = 0.1
    batch_ids: int = 8
    batch_seqs: int = 3
    clip_frames: int = 8
    channels: int = 16
    delta_h: int = 3
    delta_w: int = 3
    delta_l: int = 1
    branches: tuple[str, ...] = BRANCH_ORDER
    strips: int = 4
    embed_dim: int = 32
    fusion_dim: int = 16
    backbone_dim: int = 32
    triplet_margin: float = 0.2
    triplet_weight: float = 1.0
    ce_weight: float = 1.0
    suppress_m: float = 0.5
    suppress_p: float = 0.5
    num_classes: int = 0      # 0: infer from the dataset
    grad_clip: float = 0.0    # 0: off
    momentum: float = 0.0     # 0: plain SGD

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("steps, lr and weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_ids < 2 or self.batch_seqs < 1 or self.clip_frames < 1:
            raise ConfigError("need batch_ids >= 2, batch_seqs >= 1, clip_frames >= 1")
        if not self.branches or any(b not in BRANCH_ORDER for b in self.branches):
            raise ConfigError(f"branches must be drawn from {BRANCH_ORDER}")
        if "dynamic" in self.branches and self.clip_frames <= self.delta_l:
            raise ConfigError("clip_frames must exceed delta_l")

    def lr_at(self, step: int) -> float:
        return self.lr * self.gamma ** sum(step >= m for m in self.milestones)


_TUPLE_KEYS = {"milestones": int, "branches": str}


def _coerce(name: str, raw: str):
    fld = {f.name: f for f in dataclasses.fields(TrainConfig)}[name]
    if name in _TUPLE_KEYS:
        conv = _TUPLE_KEYS[name]
        return tuple(conv(x.strip()) for x in raw.split(",") if x.strip())
    default = fld.default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    return type(default)(raw)


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` text; ``#`` starts a comment; unknown keys are rejected."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def build_model(cfg: TrainConfig, c_in: int, num_classes: int) -> GaitModel:
    rng = np.random.default_rng([cfg.seed, 1])
    head = HeadConfig(strips=cfg.strips, embed_dim=cfg.embed_dim, num_classes=num_classes,
                      triplet_margin=cfg.triplet_margin, fusion_dim=cfg.fusion_dim,
                      backbone_dim=cfg.backbone_dim)
    model = init_model(rng, c_in=c_in, channels=cfg.channels, delta_h=cfg.delta_h,
                       delta_w=cfg.delta_w, delta_l=cfg.delta_l, branches=cfg.branches,
                       head=head, suppress_m=cfg.suppress_m, suppress_p=cfg.suppress_p)
    model.meta["config"] = format_config(cfg)
    model.meta["c_in"] = c_in
    return model


class BatchSampler:
    """(ids x seqs) batches; each sequence contributes an in-order clip."""

    def __init__(self, dataset: list[WalkerSample], cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        by_id: dict[int, list[WalkerSample]] = {}
        for s in dataset:
            by_id.setdefault(s.identity, []).append(s)
        self.by_id = {k: v for k, v in sorted(by_id.items()) if len(v) >= cfg.batch_seqs}
        if len(self.by_id) < cfg.batch_ids:
            raise ConfigError(f"only {len(self.by_id)} identities have >= {cfg.batch_seqs} "
                              f"sequences; batch needs {cfg.batch_ids}")
        short = [s.sequence_id for s in dataset if len(s.features) < cfg.clip_frames]
        if short:
            raise ConfigError(f"sequences shorter than clip_frames={cfg.clip_frames}: {short[:3]}")

    def __call__(self):
        cfg, rng = self.cfg, self.rng
        ids = rng.choice(list(self.by_id), size=cfg.batch_ids, replace=False)
        feats, masks, labels = [], [], []
        for ident in ids:
            pool = self.by_id[ident]
            for j in rng.choice(len(pool), size=cfg.batch_seqs, replace=False):
                s = pool[j]
                start = int(rng.integers(0, len(s.features) - cfg.clip_frames + 1))
                sl = slice(start, start + cfg.clip_frames)
                feats.append(s.features.frames[sl])
                masks.append(s.masks.frames[sl])
                labels.append(int(ident))
        return np.stack(feats), np.stack(masks), np.array(labels)


@dataclass
class TraceRow:
    step: int
    lr: float
    total: float
    triplet: float
    ce: float
    active_triplets: int


def sgd_step(model: GaitModel, grads: dict[str, np.ndarray], lr: float, weight_decay: float,
             clip: float = 0.0, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> None:
    """In-place ``p -= lr * (g + weight_decay * p)``.

    With ``momentum > 0`` the bracket is accumulated into ``velocity`` first
    (``v = momentum * v + bracket``), which must then be passed on every call.
    """
    scale = 1.0
    if clip > 0:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip:
            scale = clip / norm
    if momentum > 0 and velocity is None:
        raise ConfigError("momentum needs a velocity buffer")
    for name, p in model.named_parameters():
        g = grads.get(name)
        step = weight_decay * p if g is None else scale * g + weight_decay * p
        if momentum > 0:
            v = velocity.get(name)
            step = step if v is None else momentum * v + step
            velocity[name] = step
        p -= lr * step


def train(dataset: list[WalkerSample], cfg: TrainConfig, model: GaitModel | None = None,
          log_every: int = 0, on_step=None):
    """Train on ``dataset``; returns ``(model, trace)``.

    A passed-in model is copied, never mutated. ``on_step(step, model)`` runs
    after each update, e.g. for periodic evaluation.
    """
    if not dataset:
        raise ConfigError("empty training set")
    labels = sorted({s.identity for s in dataset})
    if labels != list(range(len(labels))) and cfg.num_classes == 0:
        raise ConfigError("identities must be 0..N-1 when num_classes is inferred")
    n_cls = cfg.num_classes or len(labels)
    c_in = dataset[0].features.shape[2]
    model = build_model(cfg, c_in, n_cls) if model is None else copy.deepcopy(model)
    rng = np.random.default_rng([cfg.seed, 2])
    sampler = BatchSampler(dataset, cfg, rng)
    trace: list[TraceRow] = []
    velocity: dict[str, np.ndarray] = {}
    for step in range(cfg.steps):
        lr = cfg.lr_at(step)
        f, m, y = sampler()
        total, parts, grads, _ = batch_loss(model, f, m, y, train=True, rng=rng,
                                            triplet_weight=cfg.triplet_weight,
                                            ce_weight=cfg.ce_weight, need_dx=False)
        if not np.isfinite(total):
            raise NumericError(f"loss became non-finite at step {step}")
        sgd_step(model, grads, lr, cfg.weight_decay, cfg.grad_clip, cfg.momentum, velocity)
        trace.append(TraceRow(step, lr, total, parts["triplet"], parts["ce"], parts["active_triplets"]))
        if log_every and step % log_every == 0:
            print(f"step {step:5d} lr {lr:.4f} loss {total:.4f} "
                  f"triplet {parts['triplet']:.4f} ce {parts['ce']:.4f}", flush=True)
        if on_step is not None:
            on_step(step, model)
    return model, trace


def summarize_trace(trace: list[TraceRow], window: int = 50) -> list[dict]:
    """Window means of the loss columns."""
    out = []
    for i in range(0, len(trace), window):
        chunk = trace[i:i + window]
        out.append({
            "start": chunk[0].step,
            "total": float(np.mean([r.total for r in chunk])),
            "triplet": float(np.mean([r.triplet for r in chunk])),
            "ce": float(np.mean([r.ce for r in chunk])),
        })
    return out


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in dataclasses.fields(TraceRow)])
        for r in trace:
            w.writerow([r.step, repr(r.lr), repr(r.total), repr(r.triplet), repr(r.ce),
                        r.active_triplets])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: GaitModel) -> None:
    lines = [f"config {l}" for l in model.meta.get("config", "").splitlines() if l]
    lines.append(f"config c_in={model.meta.get('c_in', next(iter(model.branches.values())).c_in)}")
    lines.append(f"config num_classes={model.head.config.num_classes}")
    offset = 0
    chunks = []
    for name, p in model.named_parameters():
        lines.append(f"param {name} {'x'.join(map(str, p.shape))} {offset}")
        offset += p.size
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    manifest = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> GaitModel:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, mlen = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    manifest = buf[_CKPT_HEAD.size:_CKPT_HEAD.size + mlen].decode()
    cfg_lines, params = [], []
    extra = {}
    for line in manifest.splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "config":
            key, _, val = rest.partition("=")
            if key in ("c_in", "num_classes"):
                extra[key] = int(val)
            else:
                cfg_lines.append(rest)
        elif kind == "param":
            name, shape, off = rest.split()
            params.append((name, tuple(int(x) for x in shape.split("x")), int(off)))
        elif line:
            raise FormatError(f"{path}: bad manifest line {line!r}")
    cfg = parse_config("\n".join(cfg_lines))
    model = build_model(cfg, extra["c_in"], extra["num_classes"])
    payload = np.frombuffer(buf, "<f8", offset=_CKPT_HEAD.size + mlen)
    own = dict(model.named_parameters())
    if [p[0] for p in params] != list(own):
        raise FormatError(f"{path}: parameter manifest does not match the configured model")
    for name, shape, off in params:
        size = int(np.prod(shape))
        if off + size > payload.size:
            raise FormatError(f"{path}: payload truncated at parameter {name}")
        if own[name].shape != shape:
            raise FormatError(f"{path}: {name} has shape {shape}, model expects {own[name].shape}")
        own[name][...] = payload[off:off + size].reshape(shape)
    return model
