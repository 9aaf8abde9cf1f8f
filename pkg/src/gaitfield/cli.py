"""``gaitfield`` command-line entry point.

Exit codes: 0 success, 2 I/O, 3 file format, 4 configuration, 5 numeric
failure (including failed checks).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .container import (
    load_feature_sequence,
    load_mask_sequence,
    read_gff,
    write_gff,
    write_pgm_stack,
)
from .errors import ConfigError, FormatError, GaitFieldError, NumericError
from .evaluation import (
    SyntheticWalkerSpec,
    WalkerSample,
    default_split,
    evaluate,
    synth_walkers,
)
from .matching import (
    GaitFeatureField,
    MatchingBranch,
    compute_field,
    init_branch,
    suppression_mask,
)
from .viz import FlowColorMap, flow_color_encode, write_image

EXIT_IO, EXIT_FORMAT, EXIT_CONFIG, EXIT_NUMERIC = 2, 3, 4, 5

_SYNTH_KEYS = {"ids": "num_ids", "seqs": "seqs_per_id"}


def parse_synth_spec(text: str) -> SyntheticWalkerSpec:
    """``synth:ids=8,seqs=6,frames=20,seed=0``; any omitted key keeps its default."""
    if not text.startswith("synth:"):
        raise ConfigError(f"dataset must look like 'synth:key=value,...', got {text!r}")
    fields = {f.name: f for f in dataclasses.fields(SyntheticWalkerSpec)}
    kwargs = {}
    for item in filter(None, (s.strip() for s in text[len("synth:"):].split(","))):
        key, sep, raw = item.partition("=")
        name = _SYNTH_KEYS.get(key.strip(), key.strip())
        if not sep or name not in fields or name == "signatures":
            raise ConfigError(f"bad synthetic dataset entry {item!r}")
        default = fields[name].default
        try:
            if isinstance(default, bool):
                kwargs[name] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kwargs[name] = type(default)(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value in {item!r}") from exc
    return SyntheticWalkerSpec(**kwargs)


def _weights_branch(spec: str, kind: str, c_in: int, args) -> MatchingBranch:
    dl = args.dl if args.dl is not None else (0 if kind == "static" else 1)
    if (kind == "static") != (dl == 0):
        raise ConfigError("the static branch needs --dl 0 and the dynamic branch --dl >= 1")
    if spec.startswith("random:"):
        try:
            seed = int(spec[len("random:"):])
        except ValueError as exc:
            raise ConfigError(f"bad weights spec {spec!r}") from exc
        return init_branch(np.random.default_rng(seed), dl, c_in, args.channels, args.dh, args.dw)
    from .training import load_checkpoint

    model = load_checkpoint(spec)
    if kind not in model.branches:
        raise ConfigError(f"checkpoint has no {kind} branch")
    branch = model.branches[kind]
    t = branch.template
    if (t.delta_h, t.delta_w, branch.delta_l) != (args.dh, args.dw, dl):
        raise ConfigError(f"checkpoint branch uses dh={t.delta_h} dw={t.delta_w} dl={branch.delta_l}")
    return branch


def verify_field(G: GaitFeatureField, masks: np.ndarray, branch: MatchingBranch) -> list[str]:
    """Problems with a field: template bounds and zero background."""
    problems = []
    t = branch.template
    f = G.frames
    if np.any(np.abs(f[..., 0]) > t.delta_h) or np.any(np.abs(f[..., 1]) > t.delta_w):
        problems.append("field leaves the template bounds")
    q = masks[:len(G)]
    if np.any(f[q == 0] != 0):
        problems.append("background pixels have non-zero directions")
    if not np.all(np.isfinite(f)):
        problems.append("field is not finite")
    return problems


def cmd_field(args) -> int:
    seq = load_feature_sequence(args.features)
    L, h, w = len(seq), *seq.shape[:2]
    masks = load_mask_sequence(args.masks, h, w, expected_frames=L)
    branch = _weights_branch(args.weights, args.branch, seq.shape[2], args)
    G = compute_field(seq, masks, branch)
    if args.verify:
        problems = verify_field(G, masks.frames, branch)
        if problems:
            raise NumericError("; ".join(problems))
    write_gff(args.out, G.frames)
    print(f"{G.kind} field {G.frames.shape} -> {args.out}")
    return 0


def cmd_suppress(args) -> int:
    frames = read_gff(args.field)
    if frames.shape[-1] != 2:
        raise FormatError(f"{args.field}: expected a 2-channel field, got {frames.shape[-1]}")
    keep = suppression_mask(frames, args.m, args.p, np.random.default_rng(args.seed))
    write_gff(args.out, frames * keep)
    print(f"zeroed {int((keep == 0).sum())} of {keep.size} pixels -> {args.out}")
    return 0


def _load_dataset(text: str) -> list[WalkerSample]:
    path = Path(text)
    if not text.startswith("synth:") and path.is_dir():
        return load_synth_dir(path)
    return synth_walkers(parse_synth_spec(text))


def cmd_train(args) -> int:
    from .training import parse_config, save_checkpoint, train, write_trace_csv

    cfg = parse_config(Path(args.config).read_text())
    dataset = _load_dataset(args.dataset)
    split = default_split(dataset)
    train_set = [s for s in dataset if split[s.sequence_id] == "train"]
    model, trace = train(train_set, cfg, log_every=args.log_every)
    save_checkpoint(args.out, model)
    trace_path = args.trace or str(args.out) + ".trace.csv"
    write_trace_csv(trace_path, trace)
    print(f"checkpoint -> {args.out}; loss trace -> {trace_path}")
    return 0


def cmd_eval(args) -> int:
    from .training import load_checkpoint

    model = load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.dataset)
    report = evaluate(model, dataset, default_split(dataset))
    Path(args.report).write_text("\n".join(report.records()) + "\n")
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, TOLERANCE

    if args.scale != "tiny":
        raise ConfigError("only --scale tiny is available")
    ok = True
    for name, fn in SUITES.items():
        r = fn(args.eps)
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {name}: max rel err {r.max_rel_error:.3e} "
              f"over {r.checked} coordinates (tol {TOLERANCE:g})")
    return 0 if ok else EXIT_NUMERIC


def cmd_viz(args) -> int:
    frames = read_gff(args.field)
    if frames.shape[-1] != 2:
        raise FormatError(f"{args.field}: expected a 2-channel field, got {frames.shape[-1]}")
    if not 0 <= args.frame < frames.shape[0]:
        raise ConfigError(f"frame {args.frame} out of range [0, {frames.shape[0]})")
    img = flow_color_encode(frames[args.frame], FlowColorMap(args.maxmag))
    write_image(args.out, img)
    print(f"frame {args.frame} -> {args.out}")
    return 0


INDEX_NAME = "index.txt"


def write_synth_dir(out: Path, dataset: list[WalkerSample]) -> None:
    """One GFF feature file and one PGM mask stack per sequence, plus an index."""
    out.mkdir(parents=True, exist_ok=True)
    try:
        split = default_split(dataset)
    except ConfigError:
        split = {}   # too few sequences per identity for a probe/gallery split
    lines = ["# sequence_id identity covariate split"]
    for s in dataset:
        write_gff(out / f"{s.sequence_id}.gff", s.features.frames)
        write_pgm_stack(out / f"{s.sequence_id}.pgm", s.masks.frames)
        lines.append(f"{s.sequence_id} {s.identity} {s.covariate} {split.get(s.sequence_id, '-')}")
    (out / INDEX_NAME).write_text("\n".join(lines) + "\n")


def load_synth_dir(root: Path) -> list[WalkerSample]:
    index = root / INDEX_NAME
    out = []
    for line in index.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{index}: bad line {line!r}")
        sid, ident, cov, _ = parts
        feats = load_feature_sequence(root / f"{sid}.gff", source_tag="synth")
        masks = load_mask_sequence(root / f"{sid}.pgm", *feats.shape[:2], expected_frames=len(feats))
        out.append(WalkerSample(sid, int(ident), cov, feats, masks))
    return out


def cmd_synth(args) -> int:
    spec = SyntheticWalkerSpec(num_ids=args.ids, seqs_per_id=args.seqs, frames=args.frames,
                               recolored_per_id=min(args.recolored, args.seqs), seed=args.seed)
    dataset = synth_walkers(spec)
    write_synth_dir(Path(args.out), dataset)
    print(f"{len(dataset)} sequences -> {args.out}")
    return 0


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, keeping exit code 2 for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("field", help="compute a static or dynamic direction field")
    f.add_argument("--features", required=True, help="GFF feature sequence (L, h, w, C_in)")
    f.add_argument("--masks", required=True, help="GFF or PGM-stack silhouettes")
    f.add_argument("--branch", choices=("static", "dynamic"), required=True)
    f.add_argument("--dh", type=int, default=3)
    f.add_argument("--dw", type=int, default=3)
    f.add_argument("--dl", type=int, default=None, help="default 0 (static) or 1 (dynamic)")
    f.add_argument("--weights", default="random:0", help="checkpoint path or random:<seed>")
    f.add_argument("--channels", type=int, default=16, help="encoder width for random weights")
    f.add_argument("--out", required=True)
    f.add_argument("--verify", action="store_true", help="check bounds and zero background")
    f.set_defaults(func=cmd_field)

    s = sub.add_parser("suppress", help="random suppression of high-magnitude pixels")
    s.add_argument("--field", required=True)
    s.add_argument("--m", type=float, default=0.5)
    s.add_argument("--p", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_suppress)

    t = sub.add_parser("train", help="train on a synthetic dataset")
    t.add_argument("--config", required=True, help="key=value config file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--dataset", default="synth:", help="synth:<key=value,...> or a synth directory")
    t.add_argument("--trace", default=None, help="loss trace CSV (default <out>.trace.csv)")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rank-k retrieval on a synthetic dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", default="synth:")
    e.add_argument("--report", required=True, help="key=value report path")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scale", default="tiny")
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("viz", help="render one field frame as a colour image")
    v.add_argument("--field", required=True)
    v.add_argument("--frame", type=int, default=0)
    v.add_argument("--maxmag", type=float, default=1.0)
    v.add_argument("--out", required=True, help=".png for PNG, anything else for binary PPM")
    v.set_defaults(func=cmd_viz)

    y = sub.add_parser("synth", help="write a synthetic walker dataset")
    y.add_argument("--ids", type=int, default=8)
    y.add_argument("--seqs", type=int, default=6)
    y.add_argument("--frames", type=int, default=20)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--recolored", type=int, default=2, help="recolored sequences per identity")
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GaitFieldError as exc:
        code, msg = exc.exit_code, exc
    except OSError as exc:
        code, msg = EXIT_IO, exc
    print(f"gaitfield {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
