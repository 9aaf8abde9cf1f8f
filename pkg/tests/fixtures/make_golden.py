"""Regenerate the golden field fixtures with the brute-force oracle.

    python3 tests/fixtures/make_golden.py

Inputs: a 2-frame 8x8x4 feature sequence, its PGM masks, and branches built
from ``random:<seed>`` weights exactly as the ``field`` command builds them.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from oracles import field_oracle  # noqa: E402

from gaitfield.container import read_gff, write_gff, write_pgm_stack  # noqa: E402
from gaitfield.matching import init_branch  # noqa: E402

SEED = 7
CHANNELS = 8
DH = DW = 2
CASES = {"static": 0, "dynamic": 1}


def make_inputs():
    rng = np.random.default_rng(2024)
    feats = rng.normal(size=(2, 8, 8, 4))
    masks = np.zeros((2, 8, 8))
    masks[:, 1:7, 2:6] = 1
    masks[1, 0, 3] = 1
    return feats, masks


def main():
    feats, masks = make_inputs()
    write_gff(HERE / "walk2.gff", feats)
    write_pgm_stack(HERE / "walk2.pgm", masks)
    # the fixtures are generated from what is on disk, as the CLI sees it
    feats = read_gff(HERE / "walk2.gff")
    for kind, dl in CASES.items():
        branch = init_branch(np.random.default_rng(SEED), dl, feats.shape[-1], CHANNELS, DH, DW)
        write_gff(HERE / f"walk2.{kind}.golden.gff", field_oracle(feats, masks, branch))
    # a zero field renders as an all-white image, written here byte by byte
    write_gff(HERE / "zero_field.gff", np.zeros((1, 4, 6, 2)))
    (HERE / "zero_field.white.ppm").write_bytes(b"P6\n6 4\n255\n" + b"\xff" * (4 * 6 * 3))


if __name__ == "__main__":
    main()
