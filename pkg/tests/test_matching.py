import numpy as np
import pytest
from oracles import encoder_oracle, field_oracle, match_pixel_oracle

from gaitfield.container import FeatureSequence, MaskSequence
from gaitfield.errors import ConfigError
from gaitfield.matching import (
    GaitFeatureField,
    MatchingBranch,
    assign_directions,
    branch_backward,
    branch_forward,
    build_template,
    compute_field,
    encode_and_mask,
    field_magnitude,
    init_branch,
    init_encoder,
    neighborhood_distribution,
    texture_suppress,
)
from gaitfield.tensor import ConvLayer, finite_difference_grad, relative_error


def _static_field(frames):
    return GaitFeatureField("static", np.asarray(frames, dtype=float), 0)


def test_template_examples():
    t = build_template(0, 0)
    assert t.K == 1 and t.rows.tolist() == [[0, 0]]
    t = build_template(1, 1)
    assert t.K == 9
    assert t.rows[0].tolist() == [-1, -1] and t.rows[4].tolist() == [0, 0]
    assert t.rows[-1].tolist() == [1, 1]
    assert build_template(3, 3).K == 49
    assert t.index(1, -1) == 6 and t.rows[6].tolist() == [1, -1]
    with pytest.raises(ConfigError):
        build_template(-1, 0)


def test_encode_and_mask_examples(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    enc = init_encoder(rng, 3, 6)
    assert np.all(encode_and_mask(x, np.zeros((2, 5, 4)), enc) == 0)
    ident = [ConvLayer(np.eye(3)[:, :, None, None], np.zeros(3), None)]
    assert np.array_equal(encode_and_mask(x, np.ones((2, 5, 4)), ident), x)
    m = (rng.random((2, 5, 4)) > 0.4).astype(float)
    out = encode_and_mask(x, m, enc)
    for l in range(2):
        assert np.max(np.abs(out[l] - encoder_oracle(x[l], m[l], enc))) <= 1e-12


def test_distribution_examples(rng):
    t = build_template(1, 1)
    fk = rng.normal(size=(4, 5, 4))
    P = neighborhood_distribution(np.zeros((4, 5, 4)), fk, t)
    assert np.allclose(P, 1 / 9, atol=1e-15)
    fq = np.zeros((3, 3, 4))
    fk = np.zeros((3, 3, 4))
    fq[1, 1, 0] = 10
    fk[1, 2, 0] = 10
    P = neighborhood_distribution(fq, fk, t)
    assert P[1, 1].argmax() == t.index(0, 1) and P[1, 1].max() >= 1 - 1e-10


def test_distribution_matches_enumeration(rng):
    t = build_template(2, 1)
    fq, fk = rng.normal(size=(2, 8, 8, 4))
    P = neighborhood_distribution(fq, fk, t)
    assert np.max(np.abs(P.sum(-1) - 1)) <= 1e-12
    G = assign_directions(P, t)
    for i in range(8):
        for j in range(8):
            assert np.max(np.abs(G[i, j] - match_pixel_oracle(fq, fk, i, j, 2, 1))) <= 1e-10


def test_assign_directions_examples():
    t = build_template(1, 1)
    assert np.all(assign_directions(np.full((1, 9), 1 / 9), t) == 0)
    for k in range(9):
        assert np.array_equal(assign_directions(np.eye(9)[k][None], t)[0], t.rows[k])
    P = np.zeros(9)
    P[t.index(-1, 0)] = P[t.index(1, 0)] = 0.5
    assert np.allclose(assign_directions(P[None], t), 0)
    P = np.zeros(9)
    P[t.index(1, 0)], P[t.index(-1, 0)] = 0.75, 0.25
    assert np.allclose(assign_directions(P[None], t), [[0.5, 0.0]])
    with pytest.raises(ConfigError):
        assign_directions(np.ones((1, 4)) / 4, t)


def test_compute_field_examples(rng):
    static = init_branch(rng, 0, 4, 6, 1, 1)
    G = compute_field(FeatureSequence(np.zeros((1, 4, 4, 4))), MaskSequence(np.ones((1, 4, 4))), static)
    assert G.kind == "static" and len(G) == 1 and np.all(G.frames == 0)
    frame = rng.normal(size=(1, 6, 5, 4))
    seq = FeatureSequence(np.repeat(frame, 3, axis=0))
    masks = MaskSequence(np.ones((3, 6, 5)))
    dyn = MatchingBranch(static.encoder_q, static.encoder_k, 1, static.template)
    Gs = compute_field(seq, masks, static)
    Gd = compute_field(seq, masks, dyn)
    assert Gd.kind == "dynamic" and len(Gd) == 2
    assert np.max(np.abs(Gd.frames - Gs.frames[:2])) <= 1e-12
    with pytest.raises(ConfigError):
        compute_field(FeatureSequence(frame), MaskSequence(np.ones((1, 6, 5))), dyn)


def test_compute_field_matches_oracle(rng):
    branch = init_branch(rng, 1, 4, 5, 1, 1)
    x = rng.normal(size=(3, 6, 7, 4))
    m = (rng.random((3, 6, 7)) > 0.3).astype(float)
    G = compute_field(FeatureSequence(x), MaskSequence(m), branch)
    assert np.max(np.abs(G.frames - field_oracle(x, m, branch))) <= 1e-10


def test_compute_field_checks_channels(rng):
    branch = init_branch(rng, 0, 3, 4, 1, 1)
    with pytest.raises(ConfigError):
        compute_field(FeatureSequence(np.zeros((1, 4, 4, 4))), MaskSequence(np.ones((1, 4, 4))), branch)


def test_magnitude_examples(rng):
    assert np.all(field_magnitude(_static_field(np.zeros((1, 2, 2, 2)))) == 0)
    assert field_magnitude(np.array([[3.0, 4.0]]))[0] == 5.0
    t = build_template(2, 3)
    P = rng.dirichlet(np.full(t.K, 0.1), size=5000)
    assert np.all(field_magnitude(assign_directions(P, t)) <= np.hypot(2, 3) + 1e-12)


def test_texture_suppress_examples(rng):
    G = _static_field(rng.uniform(-1.5, 1.5, size=(2, 6, 6, 2)))
    assert np.array_equal(texture_suppress(G, 0.5, 0.0, rng).frames, G.frames)
    out = texture_suppress(G, 0.5, 1.0, rng).frames
    above = field_magnitude(G) > 0.5
    assert np.all(out[above] == 0)
    assert np.array_equal(out[~above], G.frames[~above])
    with pytest.raises(ConfigError):
        texture_suppress(G, -0.1, 0.5, rng)
    with pytest.raises(ConfigError):
        texture_suppress(G, 0.5, 1.5, rng)
    with pytest.raises(ConfigError):
        texture_suppress(GaitFeatureField("dynamic", G.frames, 1), 0.5, 0.5, rng)


def test_texture_suppress_binomial_fraction():
    rng = np.random.default_rng(0)
    frames = np.full((1, 100, 100, 2), 1.0)
    out = texture_suppress(_static_field(frames), 0.5, 0.5, rng).frames
    frac = np.mean(np.all(out == 0, axis=-1))
    assert 0.47 <= frac <= 0.53


def _tiny_instance(rng):
    branch = init_branch(rng, 1, 3, 3, 1, 1)
    for _, layer in branch.layers():
        layer.weights += rng.normal(scale=0.1, size=layer.weights.shape)
        layer.bias += rng.normal(scale=0.1, size=layer.bias.shape)
    x = rng.normal(size=(2, 3, 3, 3))
    m = np.ones((2, 3, 3))
    return branch, x, m


def test_backward_zero_upstream(rng):
    branch, x, m = _tiny_instance(rng)
    G, cache = branch_forward(x, m, branch)
    dx, grads = branch_backward(np.zeros_like(G), cache)
    assert np.all(dx == 0)
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads.values())
    with pytest.raises(ConfigError):
        branch_backward(G, None)


def test_backward_single_pixel_matches_finite_differences(rng):
    branch, x, m = _tiny_instance(rng)
    G, cache = branch_forward(x, m, branch)
    up = np.zeros_like(G)
    up[0, 1, 1] = [0.7, -1.3]
    dx, grads = branch_backward(up, cache)
    layer = branch.encoder_q[0]

    def f(flat):
        saved = layer.weights.copy()
        layer.weights[...] = flat.reshape(saved.shape)
        val = float(np.sum(branch_forward(x, m, branch)[0] * up))
        layer.weights[...] = saved
        return val

    assert relative_error(grads["q.0"][0], finite_difference_grad(f, layer.weights)) <= 1e-4
    fx = finite_difference_grad(lambda v: float(np.sum(branch_forward(v.reshape(x.shape), m, branch)[0] * up)), x)
    assert relative_error(dx, fx) <= 1e-4


def test_backward_zero_on_background_features(rng):
    branch, x, _ = _tiny_instance(rng)
    x = rng.normal(size=(2, 5, 5, 3))
    m = np.ones((2, 5, 5))
    m[:, 0, :] = 0
    m[:, :, 0] = 0
    G, cache = branch_forward(x, m, branch)
    R = rng.normal(size=G.shape)
    dx, _ = branch_backward(R, cache)
    # the conv receptive field still reaches masked pixels, so use a
    # mask that hides the whole frame to isolate the mask product itself
    m0 = np.zeros((2, 5, 5))
    G0, cache0 = branch_forward(x, m0, branch)
    dx0, grads0 = branch_backward(R, cache0)
    assert np.all(dx0 == 0)
    fd = finite_difference_grad(lambda v: float(np.sum(branch_forward(v.reshape(x.shape), m0, branch)[0] * R)), x)
    assert np.max(np.abs(fd)) <= 1e-10
    assert np.all(np.isfinite(dx))
