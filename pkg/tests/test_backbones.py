import math

import mpmath
import pytest
import torch

from reimts.backbones import BackboneSpec, TimeEncoding, build_backbone, masked_softmax
from reimts.batching import LevelBatch, QueryBatch
from reimts.types import Representation, RepresentationKind, ScaleStack

from conftest import central_difference_check, toy_batch

KINDS = ["temporal", "variable", "observation"]
SHAPES = {
    "temporal": lambda B, P, L, V, D: (B, P, L, D),
    "variable": lambda B, P, L, V, D: (B, P, V, D),
    "observation": lambda B, P, L, V, D: (B, P, L, V, D),
}


def make(kind, V=2, D=4, levels=2, span=48.0, seed=0):
    torch.manual_seed(seed)
    return build_backbone(BackboneSpec(kind, V, D, num_levels=levels, time_scale=span)).double()


@pytest.mark.parametrize("kind", KINDS)
def test_shape_contract(kind, rng):
    stack = ScaleStack((48, 24, 12))
    batch = toy_batch(rng, stack, num_variables=3, num_samples=2, max_obs=30)
    bb = make(kind, V=3, D=5, levels=3)
    for lvl in batch.levels:
        rep = bb.encode(lvl)
        B, P, L, V = lvl.values.shape
        assert rep.data.shape == SHAPES[kind](B, P, L, V, 5)
        assert rep.kind is RepresentationKind(kind) and rep.scale_level == lvl.level
        assert torch.isfinite(rep.data).all()
    out = bb.decode(bb.encode(batch.levels[-1]), batch.levels[-1], batch.query)
    assert out.shape == batch.query.timestamps.shape


@pytest.mark.parametrize("kind", KINDS)
def test_mask_insensitivity(kind, rng):
    stack = ScaleStack((48, 24))
    batch = toy_batch(rng, stack, num_variables=3, num_samples=3, max_obs=25)
    bb = make(kind, V=3)
    for lvl in batch.levels:
        noise = torch.from_numpy(rng.standard_normal(lvl.values.shape) * 100)
        pad = lvl.mask == 0
        dirty = lvl.replace(values=torch.where(pad, noise, lvl.values), timestamps=torch.where(pad, noise.abs(), lvl.timestamps))
        a, b = bb.encode(lvl).data, bb.encode(dirty).data
        assert torch.equal(a, b)
        assert torch.equal(bb.decode(bb.encode(lvl), lvl, batch.query), bb.decode(bb.encode(dirty), dirty, batch.query))


def test_temporal_empty_subsample_keeps_initial_state(rng):
    bb = make("temporal", V=2, D=4)
    with torch.no_grad():
        bb.h0[1].copy_(torch.tensor([0.1, -0.2, 0.3, 0.4]))
    z = torch.zeros(1, 2, 3, 2, dtype=torch.float64)
    m = z.clone()
    m[0, 0, :2, 0] = 1
    lvl = LevelBatch(values=m * 0.7, mask=m, timestamps=m * 5.0, level=2)
    rep = bb.encode(lvl).data
    assert torch.equal(rep[0, 1], bb.h0[1].expand(3, 4))
    assert not torch.equal(rep[0, 0, 0], bb.h0[1])
    # rows after the last observation carry the state forward unchanged
    assert torch.equal(rep[0, 0, 2], rep[0, 0, 1])


def test_observation_permutation_equivariance(rng):
    stack = ScaleStack((48, 24))
    batch = toy_batch(rng, stack, num_variables=4, num_samples=2, max_obs=20)
    bb = make("observation", V=4, D=6)
    perm = torch.tensor([2, 0, 3, 1])
    lvl = batch.levels[1]
    out = bb.encode(lvl).data
    permuted = lvl.replace(values=lvl.values[..., perm], mask=lvl.mask[..., perm], timestamps=lvl.timestamps[..., perm])
    with torch.no_grad():
        bb.var_emb[1].copy_(bb.var_emb[1][perm])
    out_p = bb.encode(permuted).data
    assert torch.allclose(out_p, out[..., perm, :], rtol=0, atol=1e-12)


def test_variable_pool_matches_scalar_oracle():
    """Hand-rolled masked attention pooling in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    V, D = 2, 3
    bb = make("variable", V=V, D=D, levels=1, span=10.0, seed=3)
    t = torch.tensor([[1.0, 2.0], [4.0, 0.0], [7.5, 0.0]], dtype=torch.float64)
    m = torch.tensor([[1, 1], [1, 0], [1, 0]], dtype=torch.float64)
    z = torch.tensor([[0.3, -1.2], [0.8, 0.0], [-0.4, 0.0]], dtype=torch.float64)
    lvl = LevelBatch(z[None, None], m[None, None], t[None, None], 1)
    got = bb.encode(lvl).data[0, 0]

    W = bb.inp[0].weight.tolist(); b = bb.inp[0].bias.tolist()
    emb = bb.var_emb[0].tolist(); a = bb.att[0].weight[0].tolist()
    Wp = bb.proj[0].weight.tolist(); bp = bb.proj[0].bias.tolist()

    def enc(x):
        x = mpmath.mpf(x) / 10
        feats = [x]
        for k in range(4):
            feats.append(mpmath.sin(2 * mpmath.pi * 2**k * x))
        for k in range(4):
            feats.append(mpmath.cos(2 * mpmath.pi * 2**k * x))
        return feats

    for v in range(V):
        rows = [l for l in range(3) if m[l, v] == 1]
        fs = []
        for l in rows:
            x = [mpmath.mpf(z[l, v].item())] + enc(t[l, v].item())
            fs.append([mpmath.tanh(sum(W[d][i] * x[i] for i in range(len(x))) + b[d] + emb[v][d]) for d in range(D)])
        s = [sum(a[d] * f[d] for d in range(D)) for f in fs]
        mx = max(s)
        w = [mpmath.exp(x - mx) for x in s]
        w = [x / sum(w) for x in w]
        pooled = [sum(w[i] * fs[i][d] for i in range(len(fs))) for d in range(D)]
        expect = [sum(Wp[e][d] * pooled[d] for d in range(D)) + bp[e] + emb[v][e] for e in range(D)]
        for e in range(D):
            assert abs(float(expect[e]) - got[v, e].item()) < 1e-6


def test_zero_decoder_head_gives_zero_predictions(rng):
    stack = ScaleStack((48, 24))
    batch = toy_batch(rng, stack, num_variables=3)
    for kind in KINDS:
        bb = make(kind, V=3)
        with torch.no_grad():
            last = bb.head.out[-1]
            last.weight.zero_(); last.bias.zero_()
        rep = bb.encode(batch.levels[-1])
        zero = rep.replace(torch.zeros_like(rep.data))
        assert torch.all(bb.decode(zero, batch.levels[-1], batch.query) == 0)


def test_decode_physionet_shape():
    V = 36
    bb = make("temporal", V=V, D=8, levels=1, span=36.0)
    lvl = LevelBatch(*(torch.zeros(1, 1, 4, V, dtype=torch.float64) for _ in range(3)), level=1)
    q = QueryBatch(torch.full((1, 3, V), 40.0, dtype=torch.float64), torch.ones(1, 3, V, dtype=torch.float64))
    assert bb.decode(bb.encode(lvl), lvl, q).shape == (1, 3, 36)


def test_encode_rejects_bad_shapes():
    bb = make("variable", V=2, levels=1)
    bad = LevelBatch(*(torch.zeros(1, 1, 3, 5, dtype=torch.float64) for _ in range(3)), level=1)
    with pytest.raises(ValueError, match="expected"):
        bb.encode(bad)
    with pytest.raises(ValueError, match="level"):
        bb.encode(LevelBatch(*(torch.zeros(1, 1, 3, 2, dtype=torch.float64) for _ in range(3)), level=2))
    rep = Representation("temporal", torch.zeros(1, 1, 3, 4, dtype=torch.float64), 1)
    good = LevelBatch(*(torch.zeros(1, 1, 3, 2, dtype=torch.float64) for _ in range(3)), level=1)
    with pytest.raises(ValueError, match="decode"):
        bb.decode(rep, good, QueryBatch(torch.zeros(1, 1, 2), torch.zeros(1, 1, 2)))


def test_spec_kind_mismatch():
    from reimts.backbones import TemporalRecurrent

    with pytest.raises(ValueError):
        TemporalRecurrent(BackboneSpec("variable", 2))


@pytest.mark.parametrize("kind", KINDS)
def test_determinism(kind, rng):
    batch = toy_batch(rng, ScaleStack((48, 24)), num_variables=2)
    outs = []
    for _ in range(2):
        bb = make(kind, seed=11)
        outs.append(bb.decode(bb.encode(batch.levels[1]), batch.levels[1], batch.query))
    assert torch.equal(*outs)


@pytest.mark.parametrize("kind", KINDS)
def test_backbone_gradients_match_finite_differences(kind, rng):
    stack = ScaleStack((48,))
    batch = toy_batch(rng, stack, num_variables=2, num_samples=2, max_obs=6)
    bb = make(kind, V=2, D=4, levels=1)
    lvl = batch.levels[0]
    assert lvl.values.shape[2] <= 6

    def loss():
        pred = bb.decode(bb.encode(lvl), lvl, batch.query)
        return (((pred - batch.query.truth) * batch.query.mask) ** 2).sum()

    assert central_difference_check(bb, loss) < 1e-4


def test_masked_softmax_all_masked_is_zero():
    s = torch.randn(2, 3, dtype=torch.float64)
    m = torch.tensor([[0, 0, 0], [1, 0, 1]], dtype=torch.float64)
    w = masked_softmax(s, m)
    assert torch.all(w[0] == 0)
    assert math.isclose(w[1].sum().item(), 1.0) and w[1, 1] == 0


def test_time_encoding():
    te = TimeEncoding(48.0)
    out = te(torch.tensor([0.0, 48.0], dtype=torch.float64))
    assert out.shape == (2, 9)
    assert out[0, 0] == 0 and out[1, 0] == 1
