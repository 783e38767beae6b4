import numpy as np
import pytest
import torch

from reimts.backbones import BackboneSpec
from reimts.batching import QueryBatch
from reimts.model import Ablation, DecodeMode, ReIMTS, ReimtsConfig, masked_mse_loss
from reimts.splitting import build_levels
from reimts.types import RawSample, ScaleStack, align_and_pad

from conftest import central_difference_check, random_sample, toy_batch

KINDS = ["temporal", "variable", "observation"]


def model(kind, periods, V=2, D=4, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ReimtsConfig(ScaleStack(periods), BackboneSpec(kind, V, D, time_scale=periods[0]), **kw)
    return ReIMTS(cfg).double()


def zero_fusion(m):
    with torch.no_grad():
        for f in m.fusion:
            f.ff.weight.zero_()
            f.ff.bias.zero_()


@pytest.mark.parametrize("kind", KINDS)
def test_single_level_is_bare_backbone(kind, rng):
    batch = toy_batch(rng, ScaleStack((48,)), num_variables=3)
    m = model(kind, (48,), V=3)
    bb = m.backbone
    lvl = batch.levels[0]
    assert torch.equal(m(batch), bb.decode(bb.encode(lvl), lvl, batch.query))
    assert m.projection is None and len(m.fusion) == 0


@pytest.mark.parametrize("kind", KINDS)
def test_zero_fusion_lowest_equals_level_two_backbone(kind, rng):
    batch = toy_batch(rng, ScaleStack((48, 24)), num_variables=3)
    m = model(kind, (48, 24), V=3, decode_mode="lowest")
    zero_fusion(m)
    bb = m.backbone
    lvl = batch.levels[1]
    assert torch.equal(m(batch), bb.decode(bb.encode(lvl), lvl, batch.query))


@pytest.mark.parametrize("periods", [(48, 24), (48, 24, 12)])
@pytest.mark.parametrize("kind", KINDS)
def test_zero_fusion_neutral_to_upper_encoders(kind, periods, rng):
    batch = toy_batch(rng, ScaleStack(periods), num_variables=3)
    m = model(kind, periods, V=3, decode_mode="lowest")
    zero_fusion(m)
    before = m(batch)
    with torch.no_grad():
        for level in range(1, len(periods)):
            for p in m.backbone.encoder_parameters(level):
                p.add_(torch.randn_like(p) * 3.0)
    assert torch.equal(m(batch), before)


def test_invocation_counts(rng):
    for N, periods in [(1, (48,)), (2, (48, 24)), (4, (48, 24, 12, 6))]:
        batch = toy_batch(rng, ScaleStack(periods))
        for kind in KINDS:
            m = model(kind, periods)
            m(batch)
            assert m.calls == {"encode": N, "fuse": N - 1, "decode": 1} or (N == 1 and m.calls == {"encode": 1, "decode": 1})


def test_physionet_shaped_shape_walk(rng):
    V = 36
    stack = ScaleStack((48, 24, 12))
    raws = [random_sample(rng, V, 300, 48.0, grid=1.0, sample_id=i) for i in range(4)]
    samples = [build_levels(align_and_pad(s), stack) for s in raws]
    for s, ms in zip(raws, samples):
        for n, lvl in enumerate(ms.levels, start=1):
            P = stack.num_subsamples(n)
            T = stack.periods[n - 1]
            counts = np.zeros((P, V), dtype=int)
            for t, v in zip(s.timestamps, s.variable_ids):
                k = 0 if t == 0 else int(next(k for k in range(P) if T * k < t <= T * (k + 1)))
                counts[k, v] += 1
            assert lvl.values.shape == (P, max(1, counts.max()), V)
    from reimts.batching import collate
    from reimts.types import ForecastQuery

    q = ForecastQuery(np.full((3, V), 50.0), np.ones((3, V), dtype=np.int8), 48.0, 12.0, np.zeros((3, V)))
    batch = collate(samples, [q] * 4, torch.float64)
    assert [lv.values.shape[1] for lv in batch.levels] == [1, 2, 4]
    for kind in KINDS:
        m = model(kind, (48, 24, 12), V=V, D=8)
        assert m(batch).shape == (4, 3, V)


def test_loss_examples():
    q = QueryBatch(torch.zeros(1, 1, 2), torch.tensor([[[1.0, 0.0]]]), torch.tensor([[[1.0, 0.0]]]))
    assert masked_mse_loss(torch.tensor([[[3.0, 1.0]]]), q).item() == 4.0
    truth = torch.randn(2, 3, 4)
    full = QueryBatch(torch.zeros(2, 3, 4), torch.ones(2, 3, 4), truth)
    assert masked_mse_loss(truth.clone(), full).item() == 0.0


def test_loss_requires_targets():
    q = QueryBatch(torch.zeros(1, 1, 2), torch.zeros(1, 1, 2), torch.zeros(1, 1, 2))
    with pytest.raises(ValueError, match="no forecast targets"):
        masked_mse_loss(torch.zeros(1, 1, 2), q)


def test_loss_ignores_unmasked_predictions(rng):
    batch = toy_batch(rng, ScaleStack((48, 24)), num_variables=3, num_samples=4)
    m = model("temporal", (48, 24), V=3)
    pred = m(batch)
    off = batch.query.mask == 0
    assert off.any()
    loss = masked_mse_loss(pred, batch.query)
    noisy = torch.where(off, pred + torch.randn_like(pred) * 1e6, pred)
    assert torch.equal(masked_mse_loss(noisy, batch.query), loss)
    p = pred.detach().requires_grad_()
    masked_mse_loss(p, batch.query).backward()
    assert torch.all(p.grad[off] == 0)


@pytest.mark.parametrize("mode", ["concat", "lowest"])
@pytest.mark.parametrize("kind", KINDS)
def test_end_to_end_gradients(kind, mode, rng):
    stack = ScaleStack((48, 24))
    batch = None
    while batch is None or batch.levels[0].values.shape[2] != 4:
        batch = toy_batch(rng, stack, num_variables=2, num_samples=2, max_obs=8)
    m = model(kind, (48, 24), V=2, D=4, decode_mode=mode)
    with torch.no_grad():
        for f in m.fusion:
            f.ff.weight.uniform_(-0.5, 0.5)
            f.ff.bias.fill_(0.2)
    assert central_difference_check(m, lambda: masked_mse_loss(m(batch), batch.query)) < 1e-4


def test_rp_iarf_with_zero_global_equals_full_with_zero_alpha(rng):
    batch = toy_batch(rng, ScaleStack((48, 24)), num_variables=3)
    outs = []
    for ablation in ("rp_iarf", "full"):
        m = model("variable", (48, 24), V=3, ablation=ablation, seed=5)
        with torch.no_grad():
            for p in m.backbone.encoder_parameters(1):
                p.zero_()
        if ablation == "full":
            zero_fusion(m)
        outs.append(m(batch))
    assert torch.equal(*outs)


def test_wo_iarf_forces_concat(rng):
    cfg = ReimtsConfig(ScaleStack((48, 24)), BackboneSpec("temporal", 2), decode_mode="lowest", ablation="wo_iarf")
    assert cfg.effective_decode_mode is DecodeMode.CONCAT
    m = ReIMTS(cfg).double()
    batch = toy_batch(rng, ScaleStack((48, 24)))
    before = m(batch)
    with torch.no_grad():
        for p in m.backbone.encoder_parameters(1):
            p.add_(1.0)
    assert not torch.equal(m(batch), before)
    assert "fuse" not in m.calls


def test_rp_split_on_uniform_data_matches_full():
    V = 2
    t = np.tile(np.arange(1, 49, dtype=float), V)
    s = RawSample(t, np.sin(t) + np.repeat(np.arange(V), 48), np.repeat(np.arange(V), 48), 48.0, V)
    from reimts.batching import collate
    from reimts.types import ForecastQuery

    q = ForecastQuery(np.full((1, V), 50.0), np.ones((1, V), dtype=np.int8), 48.0, 12.0, np.ones((1, V)))
    stack = ScaleStack((48, 24, 12))
    outs = []
    for ablation in ("full", "rp_split"):
        m = model("observation", (48, 24, 12), V=V, ablation=ablation, seed=2)
        batch = collate([build_levels(align_and_pad(s), stack, m.config.split_mode)], [q], torch.float64)
        outs.append(m(batch))
    assert torch.equal(*outs)


def test_rp_sample_keeps_one_subsample(rng):
    m = model("variable", (48, 24, 12), ablation="rp_sample")
    batch = toy_batch(rng, ScaleStack((48, 24, 12)), mode=m.config.split_mode)
    assert [lv.values.shape[1] for lv in batch.levels] == [1, 1, 1]
    assert m(batch).shape == batch.query.timestamps.shape


def test_config_round_trip():
    cfg = ReimtsConfig(ScaleStack((48, 24)), BackboneSpec("observation", 5, 16, 2, time_scale=48.0), "lowest", "rp_split", False)
    assert ReimtsConfig.from_dict(cfg.to_dict()) == cfg
    assert [a.value for a in Ablation] == ["full", "rp_sample", "rp_split", "rp_iarf", "wo_iarf"]


def test_loss_independent_of_prediction_layout(rng):
    batch = toy_batch(rng, ScaleStack((48, 24)), num_variables=3, num_samples=6)
    pred = torch.randn(6, 3, 3, dtype=torch.float64)
    strided = pred.transpose(1, 2).contiguous().transpose(1, 2)
    assert not strided.is_contiguous()
    assert torch.equal(masked_mse_loss(strided, batch.query), masked_mse_loss(pred, batch.query))


def test_encoder_parameters_rejects_bad_level():
    m = model("temporal", (48, 24))
    with pytest.raises(ValueError, match="level"):
        m.backbone.encoder_parameters(0)
