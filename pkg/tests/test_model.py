import dataclasses
import calendar

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedci import model, tensor as tn
from fedci.tensor import Tensor
from toy import TOY, toy_loss, toy_point


def utc(y, mo, d, h=0, mi=0):
    return calendar.timegm((y, mo, d, h, mi, 0))


def test_time_indices_examples():
    tod, dow = model.time_indices(utc(2018, 1, 1, 0, 5), 300, [0])
    assert (tod[0], dow[0]) == (1, 0)
    tod, _ = model.time_indices(utc(2018, 1, 3), 300, [0])
    assert tod[0] == 0
    tod, dow = model.time_indices(utc(2018, 1, 7, 23, 55), 300, [0, 1])
    assert list(tod) == [287, 0] and list(dow) == [6, 0]
    with pytest.raises(ValueError):
        model.time_indices(0, 7, [0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([60, 300, 900, 3600]))
def test_time_indices_match_calendar(t, interval):
    import datetime as dt

    tod, dow = model.time_indices(t, interval, [0])
    when = dt.datetime.fromtimestamp(t, tz=dt.timezone.utc)
    assert dow[0] == when.weekday()
    assert tod[0] == (when.hour * 3600 + when.minute * 60 + when.second) // interval


def tensors(p):
    return {k: Tensor(v) for k, v in p.items()}


def test_embed_time_examples():
    cfg = dataclasses.replace(TOY, d_td=1)
    p = model.init_params(cfg, range(3), 0)
    p["time_day"] = np.arange(cfg.steps_per_day, dtype=float)[:, None]
    tod = np.array([[3, 5, 7, 9], [0, 1, 2, 23]])
    e = model.embed_time(tod, np.zeros_like(tod), tensors(p)).data
    assert e.shape == (2, 4, 1, 1 + cfg.d_tw)
    np.testing.assert_array_equal(e[..., 0, 0], tod)
    same = model.embed_time(np.full((3, 4), 5), np.full((3, 4), 2), tensors(p)).data
    assert np.all(same == same[0, 0])


def test_embed_time_gradient_only_on_gathered_rows():
    p = model.init_params(TOY, range(3), 0)
    lv = tn.leaves(p)
    tod = np.array([[1, 1, 2, 2]])
    dow = np.array([[4, 4, 4, 4]])
    tn.total(model.embed_time(tod, dow, lv)).backward()
    used = np.zeros(TOY.steps_per_day, bool)
    used[[1, 2]] = True
    assert np.all(lv["time_day"].grad[~used] == 0) and np.all(lv["time_day"].grad[used] != 0)
    assert np.count_nonzero(lv["time_week"].grad.any(axis=1)) == 1


def test_embed_nodes_examples():
    cfg = dataclasses.replace(TOY, d_n=1)
    p = model.init_params(cfg, range(4), 0)
    p[model.NODE_EMB] = np.arange(4.0)[:, None]
    e = model.embed_nodes(np.array([2, 0, 3]), tensors(p)).data
    assert e.shape == (1, 1, 3, 1)
    np.testing.assert_array_equal(e[0, 0, :, 0], [2, 0, 3])
    lv = tn.leaves(p)
    tn.total(model.embed_nodes(np.array([1, 1]), lv)).backward()
    np.testing.assert_array_equal(lv[model.NODE_EMB].grad[:, 0], [0, 2, 0, 0])


def stack_params(prefix, d_in, d_out, k, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in model._stack_shapes(prefix, d_in, d_out, k):
        out[name] = rng.normal(size=shape) * (0.1 if name.endswith((".bias", ".beta")) else 1.0)
    return out


def test_mlp_blocks_constant_input_gives_zeros():
    p = {"s.0.weight": np.zeros((3, 4)), "s.0.bias": np.full(4, 2.5),
         "s.0.gamma": np.ones(4), "s.0.beta": np.zeros(4)}
    y = model.mlp_blocks(Tensor(np.ones((2, 3))), tensors(p), "s", 1)
    np.testing.assert_array_equal(y.data, np.zeros((2, 4)))


def test_mlp_blocks_shapes_and_grad_check():
    p = stack_params("s", 5, 5, 3)
    x = np.random.default_rng(1).normal(size=(2, 3, 5))
    assert model.mlp_blocks(Tensor(x), tensors(p), "s", 3).shape == (2, 3, 5)
    p["x"] = x
    f = lambda v: tn.total(model.mlp_blocks(v["x"], v, "s", 3))
    assert tn.grad_check(f, p) <= 1e-4


@pytest.mark.parametrize("fused", [True, False])
def test_mlp_blocks_fused_flag_same_values(fused):
    p = stack_params("s", 4, 6, 2)
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    ref = model.mlp_blocks(x, tensors(p), "s", 2, rng=np.random.default_rng(0), training=True, p=0.2, fused=False)
    got = model.mlp_blocks(x, tensors(p), "s", 2, rng=np.random.default_rng(0), training=True, p=0.2, fused=fused)
    np.testing.assert_allclose(got.data, ref.data, rtol=1e-12, atol=1e-12)


def test_fuse_time_node_shape_and_gradient_reaches_codebooks():
    cfg = dataclasses.replace(TOY, d_td=5, d_tw=1, d_n=7)
    b, p = toy_point(0, cfg)
    lv = tn.leaves(p)
    e_t = model.embed_time(b.tod, b.dow, lv)
    e_n = model.embed_nodes(b.node_slots, lv)
    out = model.fuse_time_node(e_t, e_n, lv, cfg, (2, 4, 3, cfg.hidden))
    assert out.shape == (2, 4, 3, cfg.hidden)
    model.mae_loss(model.forward(b, lv, cfg), b.y).backward()
    for name in ("time_day", "time_week", model.NODE_EMB):
        assert np.abs(lv[name].grad).max() > 0


def test_temporal_block_shapes_and_grad_check():
    for t_in, t_out in ((5, 5), (6, 1)):
        cfg = dataclasses.replace(TOY, t_in=t_in, t_out=t_out)
        p = stack_params("temporal", t_in, t_out, cfg.k_layers)
        e = np.random.default_rng(3).normal(size=(2, t_in, 3, cfg.hidden))
        assert model.temporal_block(Tensor(e), tensors(p), cfg).shape == (2, t_out, 3, cfg.hidden)
    p = stack_params("temporal", 4, 3, 2)
    p["e"] = np.random.default_rng(4).normal(size=(2, 4, 2, 5))
    cfg = dataclasses.replace(TOY, t_in=4, t_out=3)
    assert tn.grad_check(lambda v: tn.total(model.temporal_block(v["e"], v, cfg)), p) <= 1e-4


ABLATIONS = [dict(), dict(use_time_emb=False), dict(use_node_emb=False), dict(use_bias=False),
             dict(use_time_emb=False, use_node_emb=False),
             dict(use_time_emb=False, use_node_emb=False, use_bias=False)]


@pytest.mark.parametrize("flags", ABLATIONS)
def test_forward_shape_for_every_ablation(flags):
    cfg = dataclasses.replace(TOY, **flags)
    b, p = toy_point(1, cfg)
    assert model.predict(p, b, cfg).shape == (2, cfg.t_out, 3)
    assert (model.PERSONAL_BIAS in p) == cfg.use_bias
    assert (model.NODE_EMB in p) == cfg.use_node_emb
    assert ("time_day" in p) == cfg.use_time_emb


@pytest.mark.parametrize("flags", ABLATIONS)
def test_shared_shapes_do_not_depend_on_node_count(flags):
    cfg = dataclasses.replace(TOY, **flags)
    a = model.init_params(cfg, range(2), 0)
    b = model.init_params(cfg, range(10, 17), 0)
    skip = {model.NODE_EMB, model.PERSONAL_BIAS}
    assert {k: v.shape for k, v in a.items() if k not in skip} == {k: v.shape for k, v in b.items() if k not in skip}


def test_full_backbone_grad_check():
    b, p = toy_point(1)
    assert tn.grad_check(toy_loss(b), p) <= 1e-4


def test_grad_check_passes_on_most_generic_points():
    # failures at a few seeds are ReLU kinks inside the +-1e-5 step (see next test)
    errs = [tn.grad_check(toy_loss(b), p) for b, p in (toy_point(s) for s in range(1, 11))]
    assert sum(e <= 1e-4 for e in errs) >= 8


def test_failing_seed_is_a_kink_crossing():
    b, p = toy_point(10)
    f = toy_loss(b)
    arr = p["concat_mlp.0.weight"].reshape(-1)
    lv = tn.leaves(p)
    f(lv).backward()
    analytic = lv["concat_mlp.0.weight"].grad.reshape(-1)[27]
    f0 = float(f(tensors(p)).data)

    def one_sided(h):
        o = arr[27]
        arr[27] = o + h
        fp = float(f(tensors(p)).data)
        arr[27] = o - h
        fm = float(f(tensors(p)).data)
        arr[27] = o
        return (fp - f0) / h, (f0 - fm) / h

    right, left = one_sided(1e-5)
    assert abs(right - left) > 0.1  # slope jumps inside the step
    right, left = one_sided(1e-8)
    assert abs(right - analytic) < 1e-6 and abs(left - analytic) < 1e-6


def test_default_init_sits_on_a_kink():
    # zero biases make whole temporal rows constant; ReLU(0 + beta=0) is non-differentiable
    b, _ = toy_point(2)
    p = model.init_params(TOY, range(3), 2)
    assert tn.grad_check(toy_loss(b), p) > 1e-2


def test_mae_examples():
    y = np.array([[1.0, -1.0]])
    assert float(model.mae_loss(Tensor(y.copy()), y).data) == 0.0
    assert float(model.mae_loss(Tensor(np.zeros((1, 2))), y).data) == 1.0


def test_hi_predict_examples():
    x = np.arange(2 * 6 * 3, dtype=float).reshape(2, 6, 3)
    np.testing.assert_array_equal(model.hi_predict(x, 1), x[:, 5:6])
    np.testing.assert_array_equal(model.hi_predict(x, 6), x)
    np.testing.assert_array_equal(model.hi_predict(x, 8), np.repeat(x[:, -1:], 8, axis=1))
    const = np.full((1, 4, 2), 3.0)
    assert np.abs(model.hi_predict(const, 4) - const).max() == 0


def test_channel_independence_quick():
    # T_out=2 would quantize outputs through the width-2 temporal LayerNorm
    cfg = dataclasses.replace(TOY, t_out=6, dtype="float32")
    b, p = toy_point(3, cfg)
    p = {k: v.astype(np.float32) for k, v in p.items()}
    base = model.predict(p, b, cfg)
    rng = np.random.default_rng(0)
    for j in range(3):
        x = b.x.copy()
        x[:, :, j] += rng.normal(size=x[:, :, j].shape)
        out = model.predict(p, dataclasses.replace(b, x=x), cfg)
        others = [i for i in range(3) if i != j]
        np.testing.assert_array_equal(out[:, :, others], base[:, :, others])
        assert not np.array_equal(out[:, :, j], base[:, :, j])


def test_forward_is_deterministic_in_eval_mode():
    b, p = toy_point(4)
    np.testing.assert_array_equal(model.predict(p, b, TOY), model.predict(p, b, TOY))


def test_one_small_adam_step_lowers_the_batch_loss():
    cfg = dataclasses.replace(TOY, dtype="float64")
    b, p = toy_point(5, cfg)
    before, grads = model.loss_and_grads(p, b, cfg)
    tn.adam_step(p, grads, tn.AdamState(lr=1e-4))
    after, _ = model.loss_and_grads(p, b, cfg)
    assert after < before


def test_forward_rejects_wrong_window():
    b, p = toy_point(6)
    bad = dataclasses.replace(b, x=b.x[:, :3])
    with pytest.raises(tn.DimensionError):
        model.predict(p, bad, TOY)


class _Windows:
    def __init__(self, batches):
        self._b = batches

    def __len__(self):
        return sum(b.size for b in self._b)

    def batches(self, batch_size, rng=None):
        order = rng.permutation(len(self._b)) if rng is not None else range(len(self._b))
        for i in order:
            yield self._b[i]


def test_trainer_chunked_epochs_match_one_run():
    cfg = dataclasses.replace(TOY, dtype="float32", dropout=0.1)
    batches = [toy_point(s, cfg)[0] for s in range(3)]
    runs = []
    for chunks in ([4], [1, 1, 2]):
        p = model.init_params(cfg, range(3), 0)
        tr = model.LocalTrainer(cfg, p, _Windows(batches), model.make_rng(0, 0))
        for c in chunks:
            tr.run(c)
        runs.append(tr.params)
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_config_validation():
    with pytest.raises(ValueError):
        model.ModelConfig(steps_per_day=7)
    with pytest.raises(ValueError):
        model.ModelConfig(k_layers=0)
    assert model.ModelConfig.for_interval(300).steps_per_day == 288
