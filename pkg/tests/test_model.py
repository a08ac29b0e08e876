import numpy as np
import pytest

from egoaco import model
from egoaco.model import EgoACO, ModelConfig
from egoaco.ops import ConfigurationError, InputError
from egoaco.tensor import DimensionError, Tape, Tensor


def small(**kw):
    base = dict(num_verbs=3, num_nouns=4, num_actions=5, image_size=8, trunk_channels=(3,), K=4, M_act=4,
                C=3, D=2, dropout=0.0)
    return ModelConfig(**{**base, **kw})


def clip(rng, B=2, T=3, S=8):
    return rng.standard_normal((B, T, 3, S, S))


@pytest.mark.parametrize("kw", [{}, {"branches": ("act",), "noun_from": "act"}, {"branches": ("ctx", "act"), "noun_from": "ctx"},
                                {"dictionary": "cam"}, {"dictionary": "attentional"}, {"variant": "Baseline"}])
def test_logit_shapes_and_attention_normalised(rng, kw):
    cfg = small(**kw)
    net = EgoACO.create(cfg, seed=0)
    logits, att = net(clip(rng))
    assert logits.verb.shape == (2, 3) and logits.noun.shape == (2, 4) and logits.action.shape == (2, 5)
    assert set(logits.routes) == set(cfg.branches)
    np.testing.assert_allclose(att.act.sum((-2, -1)), 1.0, atol=1e-9)
    if "obj" in cfg.branches:
        np.testing.assert_allclose(att.obj.sum((1, 2, 3)), 1.0, atol=1e-9)
    if "ctx" in cfg.branches:
        np.testing.assert_allclose(att.ctx.sum((-2, -1)), 1.0, atol=1e-9)
    assert (att.mem is None) == (not cfg.flags.fine_gating)


def test_single_clip_matches_batch_entry(rng):
    net = EgoACO.create(small(), seed=1)
    x = clip(rng)
    batch, _ = net(x)
    one, att = net(x[1])
    np.testing.assert_allclose(one.action.numpy(), batch.action.numpy()[1], atol=1e-12)
    assert att.act.shape == (3, 4, 4)


def test_action_logits_average_the_routes(rng):
    logits, _ = EgoACO.create(small(), seed=2)(clip(rng))
    mean = sum(r.numpy() for r in logits.routes.values()) / 3
    np.testing.assert_allclose(logits.action.numpy(), mean, atol=1e-12)


def test_bias_control(rng):
    cfg = small()
    params = model.init_params(cfg, 0)
    x = clip(rng)
    U = rng.standard_normal((5, 3))
    logits, _ = model.forward(cfg, {**params, "head.U_v": U}, x)
    np.testing.assert_allclose(logits.verb.numpy(), logits.verb_raw.numpy() + logits.action.numpy() @ U, atol=1e-12)
    off, _ = model.forward(small(bias_control=False), {**params, "head.U_v": U}, x)
    np.testing.assert_array_equal(off.verb.numpy(), off.verb_raw.numpy())


def test_zero_init_bias_maps_and_small_heads():
    params = model.init_params(small(), 0)
    assert np.all(params["head.U_v"].numpy() == 0) and np.all(params["head.U_n"].numpy() == 0)
    assert np.std(params["head.W_act_verb"].numpy()) < 0.05
    assert all(np.all(v.numpy() == 0) for k, v in params.items() if k.endswith(".b") or k.startswith("lsta.b_"))


def test_init_is_seed_deterministic():
    a, b, c = (model.init_params(small(), s) for s in (3, 3, 4))
    assert all(np.array_equal(a[k].numpy(), b[k].numpy()) for k in a)
    assert not np.array_equal(a["trunk.conv0.W"].numpy(), c["trunk.conv0.W"].numpy())


def test_dropout_only_in_training(rng):
    cfg = small(dropout=0.5)
    net = EgoACO.create(cfg, seed=0)
    x = clip(rng)
    a, _ = net(x)
    b, _ = net(x, train=False, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(a.action.numpy(), b.action.numpy())
    c, _ = net(x, train=True, rng=np.random.default_rng(0))
    assert not np.allclose(a.action.numpy(), c.action.numpy())


def test_cross_entropy_matches_manual(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 4, 1])
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    ref = -lp[np.arange(4), labels].mean()
    assert abs(model.cross_entropy(Tensor(logits), labels).numpy() - ref) < 1e-12


def test_regime_masks_drop_loss_terms(rng):
    net = EgoACO.create(small(), seed=0)
    logits, _ = net(clip(rng))
    labels = (np.array([0, 1]), np.array([2, 3]), np.array([4, 0]))
    ce = [float(model.cross_entropy(lg, lab).numpy()) for lg, lab in zip((logits.verb, logits.noun, logits.action), labels)]
    for regime, w in model.REGIMES.items():
        loss = float(model.multitask_loss(logits, labels, model.supervision_mask(regime)).numpy())
        assert abs(loss - sum(a * b for a, b in zip(w, ce))) < 1e-12
    with pytest.raises(ConfigurationError):
        model.supervision_mask("V")
    with pytest.raises(InputError):
        model.multitask_loss(logits, (np.array([0, 3]), labels[1], labels[2]))


def test_a_only_regime_gives_no_gradient_to_verb_head(rng):
    net = EgoACO.create(small(), seed=0)
    params = dict(net.params)
    with Tape() as tape:
        tape.watch(*params.values())
        logits, _ = net(clip(rng), params=params)
        loss = model.multitask_loss(logits, (np.array([0, 1]), np.array([2, 3]), np.array([4, 0])), model.REGIMES["A"])
    grads = dict(zip(params, tape.gradient(loss, list(params.values()))))
    assert np.all(grads["head.W_act_verb"].numpy() == 0)
    assert np.any(grads["head.W_act_action"].numpy() != 0)


def test_pair_action():
    idx = {(0, 1): 0, (2, 3): 1}
    np.testing.assert_array_equal(model.pair_action([0, 2, 1], [1, 3, 1], idx), [0, 1, -1])


def test_parameter_names_follow_configuration():
    full = model.parameter_shapes(small())
    assert full["head.B_obj"] == (4, 4) and full["head.B_ctx"] == (4, 5) and full["lsta.W_o"] == (4, 8, 3, 3)
    assert "dict.A_obj" not in model.parameter_shapes(small(dictionary="cam"))
    assert model.parameter_shapes(small(dictionary="attentional"))["dict.A_act"] == (4, 1)
    assert model.parameter_shapes(small(variant="Baseline"))["lsta.W_o"] == (4, 8, 3, 3)
    assert "head.W_act_noun" in model.parameter_shapes(small(branches=("act",), noun_from="act"))
    outer = model.init_params(small(coupling="outer"), 0)
    assert np.all(outer["dict.A_o_cols"].numpy() == 1.0) and outer["dict.A_o_cols"].shape == (2,)


@pytest.mark.parametrize("kw", [{"K": 0}, {"image_size": 9}, {"branches": ("obj",)}, {"noun_from": "ctx", "branches": ("obj", "act")},
                                {"dropout": 1.0}, {"dictionary": "x"}, {"variant": "Nope"},
                                {"coupling": "rank2"}])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ConfigurationError):
        small(**kw)


def test_bad_inputs(rng):
    net = EgoACO.create(small(), seed=0)
    with pytest.raises(ConfigurationError):
        net(rng.standard_normal((2, 3, 3, 16, 16)))
    with pytest.raises(DimensionError):
        net(rng.standard_normal((2, 3, 1, 8, 8)))
    params = dict(net.params)
    params.pop("head.U_v")
    with pytest.raises(ConfigurationError):
        EgoACO(small(), params)
