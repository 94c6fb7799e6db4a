import math
import struct

import numpy as np
import pytest

from semrnnt.model import (MAGIC, ModelConfig, decoder_step, encode, init_params, initial_decoder_state,
                           intent_logits, joint, load_checkpoint, param_shapes, save_checkpoint,
                           start_decoder)
from semrnnt.selftest import tiny_config


@pytest.fixture
def params():
    return init_params(tiny_config(), seed=3)


def lse(x):
    return np.logaddexp.reduce(np.asarray(x), axis=-1)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(4, 3, 2, wp_out=8, slot_out=8, enc_out=4)  # add fusion needs equal widths
    ModelConfig(4, 3, 2, wp_out=8, slot_out=6, enc_out=4, fusion_mode="concat_project")
    with pytest.raises(ValueError):
        ModelConfig(4, 3, 0)
    with pytest.raises(ValueError):
        ModelConfig(4, 3, 2, fusion_mode="mul")
    with pytest.raises(ValueError):
        ModelConfig.from_json({"n_wp": 4, "n_slot": 3, "n_intent": 2, "bogus": 1})


def test_default_tiny_dims():
    cfg = ModelConfig(10, 5, 3)
    assert (cfg.feat_dim, cfg.enc_layers, cfg.enc_hidden, cfg.enc_out) == (192, 2, 32, 32)
    assert (cfg.wp_embed, cfg.slot_embed, cfg.joint_hidden, cfg.intent_hidden) == (16, 8, 32, 16)
    assert cfg.fusion_mode == "add"


def test_encode_shapes_and_empty(params):
    cfg = params.config
    assert encode(params, np.zeros((0, cfg.feat_dim))).shape == (0, cfg.enc_out)
    assert encode(params, np.zeros((7, cfg.feat_dim))).shape == (7, cfg.enc_out)
    with pytest.raises(ValueError):
        encode(params, np.zeros((3, cfg.feat_dim + 1)))


@pytest.mark.parametrize("T", [2, 5, 9, 16])
def test_encoder_is_causal_bitwise(params, T):
    X = np.random.default_rng(T).normal(size=(T, params.config.feat_dim))
    full = encode(params, X).numpy()
    for k in range(T + 1):
        assert np.array_equal(encode(params, X[:k]).numpy(), full[:k])


def test_decoder_branches_are_independent(params):
    _, s0 = start_decoder(params)
    g_a, a = decoder_step(params, s0, 1, 1)
    g_b, b = decoder_step(params, s0, 1, 2)
    assert np.array_equal(a.g_w.numpy(), b.g_w.numpy())
    assert not np.array_equal(a.g_s.numpy(), b.g_s.numpy())
    again, _ = decoder_step(params, s0, 1, 1)
    assert np.array_equal(g_a.numpy(), again.numpy())


def test_add_fusion_with_zero_slot_branch(params):
    p = params.replace(**{"slot.proj.W": np.zeros_like(params.arrays["slot.proj.W"]),
                          "slot.proj.b": np.zeros_like(params.arrays["slot.proj.b"])})
    g, state = decoder_step(p, initial_decoder_state(p), 2, 1)
    assert np.array_equal(g.numpy(), state.g_w.numpy())


def test_concat_project_fusion():
    p = init_params(tiny_config(fusion_mode="concat_project", wp_out=5, slot_out=3), seed=0)
    g, state = start_decoder(p)
    want = np.concatenate([state.g_w.numpy(), state.g_s.numpy()]) @ p.arrays["fusion.W"]
    np.testing.assert_allclose(g.numpy(), want, rtol=0, atol=1e-15)


def test_decoder_rejects_blank_and_out_of_range(params):
    cfg = params.config
    s0 = initial_decoder_state(params)
    with pytest.raises(ValueError, match="blank"):
        decoder_step(params, s0, cfg.blank_wp, 0)
    with pytest.raises(ValueError, match="blank"):
        decoder_step(params, s0, 0, cfg.blank_slot)
    with pytest.raises(ValueError):
        decoder_step(params, s0, -1, 0)


def test_joint_normalized_and_deterministic(params):
    rng = np.random.default_rng(0)
    h, g = rng.normal(size=params.config.enc_out), rng.normal(size=params.config.enc_out)
    wp, slot = joint(params, h, g)
    assert wp.shape == (params.config.n_wp + 1,) and slot.shape == (params.config.n_slot + 1,)
    assert abs(lse(wp.numpy())) < 1e-10 and abs(lse(slot.numpy())) < 1e-10
    wp2, slot2 = joint(params, h, g)
    assert np.array_equal(wp.numpy(), wp2.numpy()) and np.array_equal(slot.numpy(), slot2.numpy())


def test_zeroed_joint_is_uniform(params):
    zeroed = params.replace(**{k: np.zeros_like(v) for k, v in params.arrays.items() if k.startswith("joint.")})
    wp, slot = joint(zeroed, np.ones(params.config.enc_out), np.ones(params.config.enc_out))
    np.testing.assert_allclose(wp.numpy(), -math.log(params.config.n_wp + 1), rtol=0, atol=1e-15)
    np.testing.assert_allclose(slot.numpy(), -math.log(params.config.n_slot + 1), rtol=0, atol=1e-15)


def test_intent_head(params):
    _, state = decoder_step(params, initial_decoder_state(params), 2, 1)
    out = intent_logits(params, state.g_w).numpy()
    assert abs(lse(out)) < 1e-10
    zeroed = params.replace(**{k: np.zeros_like(v) for k, v in params.arrays.items() if k.startswith("intent.")})
    np.testing.assert_allclose(intent_logits(zeroed, state.g_w).numpy(), -math.log(params.config.n_intent),
                               rtol=0, atol=1e-15)


def test_intent_ignores_slot_network(params):
    rng = np.random.default_rng(1)
    perturbed = params.replace(**{k: v + rng.normal(size=v.shape) for k, v in params.arrays.items()
                                  if k.startswith("slot.")})
    outs = []
    for p in (params, perturbed):
        state = initial_decoder_state(p)
        for wp, slot in [(0, 0), (2, 1), (3, 2)]:
            _, state = decoder_step(p, state, wp, slot)
        outs.append(intent_logits(p, state.g_w).numpy())
    assert np.array_equal(outs[0], outs[1])


def test_init_is_seeded():
    cfg = tiny_config()
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert a.equals(b)
    assert not a.equals(c)
    assert set(a.arrays) == set(param_shapes(cfg))


def test_init_range_and_forget_bias():
    cfg = ModelConfig(4, 3, 2, feat_dim=98, enc_hidden=2, enc_out=4, wp_out=4, slot_out=4)
    p = init_params(cfg, 0)
    w = p.arrays["enc.l0.W"]
    assert w.shape[0] == 100
    assert np.all(np.abs(w) <= 0.1) and np.abs(w).max() > 0.09
    b = p.arrays["enc.l0.b"]
    np.testing.assert_array_equal(b, [0, 0, 1, 1, 0, 0, 0, 0])


def test_checkpoint_round_trip_bitwise(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert back.config == params.config
    assert back.equals(params)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC and struct.unpack("<I", raw[4:8])[0] == 1


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError):
        load_checkpoint(path)
