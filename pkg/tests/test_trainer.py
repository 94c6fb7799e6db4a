import json
import math

import jsonschema
import numpy as np
import pytest

from semrnnt.data import TOY_GRAMMAR, generate_corpus
from semrnnt.decoding import BeamConfig
from semrnnt.losses import LossWeights
from semrnnt.model import ModelConfig, ModelParams, init_params, load_checkpoint
from semrnnt.trainer import (PREDICTOR_OUTPUTS, REPORT_SCHEMA, Adam, DivergenceError, TrainConfig,
                             add_relative_reductions, clip_by_global_norm, evaluate, train)


@pytest.fixture(scope="module")
def corpus():
    utts, vocab = generate_corpus(TOY_GRAMMAR, 12, seed=3)
    return utts, vocab, ModelConfig.for_vocab(vocab, enc_hidden=8, enc_out=8, wp_hidden=8, wp_out=8,
                                              slot_hidden=8, slot_out=8, joint_hidden=8, intent_hidden=4)


def test_config_validation():
    for bad in (dict(learning_rate=-1.0), dict(batch_size=0), dict(epochs=-1), dict(slot_mode="x"),
                dict(predictor_warmup_epochs=-2)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig.from_json({"loss_weights": {"wp": 1.0, "slot": 0.5, "intent": 2.0}})
    assert cfg.loss_weights == LossWeights(1.0, 0.5, 2.0)
    assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_zero_learning_rate_is_identity(corpus):
    utts, _, mcfg = corpus
    res = train(mcfg, utts, TrainConfig(epochs=1, learning_rate=0.0, batch_size=4), held_out=utts[:2])
    assert res.params.equals(init_params(mcfg, 0))


def test_same_seed_same_logs(corpus):
    utts, _, mcfg = corpus
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2)
    a = train(mcfg, utts, cfg, held_out=utts[:2])
    b = train(mcfg, utts, cfg, held_out=utts[:2])
    assert a.epochs == b.epochs and a.steps == b.steps
    assert a.params.equals(b.params)


@pytest.mark.parametrize("mode", ["ce", "rnnt_align"])
def test_logged_total_is_weighted_component_sum(corpus, mode):
    utts, _, mcfg = corpus
    w = LossWeights(1.0, 0.5, 2.0)
    res = train(mcfg, utts, TrainConfig(epochs=1, batch_size=3, slot_mode=mode, loss_weights=w),
                held_out=utts[:2])
    for step in res.steps:
        assert abs(step["total"] - (w.wp * step["wp"] + w.slot * step["slot"] + w.intent * step["intent"])) < 1e-9


def test_clipping_bounds_the_norm():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grads = {"a": rng.normal(scale=10, size=(3, 4)), "b": rng.normal(size=5)}
        clipped, before = clip_by_global_norm(grads, 5.0)
        after = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
        assert after <= 5.0 + 1e-9
        assert before == pytest.approx(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def test_adam_first_step_and_frozen_tensors():
    params = {"x": np.array([1.0, -2.0]), "y": np.array([3.0])}
    opt = Adam(params, lr=0.1)
    opt.step(params, {"x": np.array([0.5, -4.0]), "y": np.array([1.0])}, frozen=frozenset({"y"}))
    # bias-corrected first step moves each coordinate by lr * |g| / (|g| + eps) against the gradient
    g = np.array([0.5, -4.0])
    np.testing.assert_allclose(params["x"], np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    assert params["y"][0] == 3.0 and opt.t["y"] == 0
    opt.step(params, {"x": np.zeros(2), "y": np.array([2.0])})
    assert params["y"][0] == pytest.approx(2.9, abs=1e-9)


def test_weight_decay_shrinks_matrices_only():
    params = {"W": np.ones((2, 2)), "b": np.ones(2)}
    opt = Adam(params, lr=0.1, weight_decay=0.5)
    opt.step(params, {"W": np.zeros((2, 2)), "b": np.zeros(2)})
    assert np.all(params["W"] == 0.95) and np.all(params["b"] == 1.0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1.0)


def test_predictor_warmup_freezes_prediction_networks(corpus):
    utts, _, mcfg = corpus
    init = init_params(mcfg, 0)
    res = train(mcfg, utts, TrainConfig(epochs=1, batch_size=4, predictor_warmup_epochs=1), held_out=utts[:2])
    for k, v in res.params.arrays.items():
        if k in PREDICTOR_OUTPUTS:
            assert not v.any()
        elif k == "joint.dec.W":
            # the fused decoder output is zero, so this weight gets no gradient either
            assert np.array_equal(v, init.arrays[k])
        elif k.startswith(("wp.", "slot.", "intent.")):
            assert np.array_equal(v, init.arrays[k])
        else:
            assert not np.array_equal(v, init.arrays[k]), k


def test_divergence_names_first_nan(corpus):
    utts, _, mcfg = corpus
    bad = init_params(mcfg, 0).arrays
    bad["enc.l0.W"][0, 0] = np.nan
    with pytest.raises(DivergenceError, match="enc.l0.W"):
        train(mcfg, utts, TrainConfig(epochs=1), held_out=utts[:2], init=ModelParams(mcfg, bad))


def test_logs_and_checkpoints(corpus, tmp_path):
    utts, _, mcfg = corpus
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.jsonl"
    res = train(mcfg, utts, TrainConfig(epochs=2, batch_size=6), log_path=log, checkpoint_path=ckpt)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert {"loss_total", "loss_wp", "loss_slot", "loss_intent", "heldout_wer", "heldout_icer"} <= set(lines[0])
    assert load_checkpoint(f"{ckpt}.epoch002").equals(res.params)
    assert (tmp_path / "m.ckpt.best").exists() and res.best_epoch in (1, 2)


def test_default_split_holds_out_data(corpus):
    utts, _, mcfg = corpus
    with pytest.raises(ValueError):
        train(mcfg, [], TrainConfig(epochs=1))
    res = train(mcfg, utts, TrainConfig(epochs=1, learning_rate=0.0))
    assert "heldout_wer" in res.epochs[0]


def test_evaluate_report(corpus):
    utts, vocab, mcfg = corpus
    params = init_params(mcfg, 1)
    report = evaluate(params, utts[:4], BeamConfig(3, 2, 4, 3), vocab)
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report == evaluate(params, utts[:4], BeamConfig(3, 2, 4, 3), vocab)
    assert report["n_utterances"] == 4 and len(report["utterances"]) == 4
    with pytest.raises(ValueError):
        evaluate(params, [], BeamConfig(), vocab)


def test_relative_reductions():
    report = {"metrics": {"wer": 0.55, "semer": 0.2, "irer": 0.84, "icer": 0.0}}
    baseline = {"metrics": {"wer": 0.61, "semer": 0.2, "irer": 0.91, "icer": 0.0}}
    warnings = add_relative_reductions(report, baseline)
    red = report["relative_reduction"]
    assert round(red["WERR"], 1) == 9.8 and round(red["IRERR"], 1) == 7.7
    assert red["SemERR"] == 0.0
    assert red["ICERR"] is None and len(warnings) == 1 and "icer" in warnings[0]


def test_toy_loss_decreases_by_epoch_five():
    utts, vocab = generate_corpus(TOY_GRAMMAR, 200, seed=7)
    res = train(ModelConfig.for_vocab(vocab), utts, TrainConfig(epochs=5), held_out=utts[:5])
    assert res.epochs[4]["loss_total"] < res.epochs[0]["loss_total"]


def test_converged_toy_model_fits_training_set(toy_run):
    report = evaluate(toy_run.params, toy_run.train, toy_run.beam, toy_run.vocab)
    assert report["metrics"]["irer"] < 0.05
