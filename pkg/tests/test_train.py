import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mhyper.model import ConfigError
from mhyper.selfcheck import random_model, tiny_instance
from mhyper.toy import make_toy_kg, toy_config
from mhyper.train import (
    AdagradState, NonFiniteError, TrainConfig, TrainingDiverged, adagrad_step, compute_gradients, train,
)


@pytest.fixture(scope="module")
def toy():
    return make_toy_kg()


# ---------------------------------------------------------------- config


def test_config_text_round_trip():
    cfg = TrainConfig(dim=16, reg=0.01, ablations="no-gate", early_stopping=True)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_parsing_and_comments():
    cfg = TrainConfig.from_text("# toy\ndim = 8\nlearning_rate = 0.05  # slower\npca_init = false\ndataset = 'a b'\n")
    assert cfg.dim == 8 and cfg.learning_rate == 0.05 and cfg.pca_init is False and cfg.dataset == "a b"


@pytest.mark.parametrize("text", ["dimm = 4", "dim = four", "dim 4", "learning_rate = 0", "reg = -1",
                                  "noise_ratio = 1.5", "batch_size = 0", "precision = f16",
                                  "ablations = no-magic", "score_mode = other"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_text(text)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.dim, cfg.reg, cfg.noise_ratio, cfg.batch_size) == (0.1, 128, 0.005, 0.2, 1000)
    assert cfg.loss_weights == dict.fromkeys(("triple", "recon", "distill", "reg"), 1.0)


# ---------------------------------------------------------------- gradients


def test_constant_loss_gives_zero_gradient():
    model, triples = tiny_instance()
    _, _, grads = compute_gradients(model, triples, weights=dict.fromkeys(("triple", "recon", "distill", "reg"), 0.0))
    assert all(not g.any() for g in grads.values())


def test_n3_gradient_by_hand():
    x = torch.tensor([[1.0, -2.0]], dtype=torch.float64, requires_grad=True)
    lam = 0.3
    (lam * (x.abs() ** 3).sum()).backward()
    torch.testing.assert_close(x.grad, lam * torch.tensor([[3.0, -12.0]], dtype=torch.float64))


def test_empty_batch_rejected():
    model, _ = tiny_instance()
    with pytest.raises(ValueError):
        compute_gradients(model, torch.zeros((0, 3), dtype=torch.long))


def test_non_finite_gradient_names_table():
    model, triples = tiny_instance()
    with torch.no_grad():
        model.rel_trans[0, 0] = float("inf")
    with pytest.raises(NonFiniteError, match="'"):
        compute_gradients(model, triples)


# ---------------------------------------------------------------- adagrad


def test_zero_gradient_leaves_params():
    p = {"w": torch.ones(3, 2)}
    adagrad_step(p, {"w": torch.zeros(3, 2)}, AdagradState(), 0.1)
    assert torch.equal(p["w"], torch.ones(3, 2))


def test_first_and_second_step():
    p = {"w": torch.zeros(1, dtype=torch.float64)}
    state = AdagradState()
    g = {"w": torch.ones(1, dtype=torch.float64)}
    adagrad_step(p, g, state, 0.1)
    assert math.isclose(float(p["w"]), -0.1 / (1 + 1e-10), rel_tol=1e-15)
    adagrad_step(p, g, state, 0.1)
    assert math.isclose(float(p["w"]) + 0.1 / (1 + 1e-10), -0.1 / (math.sqrt(2) + 1e-10), rel_tol=1e-15)
    assert float(state.accum["w"]) == 2.0


def test_sparse_rows_untouched():
    p = {"E": torch.ones(4, 3)}
    state = AdagradState()
    g = torch.zeros(4, 3)
    g[1] = 0.5
    adagrad_step(p, {"E": g}, state, 0.1)
    assert torch.equal(p["E"][[0, 2, 3]], torch.ones(3, 3))
    assert not state.accum["E"][[0, 2, 3]].any()
    assert (p["E"][1] < 1).all()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adagrad_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, AdagradState(), 0.1)


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=12), st.sampled_from([1.0, -1.0]))
def test_accumulator_monotone_and_step_nonincreasing(mags, sign):
    p = {"w": torch.zeros(1, dtype=torch.float64)}
    state = AdagradState()
    prev_acc, prev_rate = 0.0, math.inf
    for m in mags:
        before = float(p["w"])
        g = sign * m
        adagrad_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, state, 0.1)
        acc = float(state.accum["w"])
        rate = abs(float(p["w"]) - before) / m  # effective per-unit-gradient step
        assert acc >= prev_acc and rate <= prev_rate * (1 + 1e-12)
        prev_acc, prev_rate = acc, rate


# ---------------------------------------------------------------- loop


def test_zero_epochs_returns_initial_model(toy):
    g, f = toy
    res = train(toy_config(epochs=0), g, f)
    assert res.history == [] and res.best_valid_mrr is None
    fresh = train(toy_config(epochs=0), g, f).model
    for (n, a), (_, b) in zip(res.model.named_parameters(), fresh.named_parameters()):
        assert torch.equal(a, b), n


def test_same_seed_same_history(toy):
    g, f = toy
    a = train(toy_config(epochs=8, eval_every=4), g, f)
    b = train(toy_config(epochs=8, eval_every=4), g, f)
    strip = lambda h: [(r.epoch, r.total, r.triple, r.recon, r.distill, r.reg, r.valid_mrr) for r in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(x, y)


def test_loss_nonincreasing_early_epochs(toy):
    g, f = toy
    res = train(toy_config(epochs=10, batch_size=100, eval_every=0), g, f)
    totals = [r.total for r in res.history]
    assert all(b <= 1.05 * a for a, b in zip(totals, totals[1:])), totals


def test_best_checkpoint_matches_logged_max(toy):
    from mhyper.evaluation import aggregate, evaluate

    g, f = toy
    res = train(toy_config(epochs=30, eval_every=5), g, f)
    logged = [r.valid_mrr for r in res.history if r.valid_mrr is not None]
    assert res.best_valid_mrr == max(logged)
    assert aggregate(evaluate(res.model, g, g.valid))["MRR"] == res.best_valid_mrr


def test_divergence_keeps_last_good(toy):
    g, f = toy
    with pytest.raises(TrainingDiverged) as exc:
        train(toy_config(learning_rate=1e30, epochs=5, eval_every=1), g, f)
    assert exc.value.last_good is not None
    assert "non-finite" in str(exc.value)


def test_early_stopping(toy):
    g, f = toy
    res = train(toy_config(epochs=200, eval_every=1, early_stopping=True, patience=3), g, f)
    assert len(res.history) < 200


def test_log_line_format(toy):
    g, f = toy
    rec = train(toy_config(epochs=1), g, f).history[0]
    fields = rec.log_line().split("\t")
    assert len(fields) == 7 and fields[0] == "1"
    assert math.isclose(float(fields[1]), rec.total, rel_tol=1e-5)


def test_model_runs_in_float64():
    m = random_model(4, 2, 2, seed=0)
    assert m.dtype == torch.float64
