import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrsl.alignment import DynRslModel
from dynrsl.config import DESK_PATCH
from dynrsl.data import model_inputs, retrieval_corpus
from dynrsl.encoders import EncoderConfig, tokenize
from dynrsl.errors import ConfigError, ContractError, NonFiniteError
from dynrsl.tensor import Tensor
from dynrsl.train import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    collapse_stats,
    cosine_lr,
    evaluate_retrieval,
    metrics_from_similarity,
    ranks_of_diagonal,
    train,
)
from dynrsl.vocab import DEFAULT_VOCAB


def small_setup(n=6, seed=0, **enc):
    scenes = retrieval_corpus(n, seed=seed)
    inputs = model_inputs(scenes, DESK_PATCH)
    captions = [tokenize(s.caption, DEFAULT_VOCAB) for s in scenes]
    cfg = dict(d_model=16, n_layers=1, n_heads=2, d_proj=8)
    cfg.update(enc)
    return DynRslModel(EncoderConfig(**cfg), DESK_PATCH), inputs, captions


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(tau=-1)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-4) == 1e-4
    assert cosine_lr(99, 100, 1e-4) <= 0.01 * 1e-4
    assert cosine_lr(50, 101, 2.0) == pytest.approx(1.0)
    lrs = [cosine_lr(s, 50, 1.0) for s in range(50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_first_step_matches_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.1])
    AdamW([p], weight_decay=0.1).step(0.01)
    # bias-corrected first step moves by lr * sign(g), plus decoupled decay
    expect = np.array([1.0, -2.0]) - 0.01 * (np.sign([0.5, -0.1]) * (1 / (1 + 1e-8 / np.abs([0.5, 0.1]))) + 0.1 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, expect, atol=1e-15)


def test_adamw_skips_parameters_without_gradient():
    p = Tensor(np.ones(3), requires_grad=True)
    AdamW([p], weight_decay=0.5).step(1.0)
    assert np.array_equal(p.data, np.ones(3))


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model, inputs, captions = small_setup()
        runs.append(train(model, inputs, captions, TrainConfig(steps=5, batch_size=4, lr=1e-3)).totals)
    assert runs[0] == runs[1]


def test_training_reduces_loss():
    model, inputs, captions = small_setup()
    result = train(model, inputs, captions, TrainConfig(steps=60, batch_size=6, lr=1e-3))
    assert np.mean(result.totals[-5:]) < np.mean(result.totals[:5])
    assert result.lrs[-1] == 0.0


def test_frozen_vit_unchanged_by_training():
    model, inputs, captions = small_setup()
    before = {n: p.data.copy() for n, p in model.vit.named_parameters()}
    train(model, inputs, captions, TrainConfig(steps=10, batch_size=4, lr=1e-2))
    assert all(np.array_equal(before[n], p.data) for n, p in model.vit.named_parameters())


def test_unfrozen_vit_does_change():
    model, inputs, captions = small_setup(frozen_vit=False)
    before = model.vit.patch_proj.weight.data.copy()
    train(model, inputs, captions, TrainConfig(steps=3, batch_size=4, lr=1e-2))
    assert not np.array_equal(before, model.vit.patch_proj.weight.data)


def test_zero_weight_losses_leave_heads_unchanged():
    model, inputs, captions = small_setup()
    itm = [p.data.copy() for p in model.itm_head.parameters()]
    dec = [p.data.copy() for p in model.decoder.parameters()]
    train(model, inputs, captions, TrainConfig(steps=5, batch_size=4, lr=1e-2, w_itm=0, w_itg=0))
    assert all(np.array_equal(a, p.data) for a, p in zip(itm, model.itm_head.parameters()))
    assert all(np.array_equal(a, p.data) for a, p in zip(dec, model.decoder.parameters()))


def test_nan_loss_aborts_with_step():
    model, inputs, captions = small_setup()
    calls = []

    def poison(step, report):
        calls.append(step)
        if step == 2:
            model.proj_image.fc2.weight.data[0, 0] = np.nan

    with pytest.raises(TrainingDiverged) as err:
        train(model, inputs, captions, TrainConfig(steps=6, batch_size=4), poison)
    assert err.value.step == 3
    assert isinstance(err.value, NonFiniteError)
    assert "step 3" in str(err.value)


def test_train_input_checks():
    model, inputs, captions = small_setup()
    with pytest.raises(ContractError):
        train(model, inputs, captions[:-1], TrainConfig(steps=1))


# ---------------------------------------------------------------- metrics


def test_perfect_similarity_oracle():
    s = np.full((16, 16), 0.2) + np.eye(16) * 0.8
    m = metrics_from_similarity(s)
    assert m.recall_at_1 == 1.0 and m.recall_at_5 == 1.0 and m.mean_rank == 1.0


def test_ranks_break_ties_against_the_match():
    s = np.zeros((4, 4))
    assert ranks_of_diagonal(s).tolist() == [1, 2, 3, 4]
    m = metrics_from_similarity(s)
    assert m.recall_at_1 == 0.25


def test_rank_oracle_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.normal(size=(9, 9))
        r = ranks_of_diagonal(s)
        for i in range(9):
            order = sorted(range(9), key=lambda j: -s[i, j])
            assert r[i] == order.index(i) + 1


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2**31))
def test_metric_bounds(m, seed):
    s = np.random.default_rng(seed).integers(0, 3, size=(m, m)).astype(float)
    met = metrics_from_similarity(s)
    assert 0 <= met.recall_at_1 <= met.recall_at_5 <= 1
    assert 1 <= met.mean_rank <= m


def test_untrained_recall_near_chance():
    scenes = retrieval_corpus(16)
    inputs = model_inputs(scenes, DESK_PATCH)
    captions = [tokenize(s.caption, DEFAULT_VOCAB) for s in scenes]
    recalls = []
    for seed in range(50):
        model = DynRslModel(EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_proj=8, seed=seed), DESK_PATCH)
        recalls.append(evaluate_retrieval(model, inputs, captions).recall_at_1)
    assert abs(np.mean(recalls) - 1 / 16) <= 0.05


def test_metrics_need_two_pairs():
    with pytest.raises(ContractError):
        metrics_from_similarity(np.ones((1, 1)))


def test_collapse_stats():
    collapsed = collapse_stats(np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert collapsed["mean_pairwise_cosine"] == pytest.approx(1.0)
    assert collapsed["min_variance"] == 0.0
    spread = collapse_stats(np.eye(4))
    assert spread["mean_pairwise_cosine"] == 0.0 and spread["min_variance"] > 0
    assert math.isclose(spread["min_variance"], 0.1875)


def test_region_probe_sees_region_only_attribute():
    from dynrsl.data import ablation_corpus
    from dynrsl.train import region_probe

    scenes = ablation_corpus(2)
    inputs = model_inputs(scenes, DESK_PATCH)
    captions = [tokenize(s.caption, DEFAULT_VOCAB) for s in scenes]
    model = DynRslModel(EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_proj=8), DESK_PATCH)
    train(model, inputs, captions, TrainConfig(steps=100, batch_size=8, lr=1e-3))
    delta = region_probe(model, inputs, captions)
    assert delta.shape == (8,) and np.all(np.abs(delta) > 0)
