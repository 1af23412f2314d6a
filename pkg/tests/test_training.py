import numpy as np
import pytest

from csagat.graph import synthetic_planted
from csagat.models import GAT, build_model, parameters
from csagat.tensor import Tensor
from csagat.training import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    evaluate,
    mad,
    multi_seed_run,
    run_seed,
    split_for,
    train,
)


@pytest.fixture(scope="module")
def planted():
    g, _ = synthetic_planted(blocks=3, nodes_per_block=12, feature_dim=8, seed=1)
    return g


def params_bytes(model):
    return [p.data.tobytes() for p in parameters(model)]


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_without_decay_is_a_no_op():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.zeros(3)
    opt = Adam([p], lr=0.1)
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_adam_decoupled_weight_decay_alone_shrinks_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    Adam([p], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.05), rtol=0, atol=1e-15)


def test_adam_two_steps_match_reference_formula():
    g1, g2 = np.array([0.3, -1.0]), np.array([0.1, 2.0])
    p = Tensor(np.array([0.5, 0.5]), requires_grad=True)
    opt = Adam([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    x = p.data.copy()
    m = v = np.zeros(2)
    for t, g in enumerate((g1, g2), start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- metrics


def test_accuracy_for_perfect_and_constant_predictors():
    labels = np.array([0, 1, 2, 1, 1])
    perfect = np.eye(3)[labels]
    assert accuracy(perfect, labels, np.ones(5, bool)) == 1.0
    constant = np.tile([0.0, 1.0, 0.0], (5, 1))
    assert accuracy(constant, labels, np.ones(5, bool)) == pytest.approx(3 / 5)
    assert accuracy(constant, labels, np.array([0, 2])) == 0.0
    with pytest.raises(ValueError):
        accuracy(constant, labels, np.zeros(5, bool))


def test_accuracy_of_random_logits_is_near_chance():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 20000)
    assert abs(accuracy(rng.normal(size=(20000, 4)), labels, np.ones(20000, bool)) - 0.25) < 0.015


def test_evaluate_matches_freshly_initialized_epoch_zero(planted):
    split = split_for(planted, 0)
    model = build_model("gat", planted.feature_dim, planted.class_count, rng=np.random.default_rng(0))
    before = evaluate(model, planted, split.val)
    clone = build_model("gat", planted.feature_dim, planted.class_count, rng=np.random.default_rng(0))
    hist = train(clone, planted, split, TrainConfig(max_epochs=3), seed=0)
    assert hist.epochs[0]["val_acc"] == before


def test_mad_identical_rows_is_zero():
    assert mad(np.tile([1.0, 2.0, -1.0], (4, 1))) == pytest.approx(0.0, abs=1e-15)


def test_mad_orthogonal_rows_is_one():
    assert mad(np.eye(4)) == pytest.approx(1.0, abs=1e-15)


def test_mad_matches_brute_force_double_loop():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(10, 4))
    labels = rng.integers(0, 3, 10)
    allpairs, inter = [], []
    for i in range(10):
        for j in range(10):
            if i == j:
                continue
            d = 1 - h[i] @ h[j] / (np.linalg.norm(h[i]) * np.linalg.norm(h[j]))
            allpairs.append(d)
            if labels[i] != labels[j]:
                inter.append(d)
    assert mad(h) == pytest.approx(np.mean(allpairs), abs=1e-12)
    assert mad(h, labels, "interclass") == pytest.approx(np.mean(inter), abs=1e-12)


def test_mad_errors():
    with pytest.raises(ValueError):
        mad(np.ones((3, 2)), pairs="interclass")
    with pytest.raises(ValueError):
        mad(np.ones((3, 2)), np.zeros(3), "interclass")
    with pytest.raises(ValueError):
        mad(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mad(np.ones((3, 2)), pairs="some")


# ---------------------------------------------------------------- training loop


@pytest.mark.parametrize("variant", ["dummy", "csa1", "csa2", "csa3", "last"])
def test_zero_lambda_is_bit_identical_to_vanilla(planted, variant):
    cfg = dict(max_epochs=15, patience=100)
    m0, h0 = run_seed(planted, TrainConfig("none", **cfg), seed=2)
    m1, h1 = run_seed(planted, TrainConfig(variant, lam=0.0, **cfg), seed=2)
    assert params_bytes(m0) == params_bytes(m1)
    strip = lambda h: [{k: v for k, v in r.items() if k != "csa_loss"} for r in h.epochs]
    assert strip(h0) == strip(h1)


def test_training_is_deterministic(planted):
    cfg = TrainConfig("csa1", max_epochs=10)
    a = run_seed(planted, cfg, seed=4)
    b = run_seed(planted, cfg, seed=4)
    assert a[1].to_jsonl() == b[1].to_jsonl()
    assert params_bytes(a[0]) == params_bytes(b[0])


def test_historical_scheme_falls_back_to_dummy_on_first_epoch(planted):
    h_hist = run_seed(planted, TrainConfig("csa3", max_epochs=2), seed=5)[1]
    h_dummy = run_seed(planted, TrainConfig("dummy", max_epochs=2), seed=5)[1]
    assert h_hist.epochs[0]["csa_loss"] == h_dummy.epochs[0]["csa_loss"]
    assert h_hist.epochs[1]["csa_loss"] != h_dummy.epochs[1]["csa_loss"]


def test_early_stopping_with_frozen_parameters(planted):
    split = split_for(planted, 0)
    model = GAT(planted.feature_dim, planted.class_count, rng=np.random.default_rng(0))
    hist = train(model, planted, split, TrainConfig(lr=0.0, weight_decay=0.0, patience=5, max_epochs=50))
    assert hist.best_epoch == 0
    assert len(hist.epochs) == 6


def test_best_parameters_are_restored(planted):
    split = split_for(planted, 1)
    model = GAT(planted.feature_dim, planted.class_count, rng=np.random.default_rng(1))
    hist = train(model, planted, split, TrainConfig(max_epochs=60, patience=10))
    assert evaluate(model, planted, split.val) == hist.best["val_acc"]
    assert evaluate(model, planted, split.test) == hist.best["test_acc"]


def test_pure_variant_never_updates_attention_vectors(planted):
    split = split_for(planted, 0)
    model = GAT(planted.feature_dim, planted.class_count, rng=np.random.default_rng(0))
    before = [a.data.copy() for a in model.attention_parameters()]
    train(model, planted, split, TrainConfig("pure", weight_decay=0.0, max_epochs=10))
    for a, b in zip(model.attention_parameters(), before):
        np.testing.assert_array_equal(a.data, b)


def test_csa_records_loss_components(planted):
    hist = run_seed(planted, TrainConfig("csa2", max_epochs=5, track_mad=True), seed=0)[1]
    for r in hist.epochs:
        assert r["csa_loss"] > 0
        assert r["loss"] == pytest.approx(r["ce_loss"] + r["csa_loss"], abs=1e-12)
        assert 0 <= r["mad_interclass"] <= 2 and 0 <= r["mad_all"] <= 2


def test_planted_graph_is_fit_on_training_nodes():
    g, _ = synthetic_planted(seed=0)
    _, hist = run_seed(g, TrainConfig(max_epochs=200, patience=200), seed=0)
    assert max(r["train_acc"] for r in hist.epochs) >= 0.95


def test_non_finite_loss_raises(planted):
    split = split_for(planted, 0)
    model = GAT(planted.feature_dim, planted.class_count, rng=np.random.default_rng(0))
    model.layers[0].W[0].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(model, planted, split, TrainConfig(max_epochs=3))
    assert err.value.epoch == 0 and "layers.0.W.0" in str(err.value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_raises_with_components(planted):
    split = split_for(planted, 0)
    model = build_model("mlp", planted.feature_dim, planted.class_count)
    features = planted.features.copy()
    features[0, 0] = np.inf
    g = planted.replace(features=features)
    with pytest.raises(TrainingDiverged) as err:
        train(model, g, split, TrainConfig(max_epochs=3))
    assert err.value.epoch == 0 and set(err.value.components) == {"total", "ce", "csa"}


def test_variant_and_layer_validation(planted):
    with pytest.raises(ValueError):
        TrainConfig("csa9")
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig("last", last_scheme="pure")
    split = split_for(planted, 0)
    mlp = build_model("mlp", planted.feature_dim, planted.class_count)
    with pytest.raises(ValueError, match="attention"):
        train(mlp, planted, split, TrainConfig("csa2"))
    gat = GAT(planted.feature_dim, planted.class_count)
    with pytest.raises(ValueError, match="do not exist"):
        train(gat, planted, split, TrainConfig("csa2", supervised_layers=(5,)))


@pytest.mark.parametrize("kind", ["gcn", "mlp"])
def test_baselines_train(planted, kind):
    _, hist = run_seed(planted, TrainConfig(max_epochs=20), seed=0, model_kind=kind)
    assert len(hist.epochs) == 20


# ---------------------------------------------------------------- multi-seed


def test_single_seed_has_zero_std(planted):
    out = multi_seed_run(planted, TrainConfig(max_epochs=5), [3])
    assert out["test_acc"]["std"] == 0.0
    assert out["test_acc"]["mean"] == out["per_seed"][0]["test_acc"]


def test_repeated_seed_gives_identical_trials(planted):
    out = multi_seed_run(planted, TrainConfig(max_epochs=5), [3, 3])
    assert out["per_seed"][0] == out["per_seed"][1]
    assert out["test_acc"]["std"] == 0.0
    with pytest.raises(ValueError):
        multi_seed_run(planted, TrainConfig(), [])
