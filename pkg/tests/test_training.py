import numpy as np
import pytest

from causalflow.errors import ConfigMismatch, CorruptCheckpoint, DivergedLoss, NonFiniteInput, TooFewPatients
from causalflow.mnar import MnarConfig, apply_mnar
from causalflow.synthgen import GeneratorConfig, PanelDataset, gen_ldl, gen_simple3, ldl_graph, simple3_graph
from causalflow.training import (
    Adam,
    CausalFlowModel,
    Normalizer,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    split,
    split_indices,
    train,
)

FAST = dict(hidden_dim=8, flow_hidden=8)


def test_split_sizes():
    s = split_indices(100, TrainConfig())
    assert (len(s.train), len(s.val), len(s.test)) == (64, 16, 20)


def test_split_is_seeded_partition():
    a = split_indices(257, TrainConfig(seed=4))
    b = split_indices(257, TrainConfig(seed=4))
    assert all(np.array_equal(x, y) for x, y in zip((a.train, a.val, a.test), (b.train, b.val, b.test)))
    union = np.concatenate([a.train, a.val, a.test])
    assert sorted(union) == list(range(257))


def test_split_needs_ten_patients():
    with pytest.raises(TooFewPatients):
        split_indices(9, TrainConfig())


def test_normalizer_round_trip_and_train_only_stats():
    ds, _ = gen_ldl(GeneratorConfig(n_patients=300))
    tr, _, _ = split(ds, TrainConfig())
    norm = Normalizer.fit(tr)
    assert np.allclose(norm.cov_mean, tr.covariates.mean(axis=(0, 1)))
    assert np.allclose(norm.y_sd, tr.outcome.std(axis=0))
    assert not np.allclose(norm.cov_mean, ds.covariates.mean(axis=(0, 1)))
    x = ds.covariates
    assert np.abs(norm.x_inv(norm.x(x)) - x).max() < 1e-10
    assert np.abs(norm.y_inv(norm.y(ds.outcome)) - ds.outcome).max() < 1e-10


def test_normalizer_accounts_for_dequantization_noise():
    ds, _ = gen_simple3(GeneratorConfig(n_patients=200))
    norm = Normalizer.fit(ds, dequant_alpha=0.5)
    assert norm.a_sd == pytest.approx(np.sqrt(ds.treatment.var() + 0.5**2 / 12))


def standard_normal_panel(n=2000, t=3, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, t, 1))
    a = r.normal(size=(n, t))
    y = r.normal(size=(n, t))
    return PanelDataset("noise", seed, ["X1"], x, a, y, np.zeros((n, t, 1), np.uint8), y, y, np.ones((n, t)))


def test_identity_start_matches_gaussian_entropy():
    ds = standard_normal_panel()
    res = train(ds, simple3_graph(), TrainConfig(max_epochs=3, **FAST))
    start = res.history[0]["val_nll"]
    # entropy of a standard normal is 0.5 * log(2 * pi * e) per dimension
    assert start == pytest.approx(3 * 0.5 * np.log(2 * np.pi * np.e), abs=0.05)
    assert min(h["val_nll"] for h in res.history) <= start


def test_training_loss_decreases_early():
    curves = []
    for seed in range(3):
        ds, g = gen_simple3(GeneratorConfig(seed=seed, n_patients=1500))
        res = train(ds, g, TrainConfig(seed=seed, max_epochs=5, patience=50, hidden_dim=16, flow_hidden=16))
        curves.append([h["train_nll"] for h in res.history[1:6]])
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) < 0)


def test_training_is_deterministic():
    ds, g = gen_simple3(GeneratorConfig(n_patients=300))
    cfg = TrainConfig(max_epochs=4, **FAST)
    a = train(ds, g, cfg)
    b = train(ds, g, cfg)
    assert a.history == b.history
    for k, v in a.model.named_params().items():
        assert np.array_equal(v, b.model.named_params()[k])


def test_refuses_incomplete_data():
    ds, g = gen_ldl(GeneratorConfig(n_patients=100))
    with pytest.raises(NonFiniteInput):
        train(apply_mnar(ds, MnarConfig()), g, TrainConfig(**FAST))


def test_divergence_restores_last_good_parameters(monkeypatch):
    ds, g = gen_simple3(GeneratorConfig(n_patients=200))
    calls = {"n": 0}
    original = CausalFlowModel.nll_and_grads

    def flaky(self, *args):
        calls["n"] += 1
        loss, grads = original(self, *args)
        return (float("nan"), grads) if calls["n"] > 3 else (loss, grads)

    monkeypatch.setattr(CausalFlowModel, "nll_and_grads", flaky)
    with pytest.raises(DivergedLoss) as info:
        train(ds, g, TrainConfig(max_epochs=10, batch_size=64, **FAST))
    model = info.value.model
    assert model is not None
    assert all(np.all(np.isfinite(v)) for v in model.named_params().values())


def test_adam_first_step_is_sign_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    opt = Adam(p, lr=0.1)
    opt.step({"w": np.array([0.5, -4.0, 0.0])})
    assert np.allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ds, g = gen_ldl(GeneratorConfig(n_patients=200))
    res = train(ds, g, TrainConfig(max_epochs=2, **FAST))
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(res.model, path)
    return res.model, path


def test_checkpoint_round_trip_is_bitwise(trained):
    model, path = trained
    loaded = load_checkpoint(path, expected_graph=ldl_graph())
    for k, v in model.named_params().items():
        assert np.array_equal(v, loaded.named_params()[k])
    assert loaded.config == model.config and loaded.trained
    assert np.array_equal(loaded.normalizer.y_mean, model.normalizer.y_mean)


def test_truncated_or_modified_checkpoint(trained, tmp_path):
    _, path = trained
    raw = path.read_bytes()
    short = tmp_path / "short.ckpt"
    short.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(short)
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(bad)


def test_checkpoint_rejects_other_graph(trained):
    _, path = trained
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, expected_graph=ldl_graph().remove_edge("bmi", "ldl"))
