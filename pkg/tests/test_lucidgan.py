import numpy as np
import pandas as pd
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fairaudit import lucidgan as lg
from fairaudit.blackbox import ScoredTable
from fairaudit.data import DataError, FeatureSpec, RawTable, TableSchema
from fairaudit.lucidgan import (CanonicalSet, ConditionBatch, ConditionSampler, Critic, LucidGAN, TrainConfig,
                                activate, condition_match, conditional_cross_entropy, gradient_penalty,
                                log_frequency_weights, proxy_audit_prepare, train_lucidgan)
from fairaudit.transforms import Encoder

from conftest import toy_table


def test_log_frequency_weights():
    w = log_frequency_weights([0, np.e - 1, np.e ** 3 - 1])
    assert np.allclose(w, [0, 0.25, 0.75])
    with pytest.raises(DataError):
        log_frequency_weights([0, 0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(gp_lambda=float("nan"))
    with pytest.raises(ValueError, match="pac"):
        LucidGAN(Encoder.fit(toy_table(50)), config=TrainConfig(batch_size=55))


@pytest.fixture(scope="module")
def sampler_setup():
    t = toy_table(2000, seed=1)
    enc = Encoder.fit(t)
    preds = np.linspace(0, 1, len(t))
    return t, enc, ConditionSampler(enc, t.rows, preds)


def test_sampler_monte_carlo(sampler_setup):
    t, enc, sampler = sampler_setup
    rng = np.random.default_rng(0)
    n = 200_000
    b = sampler.sample_masks(n, rng)
    # feature uniform, category by log frequency
    for j, f in enumerate(enc.schema.categorical):
        sel = b.features == j
        assert abs(sel.mean() - 0.5) < 0.02 * 0.5
        counts = t.rows[f.name].value_counts().reindex(f.categories).to_numpy()
        expect = np.log1p(counts) / np.log1p(counts).sum()
        got = np.bincount(b.categories[sel], minlength=len(f.categories)) / sel.sum()
        assert np.all(np.abs(got - expect) <= 0.02 * expect)
    assert np.all(b.mask.sum(axis=1) == 1)


def test_sampler_rows_match_conditions(sampler_setup):
    t, enc, sampler = sampler_setup
    b = sampler.sample(5000, np.random.default_rng(1))
    for j, f in enumerate(enc.schema.categorical):
        sel = b.features == j
        cats = np.asarray(f.categories)[b.categories[sel]]
        assert (t.rows[f.name].to_numpy()[b.rows[sel]] == cats).all()
    assert np.array_equal(b.predictions, sampler.predictions[b.rows])
    v = b.vectors()
    assert v.shape == (5000, 1 + enc.category_width)
    assert np.array_equal(v[:, 0], b.predictions.astype(np.float32))


def test_sampler_never_draws_zero_support():
    schema = TableSchema((FeatureSpec("A", "categorical", ("x", "y", "z")),), "yes")
    t = RawTable(schema, pd.DataFrame({"A": ["x"] * 30 + ["y"] * 10}))
    enc = Encoder.fit(t)
    s = ConditionSampler(enc, t.rows, np.full(40, 0.5))
    b = s.sample(3000, np.random.default_rng(0))
    assert not (b.categories == 2).any()


def test_conditional_probs_follow_target():
    rng = np.random.default_rng(0)
    g = rng.integers(2, size=1000)
    schema = TableSchema((FeatureSpec("G", "categorical", ("g0", "g1")),
                          FeatureSpec("C", "categorical", ("a", "b"))), "yes")
    rows = pd.DataFrame({"G": np.where(g == 1, "g1", "g0"), "C": rng.choice(["a", "b"], size=1000)})
    enc = Encoder.fit(RawTable(schema, rows))
    s = ConditionSampler(enc, rows, g * 0.9 + 0.05)
    hi, lo = s.conditional_probs(1.0), s.conditional_probs(0.0)
    assert hi.sum() == pytest.approx(1.0) and lo.sum() == pytest.approx(1.0)
    assert hi[0] == 0 and hi[1] > 0
    assert lo[1] == 0 and lo[0] > 0
    b = s.sample_masks(2000, np.random.default_rng(0), target=1.0)
    assert not ((b.features == 0) & (b.categories == 0)).any()
    assert np.all(b.predictions == 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), temp=st.floats(0.05, 2.0))
def test_activation_simplex(seed, temp):
    enc = Encoder.fit(toy_table(100))
    torch.manual_seed(seed)
    raw = 10 * torch.randn(64, enc.width)
    out = activate(raw, enc, temp)
    for s in enc.spans:
        block = out[:, s.start:s.end]
        if s.kind == "scalar":
            assert block.abs().max() <= 1
        else:
            assert torch.all(block >= 0)
            assert torch.allclose(block.sum(dim=1), torch.ones(64), atol=1e-5)


def test_gradient_penalty_finite_difference():
    torch.manual_seed(0)
    pac, d, n = 3, 4, 6
    critic = Critic(d, (8,), dropout=0.0, pac=pac).double()
    real = torch.randn(n, d, dtype=torch.float64)
    fake = torch.randn(n, d, dtype=torch.float64)
    alpha = torch.tensor([0.3, 0.8], dtype=torch.float64)
    got = gradient_penalty(critic, real, fake, pac, 10.0, alpha).item()

    a = alpha.repeat_interleave(pac)[:, None]
    x = (a * real + (1 - a) * fake).detach().numpy()
    h = 1e-6
    expect = 0.0
    for p in range(n // pac):
        rows = slice(p * pac, (p + 1) * pac)
        grad = np.zeros((pac, d))
        for i in range(pac):
            for j in range(d):
                xp, xm = x.copy(), x.copy()
                xp[p * pac + i, j] += h
                xm[p * pac + i, j] -= h
                with torch.no_grad():
                    fp = critic(torch.as_tensor(xp))[p].item()
                    fm = critic(torch.as_tensor(xm))[p].item()
                grad[i, j] = (fp - fm) / (2 * h)
        expect += 10.0 * (np.linalg.norm(grad) - 1) ** 2
        del rows
    expect /= n // pac
    assert got == pytest.approx(expect, rel=1e-3)


def test_gradient_penalty_zero_for_unit_slope():
    # critic with gradient norm exactly one per pack
    w = torch.zeros(4, dtype=torch.float64)
    w[0] = 1.0

    def critic(x):
        return (x.reshape(-1, 4) @ w)[:, None]

    real = torch.randn(4, 2, dtype=torch.float64)
    fake = torch.randn(4, 2, dtype=torch.float64)
    assert gradient_penalty(critic, real, fake, 2).item() == pytest.approx(0.0, abs=1e-12)


def test_critic_checks_pack_size():
    c = Critic(3, (4,), pac=5)
    with pytest.raises(ValueError, match="pac"):
        c(torch.zeros(7, 3))
    assert c(torch.zeros(10, 3)).shape == (2, 1)


def _batch(features, categories, enc):
    n = len(features)
    mask = np.zeros((n, enc.category_width), np.float32)
    return ConditionBatch(np.zeros(n), mask, np.asarray(features), np.asarray(categories), np.full(n, -1))


def test_conditional_cross_entropy_matches_manual():
    enc = Encoder.fit(toy_table(100))
    torch.manual_seed(0)
    raw = torch.randn(3, enc.width)
    b = _batch([0, 1, 1], [1, 0, 2], enc)
    sx, cx = enc.category_span("Sex"), enc.category_span("Color")
    manual = (-torch.log_softmax(raw[0, sx.start:sx.end], 0)[1]
              - torch.log_softmax(raw[1, cx.start:cx.end], 0)[0]
              - torch.log_softmax(raw[2, cx.start:cx.end], 0)[2]) / 3
    assert conditional_cross_entropy(raw, b, enc).item() == pytest.approx(manual.item(), rel=1e-6)


def test_condition_match():
    enc = Encoder.fit(toy_table(100))
    t = toy_table(4, seed=5)
    x = enc.transform(t)
    cats = [enc.schema["Sex"].categories.index(v) for v in t.rows["Sex"]]
    b = _batch([0] * 4, cats, enc)
    assert condition_match(x, b, enc).all()
    b2 = _batch([0] * 4, [1 - c for c in cats], enc)
    assert not condition_match(x, b2, enc).any()


def test_canonical_set_csv(tmp_path):
    rows = pd.DataFrame({"Sex": ["Male", "Female"], "Age": [30.0, 41.0]})
    c = CanonicalSet(rows, 1.0, {"Sex": "Male"}, {"method": "lucidgan", "seed": 3}, 0.97)
    c.to_csv(tmp_path / "c.csv")
    raw = pd.read_csv(tmp_path / "c.csv")
    assert "__prediction_target__" in raw.columns and "__fixed:Sex__" in raw.columns
    back = CanonicalSet.from_csv(tmp_path / "c.csv")
    assert back.rows.equals(rows)
    assert back.fixed_categories == {"Sex": "Male"}
    assert back.provenance["seed"] == 3
    assert back.condition_match_rate == 0.97


@pytest.fixture(scope="module")
def small_gan():
    t = toy_table(500, seed=2)
    p = 1 / (1 + np.exp(-2 * t.rows["Score"].to_numpy()))
    scored = ScoredTable(t, p)
    cfg = TrainConfig(epochs=3, batch_size=100, seed=0)
    return scored, train_lucidgan(scored, cfg, lg.GeneratorSpec(16, (32,)), lg.CriticSpec((32,), pac=10))


def test_gan_trains_and_logs(small_gan):
    _, gan = small_gan
    assert len(gan.log) == 3
    assert np.all(np.isfinite([[e.generator_loss, e.critic_loss] for e in gan.log]))
    assert set(gan.prediction_quantiles) >= {"q00", "q50", "q100"}


def test_generate_shapes_and_determinism(small_gan):
    _, gan = small_gan
    a = gan.generate(1.0, 50, seed=4)
    b = gan.generate(1.0, 50, seed=4)
    assert a.rows.equals(b.rows)
    assert list(a.rows.columns) == gan.encoder.schema.names
    assert len(a) == 50
    assert a.provenance["method"] == "lucidgan"
    assert gan.generate(1.0, 0).rows.empty
    for pol in ("marginal", "zero"):
        assert len(gan.generate(0.0, 20, mask_policy=pol)) == 20
    with pytest.raises(ValueError):
        gan.generate(1.0, 5, mask_policy="nope")
    with pytest.raises(ValueError):
        gan.generate(1.5, 5)


def test_fixed_categories_enforced(small_gan):
    _, gan = small_gan
    s = gan.generate(1.0, 40, {"Sex": "Female"}, seed=1)
    assert (s.rows["Sex"] == "Female").all()
    both = gan.generate(1.0, 20, {"Sex": "Female", "Color": "blue"}, seed=1, max_rounds=500)
    assert (both.rows["Sex"] == "Female").all() and (both.rows["Color"] == "blue").all()
    assert "acceptance_rate" in both.provenance
    with pytest.raises(DataError):
        gan.generate(1.0, 5, {"Sex": "Other"})
    with pytest.raises(DataError):
        gan.generate(1.0, 5, {"Age": "3"})


def test_canonical_pair(small_gan):
    _, gan = small_gan
    pos, neg = gan.canonical_pair(30)
    assert pos.prediction_target == 1.0 and neg.prediction_target == 0.0
    assert len(pos) == len(neg) == 30


def test_save_load_same_output(tmp_path, small_gan):
    _, gan = small_gan
    gan.save(tmp_path / "g.pt")
    back = LucidGAN.load(tmp_path / "g.pt")
    assert back.fingerprint() == gan.fingerprint()
    assert back.generate(1.0, 30, seed=2).rows.equals(gan.generate(1.0, 30, seed=2).rows)


def test_seeded_training_is_reproducible(small_gan):
    scored, gan = small_gan
    again = train_lucidgan(scored, gan.config, gan.gspec, gan.cspec)
    assert again.fingerprint() == gan.fingerprint()


def test_divergence_is_reported(monkeypatch, small_gan):
    scored, gan = small_gan
    monkeypatch.setattr(lg, "conditional_cross_entropy", lambda raw, b, e: raw.sum() * float("nan"))
    with pytest.raises(lg.TrainingDivergence):
        train_lucidgan(scored, TrainConfig(epochs=1, batch_size=100), gan.gspec, gan.cspec)


def test_proxy_prepare():
    t = toy_table(50, withheld=("Sex",))
    audit = proxy_audit_prepare(ScoredTable(t, np.full(50, 0.5)))
    assert audit.withheld == ("Sex",)
