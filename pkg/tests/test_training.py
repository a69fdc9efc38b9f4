import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rainscale import autograd as ag
from rainscale.autograd import Tensor
from rainscale.errors import DivergenceDetected, InvalidConfig, LengthMismatch, ShapeMismatch
from rainscale.grid import NormalizationSpec, Variable, block_mean_upscale, normalize_array, preprocess_precip
from rainscale.models import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
from rainscale.training import (
    Adam,
    BatchSampler,
    TrainConfig,
    adam_init,
    adam_step,
    discriminator_loss,
    generator_loss,
    generator_terms,
    prepare_data,
    train_cgan,
    train_simple,
    validate,
    write_loss_csv,
)

SMALL = dict(n_stages=1, branches=(4, 4, 4), encoder_channels=4, up_channels=4, topo_channels=4)
CRITIC = DiscriminatorSpec(widths=(4, 8))


@pytest.fixture(scope="module")
def data(tiny_pair):
    return prepare_data(*tiny_pair, kind="DIRECT")


@pytest.fixture(scope="module")
def sr_data(tiny_pair):
    return prepare_data(None, tiny_pair[1], kind="SR")


def fields(n=1, value=0.0, shape=(1, 2, 2)):
    return Tensor(np.full((n,) + shape, value))


# ------------------------------------------------------------------------ losses


def test_generator_loss_vanishes():
    cfg = TrainConfig()
    assert generator_loss(np.zeros(3), fields(3, 0.4), fields(3, 0.4), cfg).item() == 0.0


def test_generator_loss_adversarial_plug_in():
    cfg = TrainConfig(w_a=1.0, w_c=5.0)
    assert generator_loss([2.0], fields(1, 0.3), fields(1, 0.3), cfg).item() == -2.0


def test_generator_loss_content_plug_in():
    cfg = TrainConfig(w_a=1.0, w_c=5.0)
    assert generator_loss(np.zeros(2), fields(2, 1.5), fields(2, 0.5), cfg).item() == 5.0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(0, 3))
def test_generator_loss_without_critic_is_weighted_mae(scores, w_c):
    r = np.random.default_rng(len(scores))
    pred = r.uniform(size=(len(scores), 1, 3, 3))
    target = r.uniform(size=pred.shape)
    cfg = TrainConfig(w_a=0.0, w_c=w_c)
    loss = generator_loss(scores, Tensor(pred), Tensor(target), cfg).item()
    assert loss == ag.reduce_loss(Tensor(pred), Tensor(target), "l1").item() * w_c


def test_generator_loss_batch_mismatch():
    with pytest.raises(ShapeMismatch):
        generator_loss([1.0, 2.0], fields(3), fields(3), TrainConfig())


def test_literal_ybar_content_ignores_prediction(rng):
    cfg = TrainConfig(literal_ybar=True, w_c=2.0)
    target = rng.uniform(size=(2, 1, 4, 4))
    _, a = generator_terms([0.0, 0.0], Tensor(rng.uniform(size=target.shape)), Tensor(target), cfg)
    _, b = generator_terms([0.0, 0.0], Tensor(np.zeros(target.shape)), Tensor(target), cfg)
    ybar = target.mean(axis=(1, 2, 3), keepdims=True)
    assert a.item() == b.item() == pytest.approx(2.0 * np.abs(target - ybar).mean(), rel=1e-15)


def test_discriminator_loss_plug_in():
    assert discriminator_loss([0.7, -1.2], [0.7, -1.2]).item() == 0.0
    assert discriminator_loss([1.0], [0.0], 1).item() == 1.0
    assert discriminator_loss([0.0], [3.0], 1).item() == -3.0


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=8))
def test_discriminator_loss_antisymmetric(pairs):
    fake, real = map(list, zip(*pairs))
    assert discriminator_loss(fake, real).item() == -discriminator_loss(real, fake).item()


def test_discriminator_loss_length_mismatch():
    with pytest.raises(LengthMismatch):
        discriminator_loss([1.0, 2.0], [1.0])


# -------------------------------------------------------------------------- Adam


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = adam_init(p)
    adam_step(p, [np.zeros(2)], state, 1e-3)
    assert p[0].tolist() == [1.0, -2.0]
    assert not state["m"][0].any() and not state["v"][0].any()


def test_adam_first_step():
    p = [np.array([0.5])]
    adam_step(p, [np.array([1.0])], adam_init(p), 1e-3)
    assert p[0][0] == scalar_adam(0.5, [1.0], 1e-3)
    assert p[0][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(1e-5, 1e-1))
def test_adam_matches_scalar_oracle(grads, lr):
    p = [np.array([0.25])]
    state = adam_init(p)
    for g in grads:
        adam_step(p, [np.array([g])], state, lr)
    assert p[0][0] == pytest.approx(scalar_adam(0.25, grads, lr), rel=1e-12, abs=1e-15)


def test_adam_is_deterministic(rng):
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]

    def run():
        p = [np.ones((3, 4))]
        s = adam_init(p)
        for g in grads:
            adam_step(p, [g], s, 0.01)
        return p[0]

    assert run().tobytes() == run().tobytes()


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeMismatch):
        adam_step(p, [np.zeros(4)], adam_init(p), 0.1)


def test_adam_class_treats_missing_grad_as_zero():
    t = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([t], 0.1)
    opt.step()
    assert t.data.tolist() == [1.0, 1.0]


# -------------------------------------------------------------------------- data


def test_prepare_data_shapes(data, tiny_pair):
    coarse, fine = tiny_pair
    T = len(coarse)
    assert data.inputs.shape == (T, 4) + coarse.shape
    assert data.targets.shape == (T, 1) + fine.shape
    assert data.topo.shape == (1, 1) + fine.shape
    assert data.targets.min() == 0.0
    parts = np.concatenate([data.train_idx, data.val_idx, data.test_idx])
    assert np.array_equal(np.sort(parts), np.arange(T))


def test_sr_never_reads_coarse(tiny_pair, sr_data):
    coarse, fine = tiny_pair
    sr = sr_data
    assert sr.inputs.shape[1] == 1 and sr.topo is None
    upscaled = block_mean_upscale(fine.fields[Variable.PRECIP], 4)
    fit = np.sort(np.concatenate([sr.train_idx, sr.val_idx]))
    pre, _ = preprocess_precip(upscaled, NormalizationSpec(), fit)
    # the block mean of the fine field, not the coarse stack, feeds the model
    assert np.array_equal(sr.inputs[:, 0], normalize_array(pre, "precip", NormalizationSpec()))
    assert not np.array_equal(upscaled, coarse.fields[Variable.PRECIP])


def test_batch_sampler_covers_epoch():
    s = BatchSampler(np.arange(10), 4, np.random.default_rng(0))
    seen = np.concatenate([s.next() for _ in range(5)])
    # the first 8 draws come from one permutation: no repeats
    assert np.unique(seen[:8]).size == 8
    assert s.next().size == 4


def test_batch_sampler_needs_data():
    with pytest.raises(InvalidConfig):
        BatchSampler([], 4, np.random.default_rng(0))


# -------------------------------------------------------------------- validation


class ZeroModel:
    def __call__(self, x, topo=None):
        return Tensor(np.zeros((x.shape[0], 1) + tuple(4 * s for s in x.shape[2:])))


class EchoModel:
    """Returns the stored targets for the inputs it is given."""

    def __init__(self, data):
        self.lookup = {x.tobytes(): y for x, y in zip(data.inputs, data.targets)}

    def __call__(self, x, topo=None):
        return Tensor(np.stack([self.lookup[s.tobytes()] for s in x]))


def test_validate_perfect_model(data):
    assert validate(EchoModel(data), data, "l1") == 0.0
    assert validate(EchoModel(data), data, "l2") == 0.0


def test_validate_zero_model(data):
    mu = np.abs(data.targets[data.val_idx]).mean()
    assert validate(ZeroModel(), data, "l1") == pytest.approx(mu, rel=1e-12)


def test_validate_is_pure(data):
    g = build_generator(GeneratorSpec("DIRECT", **SMALL), 0)
    before = g.state_dict()
    a = validate(g, data)
    assert validate(g, data) == a
    assert all(before[k].tobytes() == v.tobytes() for k, v in g.state_dict().items())


# ---------------------------------------------------------------------- training


def test_simple_zero_lr_keeps_loss(data):
    g = build_generator(GeneratorSpec("DIRECT", **SMALL), 0)
    cfg = TrainConfig(m=len(data.train_idx), iterations=3, lr_g=0.0, val_every=1)
    res = train_simple(g, data, cfg, "l2")
    losses = [r.g_content for r in res.reports]
    assert losses[0] == losses[1] == losses[2]


def test_simple_reproducible(data):
    def run():
        g = build_generator(GeneratorSpec("DIRECT", **SMALL), 1)
        res = train_simple(g, data, TrainConfig(m=4, iterations=6, val_every=3, seed=9, lr_g=1e-3), "l1")
        return [(r.g_content, r.val_l1) for r in res.reports], res.final_state

    (a, sa), (b, sb) = run(), run()
    assert a == b or all(x == y or (math.isnan(x[1]) and math.isnan(y[1]) and x[0] == y[0]) for x, y in zip(a, b))
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_simple_keeps_best_state(data):
    g = build_generator(GeneratorSpec("DIRECT", **SMALL), 2)
    res = train_simple(g, data, TrainConfig(m=4, iterations=6, val_every=2, lr_g=5e-3), "l2")
    vals = [r.val_l1 for r in res.reports if not math.isnan(r.val_l1)]
    assert res.best_val == min(vals)
    assert validate(g, data) == res.best_val


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_detected(data):
    g = build_generator(GeneratorSpec("DIRECT", **SMALL), 0)
    g.head.bias.data[...] = 1e200
    with pytest.raises(DivergenceDetected):
        train_simple(g, data, TrainConfig(m=2, iterations=1), "l2")


def test_invalid_train_config():
    for kw in (dict(m=0), dict(c_clip=0.0), dict(w_a=-1.0), dict(loss="huber"), dict(beta1=1.0)):
        with pytest.raises(InvalidConfig):
            TrainConfig(**kw).validate()


def test_cgan_without_critic_matches_simple(data):
    cfg = TrainConfig(m=4, iterations=5, w_a=0.0, w_c=1.0, k_d=0, val_every=5, lr_g=1e-3, seed=3)
    g1 = build_generator(GeneratorSpec("DIRECT", **SMALL), 4)
    g2 = build_generator(GeneratorSpec("DIRECT", **SMALL), 4)
    r1 = train_simple(g1, data, cfg, "l1")
    r2 = train_cgan(g2, build_discriminator(CRITIC, 0), data, cfg)
    assert [r.g_content for r in r1.reports] == [r.g_content for r in r2.reports]
    assert all(r1.final_state[k].tobytes() == r2.final_state[k].tobytes() for k in r1.final_state)


def test_cgan_clip_holds_after_every_critic_step(data, monkeypatch):
    import rainscale.training as tr

    seen = []
    original = tr.clip_weights

    def spy(model, c):
        original(model, c)
        seen.append(max(float(np.abs(p.data).max()) for p in model.parameters()))

    monkeypatch.setattr(tr, "clip_weights", spy)
    cfg = TrainConfig(m=2, iterations=2, k_d=3, c_clip=0.01, lr_d=0.5, val_every=2)
    train_cgan(build_generator(GeneratorSpec("DIRECT", **SMALL), 0), build_discriminator(CRITIC, 0), data, cfg)
    assert len(seen) == 1 + 2 * 3
    assert max(seen) <= 0.01


def test_cgan_reports_and_csv(sr_data, tmp_path):
    cfg = TrainConfig(m=2, iterations=3, k_d=1, val_every=2)
    disc = build_discriminator(CRITIC, 0)
    res = train_cgan(build_generator(GeneratorSpec("SR", **SMALL), 0), disc, sr_data, cfg)
    assert [r.iteration for r in res.reports] == [1, 2, 3]
    assert all(r.g_content >= 0 and not math.isnan(r.d_loss) for r in res.reports)
    assert res.critic_state is not None
    write_loss_csv(res.reports, tmp_path / "loss.csv")
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "g_adv", "g_content", "d_loss", "val_l1"]
    assert rows[1][4] == "" and rows[2][4] != ""
