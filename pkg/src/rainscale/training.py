"""Losses, Adam, and the Simple / CGAN training loops."""

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (
    DivergenceDetected,
    InvalidConfig,
    LengthMismatch,
    NonFiniteTensor,
    ShapeMismatch,
)
from .grid import (
    NormalizationSpec,
    SplitScheme,
    Variable,
    as_variable,
    block_mean_upscale,
    normalize_array,
    preprocess_precip,
    temporal_split_indices,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    w_a: float = 1.0
    w_c: float = 5.0
    m: int = 32
    iterations: int = 8000
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    c_clip: float = 0.01
    k_d: int = 3
    seed: int = 0
    val_every: int = 100
    loss: str = "l1"
    # content term against the target's own domain mean, as Eq. (1) is printed
    literal_ybar: bool = False

    def validate(self):
        if self.w_a < 0 or self.w_c < 0:
            raise InvalidConfig("loss weights w_a and w_c must be >= 0")
        if self.m < 1:
            raise InvalidConfig("minibatch size m must be >= 1")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be >= 0")
        if self.c_clip <= 0:
            raise InvalidConfig("c_clip must be > 0")
        if self.k_d < 0:
            raise InvalidConfig("k_d must be >= 0")
        if self.lr_g < 0 or self.lr_d < 0:
            raise InvalidConfig("learning rates must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("Adam betas must lie in [0, 1)")
        if self.loss not in ("l1", "l2"):
            raise InvalidConfig(f"loss must be l1 or l2, not {self.loss!r}")
        if self.val_every < 1:
            raise InvalidConfig("val_every must be >= 1")
        return self

    def config_hash(self):
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class LossReport:
    iteration: int
    g_adv: float
    g_content: float
    d_loss: float = math.nan
    val_l1: float = math.nan


LOSS_COLUMNS = ("iteration", "g_adv", "g_content", "d_loss", "val_l1")


def write_loss_csv(reports, path):
    """One row per iteration; missing values (no critic, no validation) are blank."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for r in reports:
            row = [r.iteration]
            for name in LOSS_COLUMNS[1:]:
                v = getattr(r, name)
                row.append("" if math.isnan(v) else repr(float(v)))
            writer.writerow(row)


# ------------------------------------------------------------------------ losses


def _scores(d_scores):
    t = ag.as_tensor(d_scores)
    if t.data.ndim == 1:
        t = ag.reshape(t, (t.shape[0], 1))
    return t


def generator_terms(d_scores, pred, target, cfg):
    """Adversarial and content parts of the generator loss as scalar tensors."""
    d_scores = _scores(d_scores)
    pred, target = ag.as_tensor(pred), ag.as_tensor(target)
    m = d_scores.shape[0]
    if pred.shape[0] != m:
        raise ShapeMismatch(f"{m} critic scores for a batch of {pred.shape[0]}")
    adv = ag.tsum(d_scores) * (-cfg.w_a / m)
    if cfg.literal_ybar:
        # |Y - Ybar| with Ybar the per-sample domain mean; constant in the generator
        t = target.data
        ybar = t.mean(axis=tuple(range(1, t.ndim)), keepdims=True)
        content = Tensor(np.asarray(cfg.w_c * np.abs(t - ybar).mean()))
    else:
        content = ag.reduce_loss(pred, target, "l1") * cfg.w_c
    return adv, content


def generator_loss(d_scores, pred, target, cfg):
    """-(w_a/m) sum D(G(v)) + w_c * MAE(pred, target)."""
    adv, content = generator_terms(d_scores, pred, target, cfg)
    return adv + content


def discriminator_loss(fake_scores, real_scores, m=None):
    """(1/m) sum [D(fake) - D(real)]; the critic minimizes this."""
    fake, real = _scores(fake_scores), _scores(real_scores)
    if fake.shape != real.shape:
        raise LengthMismatch(f"{fake.shape[0]} fake scores vs {real.shape[0]} real scores")
    m = fake.shape[0] if m is None else m
    if m < 1:
        raise LengthMismatch("empty score lists")
    return ag.tsum(fake - real) * (1.0 / m)


# ------------------------------------------------------------------------- Adam


def adam_init(params):
    return {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; ``params`` and ``state`` are updated in place.

    Returns ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = adam_init([p.data for p in self.params])

    def step(self):
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -------------------------------------------------------------------------- data


@dataclass
class TrainingData:
    """Normalized model-ready arrays plus the calendar partition.

    ``inputs`` is (T, C, h, w), ``targets`` (T, 1, H, W), ``topo`` (1, 1, H, W)
    or None. ``norm`` normalizes the model inputs (its caps are for the input
    precipitation grid); ``target_norm`` holds the fine-grid caps.
    """

    inputs: np.ndarray
    targets: np.ndarray
    topo: np.ndarray | None
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    norm: NormalizationSpec
    target_norm: NormalizationSpec
    variables: tuple
    timesteps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def batch(self, positions):
        return self.inputs[positions], self.targets[positions]


def prepare_inputs(coarse, variables, norm, fit=None):
    """Preprocess and normalize coarse inputs into a (T, C, h, w) array.

    Precipitation caps are fitted on ``fit`` unless ``norm.caps`` is frozen.
    Returns the array and the spec with its caps filled in.
    """
    chans = []
    for name in variables:
        var = as_variable(name)
        values = coarse.fields[var]
        if var is Variable.PRECIP:
            values, norm = preprocess_precip(values, norm, fit=fit)
        chans.append(normalize_array(values, var, norm))
    return np.stack(chans, axis=1), norm


def prepare_data(coarse, fine, kind="DIRECT", variables=None, scheme=SplitScheme(), norm=None):
    """Build :class:`TrainingData` from a COARSE/FINE pair.

    The SR kind never reads the COARSE stack: its inputs are the 4x block
    mean of the FINE precipitation.
    """
    kind = kind.upper()
    base = norm or NormalizationSpec()
    steps = np.asarray(fine.timesteps)
    train, val, test = temporal_split_indices(steps, scheme)
    fit = np.sort(np.concatenate([train, val]))
    target, target_norm = preprocess_precip(fine.fields[Variable.PRECIP], dataclasses.replace(base, caps=None), fit)
    targets = normalize_array(target, Variable.PRECIP, target_norm)[:, None]
    if kind == "SR":
        variables = ("precip",)
        raw = block_mean_upscale(fine.fields[Variable.PRECIP], 4)
        pre, in_norm = preprocess_precip(raw, dataclasses.replace(base, caps=None), fit)
        inputs = normalize_array(pre, Variable.PRECIP, in_norm)[:, None]
        topo = None
    else:
        if coarse is None:
            raise InvalidConfig(f"{kind} needs the coarse stack")
        if not np.array_equal(coarse.timesteps, steps):
            raise ShapeMismatch("coarse and fine stacks cover different timesteps")
        variables = tuple(variables or ("precip", "slp", "iwv", "t2"))
        inputs, in_norm = prepare_inputs(coarse, variables, dataclasses.replace(base, caps=None), fit)
        topo = normalize_array(fine.static[Variable.TOPO], Variable.TOPO, base)[None, None]
    return TrainingData(
        inputs=np.ascontiguousarray(inputs),
        targets=np.ascontiguousarray(targets),
        topo=topo,
        train_idx=train,
        val_idx=val,
        test_idx=test,
        norm=in_norm,
        target_norm=target_norm,
        variables=tuple(as_variable(v).value for v in variables),
        timesteps=steps,
    )


class BatchSampler:
    """Epoch-shuffled minibatches of training positions from a seeded stream."""

    def __init__(self, positions, m, rng):
        self.positions = np.asarray(positions)
        if self.positions.size == 0:
            raise InvalidConfig("no training samples")
        self.m = min(m, self.positions.size)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)

    def next(self):
        if self._order.size < self.m:
            self._order = np.concatenate([self._order, self.rng.permutation(self.positions)])
        batch, self._order = self._order[: self.m], self._order[self.m :]
        return np.sort(batch)


def _streams(seed):
    g_seq, d_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(g_seq), np.random.default_rng(d_seq)


# ------------------------------------------------------------------- validation


def validate(model, data, metric="l1", positions=None, chunk=16):
    """Mean loss over ``positions`` (validation set by default); no updates."""
    if metric not in ("l1", "l2"):
        raise InvalidConfig(f"metric must be l1 or l2, not {metric!r}")
    positions = data.val_idx if positions is None else np.asarray(positions)
    if positions.size == 0:
        return math.nan
    total, count = 0.0, 0
    for lo in range(0, positions.size, chunk):
        idx = positions[lo : lo + chunk]
        x, y = data.batch(idx)
        pred = model(x, data.topo).data
        diff = pred - y
        total += float(np.abs(diff).sum() if metric == "l1" else (diff * diff).sum())
        count += diff.size
    return total / count


@dataclass
class TrainResult:
    reports: list
    best_state: dict
    final_state: dict
    best_iteration: int
    best_val: float
    critic_state: dict | None = None


def _check_finite(value, what, it):
    if not math.isfinite(value):
        raise DivergenceDetected(f"{what} became non-finite at iteration {it}")


def _step_val(model, data, cfg, it, best):
    """Validate on schedule; returns (val_l1, best tuple)."""
    if it % cfg.val_every and it != cfg.iterations:
        return math.nan, best
    val = validate(model, data, "l1")
    if math.isnan(val):
        # no validation split: keep the latest weights
        return val, (it, val, model.state_dict())
    if best[0] < 0 or val < best[1]:
        best = (it, val, model.state_dict())
    return val, best


def train_simple(model, data, cfg, loss_kind=None):
    """Minimize a plain L1 or L2 content loss with Adam.

    The model is left holding the best-validation weights.
    """
    cfg.validate()
    loss_kind = loss_kind or cfg.loss
    if loss_kind not in ("l1", "l2"):
        raise InvalidConfig(f"loss must be l1 or l2, not {loss_kind!r}")
    g_rng, _ = _streams(cfg.seed)
    sampler = BatchSampler(data.train_idx, cfg.m, g_rng)
    opt = Adam(model.parameters(), cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps)
    reports = []
    best = (-1, math.inf, model.state_dict())
    for it in range(1, cfg.iterations + 1):
        x, y = data.batch(sampler.next())
        opt.zero_grad()
        try:
            loss = ag.reduce_loss(model(x, data.topo), y, loss_kind)
            ag.backward(loss)
        except NonFiniteTensor as exc:
            raise DivergenceDetected(f"iteration {it}: {exc}") from exc
        value = loss.item()
        _check_finite(value, "training loss", it)
        opt.step()
        val, best = _step_val(model, data, cfg, it, best)
        reports.append(LossReport(it, 0.0, value, math.nan, val))
        if val == val:
            log.info("iter %d  %s %.6g  val_l1 %.6g", it, loss_kind, value, val)
    final = model.state_dict()
    model.load_state_dict(best[2])
    return TrainResult(reports, best[2], final, best[0], best[1])


def clip_weights(model, c):
    for p in model.parameters():
        np.clip(p.data, -c, c, out=p.data)


def train_cgan(gen, disc, data, cfg):
    """Alternate ``k_d`` clipped critic steps with one generator step.

    Generator batches come from the same seeded stream as
    :func:`train_simple`; critic batches from a second stream. The
    generator is left holding the best-validation weights.
    """
    cfg.validate()
    g_rng, d_rng = _streams(cfg.seed)
    g_sampler = BatchSampler(data.train_idx, cfg.m, g_rng)
    d_sampler = BatchSampler(data.train_idx, cfg.m, d_rng)
    opt_g = Adam(gen.parameters(), cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps)
    opt_d = Adam(disc.parameters(), cfg.lr_d, cfg.beta1, cfg.beta2, cfg.eps)
    clip_weights(disc, cfg.c_clip)
    reports = []
    best = (-1, math.inf, gen.state_dict())
    for it in range(1, cfg.iterations + 1):
        d_value = math.nan
        try:
            for _ in range(cfg.k_d):
                x, y = data.batch(d_sampler.next())
                fake = Tensor(gen(x, data.topo).data)
                opt_d.zero_grad()
                d_loss = discriminator_loss(disc(fake), disc(y))
                ag.backward(d_loss)
                opt_d.step()
                clip_weights(disc, cfg.c_clip)
                d_value = d_loss.item()
                _check_finite(d_value, "critic loss", it)

            x, y = data.batch(g_sampler.next())
            opt_g.zero_grad()
            pred = gen(x, data.topo)
            if cfg.w_a > 0:
                scores = disc(pred)
            else:
                scores = Tensor(np.zeros((pred.shape[0], 1)))
            adv, content = generator_terms(scores, pred, y, cfg)
            ag.backward(adv + content)
        except NonFiniteTensor as exc:
            raise DivergenceDetected(f"iteration {it}: {exc}") from exc
        opt_d.zero_grad()
        _check_finite(adv.item() + content.item(), "generator loss", it)
        opt_g.step()
        val, best = _step_val(gen, data, cfg, it, best)
        reports.append(LossReport(it, adv.item(), content.item(), d_value, val))
        if val == val:
            log.info("iter %d  adv %.4g content %.4g critic %.4g val_l1 %.6g", it, adv.item(), content.item(), d_value, val)
    final = gen.state_dict()
    gen.load_state_dict(best[2])
    return TrainResult(reports, best[2], final, best[0], best[1], critic_state=disc.state_dict())
