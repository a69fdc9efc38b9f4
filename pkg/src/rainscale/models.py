"""Generators (Direct, Encoded, SR), the critic, inference and checkpoints."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .blocks import (
    BlockSpec,
    ChannelAttention,
    Conv,
    Inception,
    Module,
    SpatialAttention,
    UpsampleStage,
    VariableEncoder,
)
from .errors import InvalidSpec, IoFailure, ShapeMismatch, SpecMismatch
from .grid import (
    DYNAMIC_INPUTS,
    GridField,
    NormalizationSpec,
    Variable,
    apply_floor,
    as_variable,
    normalize_array,
)

FACTOR = 4
KINDS = ("DIRECT", "ENCODED", "SR")


@dataclass
class GeneratorSpec:
    kind: str = "DIRECT"
    variables: tuple | None = None
    n_stages: int = 3
    branches: tuple = (8, 8, 8)
    reduction: int = 4
    spatial_kernel: int = 7
    encoder_channels: int = 16
    up_channels: int = 8
    topo_channels: int = 8
    upsample_kernel: int = 4
    alpha: float = 0.2
    # a plain relu head dies under the L1 content loss on mostly dry targets;
    # physical output is still clipped to >= 0 by the inverse normalization
    head_activation: str = "leaky_relu"
    head_alpha: float = 0.01
    factor: int = FACTOR

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.variables is None:
            self.variables = ("precip",) if self.kind == "SR" else tuple(v.value for v in DYNAMIC_INPUTS)
        self.variables = tuple(as_variable(v).value for v in self.variables)
        self.branches = tuple(int(b) for b in self.branches)

    @property
    def uses_topo(self):
        return self.kind != "SR"

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"generator kind must be one of {KINDS}, got {self.kind!r}")
        if self.factor != FACTOR:
            raise InvalidSpec(f"upsampling factor is fixed at {FACTOR} (two x2 stages)")
        if self.kind == "SR" and self.variables != ("precip",):
            raise InvalidSpec("SR consumes coarse precipitation only")
        if self.kind != "SR" and "precip" not in self.variables:
            raise InvalidSpec("precipitation must be among the inputs")
        if self.n_stages < 1:
            raise InvalidSpec("need at least one inception stage")
        if self.head_activation not in ("relu", "leaky_relu"):
            raise InvalidSpec(f"head activation must be relu or leaky_relu, got {self.head_activation!r}")
        if sum(self.branches) % self.reduction:
            raise InvalidSpec("attention reduction must divide the inception width")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class DiscriminatorSpec:
    widths: tuple = (16, 32, 64, 64)
    kernel: int = 3
    stride: int = 2
    alpha: float = 0.2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self):
        if not self.widths or min(self.widths) < 1:
            raise InvalidSpec("critic needs at least one positive layer width")
        if self.stride < 1 or self.kernel < 1:
            raise InvalidSpec("critic kernel and stride must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)


def spec_hash(spec):
    payload = json.dumps({"type": type(spec).__name__, **spec.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class Trunk(Module):
    """Inception + CBAM stages at coarse resolution followed by two x2 upsamplers."""

    def __init__(self, spec, rng, in_channels):
        width = sum(spec.branches)
        self.stages = []
        cin = in_channels
        for _ in range(spec.n_stages):
            self.stages.append(Inception(BlockSpec("inception", cin, width, spec.branches, alpha=spec.alpha), rng))
            self.stages.append(ChannelAttention(BlockSpec("channel_attn", width, reduction=spec.reduction), rng))
            self.stages.append(SpatialAttention(BlockSpec("spatial_attn", width, kernel_size=spec.spatial_kernel), rng))
            cin = width
        up = dict(kernel=spec.upsample_kernel)
        self.up1 = UpsampleStage(BlockSpec("upsample", width, spec.up_channels, alpha=spec.alpha, extra=up), rng)
        self.up2 = UpsampleStage(BlockSpec("upsample", spec.up_channels, spec.up_channels, alpha=spec.alpha, extra=up), rng)

    def forward(self, x):
        for block in self.stages:
            x = block(x)
        return self.up2(self.up1(x))


class Generator(Module):
    """Coarse inputs (n, C, h, w) [+ fine topography] -> fine precip (n, 1, 4h, 4w)."""

    def __init__(self, spec, seed=0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        n_vars = len(spec.variables)
        if spec.kind == "ENCODED":
            enc = spec.encoder_channels
            self.encoders = [
                VariableEncoder(BlockSpec("encoder", 1, enc, alpha=spec.alpha), rng) for _ in range(n_vars)
            ]
            self.var_attn = [
                SpatialAttention(BlockSpec("spatial_attn", enc, kernel_size=spec.spatial_kernel), rng)
                for _ in range(n_vars)
            ]
            self.mix_attn = ChannelAttention(BlockSpec("channel_attn", enc * n_vars, reduction=spec.reduction), rng)
            trunk_in = enc * n_vars
        else:
            trunk_in = n_vars
        self.trunk = Trunk(spec, rng, trunk_in)
        head_in = spec.up_channels
        if spec.uses_topo:
            self.topo_encoder = VariableEncoder(BlockSpec("encoder", 1, spec.topo_channels, alpha=spec.alpha), rng)
            head_in += spec.topo_channels
        self.head = Conv(rng, head_in, 1, 3, act=spec.head_activation, alpha=spec.head_alpha)

    def forward(self, coarse, topo=None):
        coarse = ag.as_tensor(coarse)
        n, c, h, w = coarse.shape
        if c != len(self.spec.variables):
            raise ShapeMismatch(f"expected {len(self.spec.variables)} input channels, got {c}")
        if self.spec.kind == "ENCODED":
            feats = []
            for i, (enc, attn) in enumerate(zip(self.encoders, self.var_attn)):
                v = Tensor(coarse.data[:, i : i + 1])
                feats.append(attn(enc(v)))
            x = self.mix_attn(ag.concat_channels(feats))
        else:
            x = coarse
        x = self.trunk(x)
        if self.spec.uses_topo:
            if topo is None:
                raise ShapeMismatch(f"{self.spec.kind} generator needs fine topography")
            topo = np.asarray(topo.data if isinstance(topo, Tensor) else topo, dtype=np.float64)
            topo = topo.reshape((-1, 1) + topo.shape[-2:])
            if topo.shape[-2:] != (FACTOR * h, FACTOR * w):
                raise ShapeMismatch(f"topography {topo.shape[-2:]} is not {FACTOR}x {(h, w)}")
            if topo.shape[0] == 1:
                # static field: encode once, share across the batch
                feats = ag.repeat_batch(self.topo_encoder(Tensor(topo)), n)
            elif topo.shape[0] == n:
                feats = self.topo_encoder(Tensor(topo))
            else:
                raise ShapeMismatch(f"topography batch {topo.shape[0]} does not match inputs {n}")
            x = ag.concat_channels([x, feats])
        return self.head(x)


class Discriminator(Module):
    """Strided-conv critic returning one unbounded score per sample."""

    def __init__(self, spec, seed=0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = 1
        for width in spec.widths:
            self.layers.append(
                Conv(rng, cin, width, spec.kernel, stride=spec.stride, padding=spec.kernel // 2, alpha=spec.alpha)
            )
            cin = width
        self.head = Conv(rng, cin, 1, 1, padding=0, act=None)

    def forward(self, x):
        x = ag.as_tensor(x)
        for layer in self.layers:
            x = layer(x)
        score = self.head(ag.pool_stats(x, "global_avg"))
        return ag.reshape(score, (x.shape[0], 1))


def build_generator(spec, seed=0):
    return Generator(spec, seed)


def build_discriminator(spec=None, seed=0):
    return Discriminator(spec or DiscriminatorSpec(), seed)


# -------------------------------------------------------------------- inference


def generate_batch(model, coarse, topo=None, norm=None, chunk=16):
    """Physical fine precipitation (n, H, W) from normalized inputs (n, C, h, w)."""
    norm = norm or NormalizationSpec()
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.ndim != 4:
        raise ShapeMismatch(f"inputs must be (n, C, h, w), got {coarse.shape}")
    out = []
    for lo in range(0, coarse.shape[0], chunk):
        y = model(coarse[lo : lo + chunk], topo).data[:, 0]
        out.append(y)
    pred = np.concatenate(out, axis=0) if out else np.zeros((0,) + tuple(4 * s for s in coarse.shape[2:]))
    phys = normalize_array(pred, Variable.PRECIP, norm, "inverse")
    return apply_floor(phys, norm.precip_floor)


def generate(model, coarse, topo=None, norm=None, time_index=-1):
    """Downscale one timestep of normalized inputs (C, h, w) to a fine GridField."""
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.ndim != 3:
        raise ShapeMismatch(f"inputs must be (C, h, w), got {coarse.shape}")
    values = generate_batch(model, coarse[None], topo, norm)[0]
    return GridField(Variable.PRECIP, time_index, values)


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_MANIFEST = "checkpoint.txt"


def save_checkpoint(model, path, seed=0, config_hash="", norm=None, extra=None):
    """Write parameters as NPY files plus a manifest with the spec and its hash."""
    try:
        os.makedirs(path, exist_ok=True)
        kind = "generator" if isinstance(model, Generator) else "discriminator"
        lines = [
            f"model {kind}",
            f"spec_json {json.dumps(model.spec.to_dict(), sort_keys=True)}",
            f"spec_hash {spec_hash(model.spec)}",
            f"seed {int(seed)}",
            f"config_hash {config_hash or '-'}",
        ]
        for key, value in (extra or {}).items():
            lines.append(f"meta {key} {value}")
        for i, (name, p) in enumerate(model.named_parameters()):
            fname = f"p{i:03d}.npy"
            np.save(os.path.join(path, fname), np.ascontiguousarray(p.data, dtype="<f8"))
            lines.append(f"param {name} {','.join(map(str, p.shape))} {fname}")
        if norm is not None:
            save_norm(norm, os.path.join(path, "norm"))
        with open(os.path.join(path, CHECKPOINT_MANIFEST), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint_manifest(path):
    mpath = os.path.join(path, CHECKPOINT_MANIFEST)
    try:
        with open(mpath) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {mpath}: {exc}") from exc
    info = {"params": [], "meta": {}}
    for line in lines:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key == "param":
            name, shape, fname = rest.split()
            info["params"].append((name, tuple(int(s) for s in shape.split(",") if s), fname))
        elif key == "meta":
            mk, _, mv = rest.partition(" ")
            info["meta"][mk] = mv
        else:
            info[key] = rest
    for key in ("model", "spec_json", "spec_hash"):
        if key not in info:
            raise IoFailure(f"{mpath}: missing '{key}'")
    return info


def load_checkpoint(path, spec=None):
    """Rebuild a model from ``path``.

    When ``spec`` is given the stored spec hash must match it, otherwise
    :class:`SpecMismatch` is raised.
    """
    info = read_checkpoint_manifest(path)
    stored = json.loads(info["spec_json"])
    if info["model"] == "generator":
        spec_cls, model_cls = GeneratorSpec, Generator
    else:
        spec_cls, model_cls = DiscriminatorSpec, Discriminator
    stored_spec = spec_cls(**stored)
    if spec_hash(stored_spec) != info["spec_hash"]:
        raise SpecMismatch(f"{path}: manifest spec does not match its recorded hash")
    if spec is not None and spec_hash(spec) != info["spec_hash"]:
        raise SpecMismatch(f"{path}: checkpoint was written for a different model spec")
    model = model_cls(stored_spec, seed=int(info.get("seed", 0)))
    state = {}
    for name, shape, fname in info["params"]:
        fpath = os.path.join(path, fname)
        try:
            arr = np.load(fpath, allow_pickle=False)
        except (OSError, ValueError, EOFError) as exc:
            raise IoFailure(f"cannot read parameter file {fpath}: {exc}") from exc
        if arr.shape != shape:
            raise IoFailure(f"{fpath}: shape {arr.shape} != recorded {shape}")
        state[name] = arr
    try:
        model.load_state_dict(state)
    except ShapeMismatch as exc:
        raise SpecMismatch(str(exc)) from exc
    return model


def checkpoint_io(model, path, direction, **kwargs):
    if direction == "save":
        return save_checkpoint(model, path, **kwargs)
    if direction == "load":
        return load_checkpoint(path, spec=None if model is None else model.spec)
    raise ValueError(f"direction must be 'save' or 'load', not {direction!r}")


def save_norm(norm, path):
    os.makedirs(path, exist_ok=True)
    lines = [f"precip_floor {norm.precip_floor!r}", f"precip_cap_quantile {norm.precip_cap_quantile!r}"]
    for var, (lo, hi) in norm.bounds.items():
        lines.append(f"bounds {var.value} {lo!r} {hi!r}")
    if norm.caps is not None:
        np.save(os.path.join(path, "caps.npy"), np.ascontiguousarray(norm.caps, dtype="<f8"))
        lines.append("caps caps.npy")
    with open(os.path.join(path, "norm.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_norm(path):
    try:
        with open(os.path.join(path, "norm.txt")) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read normalization in {path}: {exc}") from exc
    kwargs, bounds = {}, {}
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "bounds":
            bounds[parts[1]] = (float(parts[2]), float(parts[3]))
        elif parts[0] == "caps":
            try:
                kwargs["caps"] = np.load(os.path.join(path, parts[1]), allow_pickle=False)
            except (OSError, ValueError, EOFError) as exc:
                raise IoFailure(f"cannot read caps in {path}: {exc}") from exc
        else:
            kwargs[parts[0]] = float(parts[1])
    return NormalizationSpec(bounds=bounds, **kwargs)
