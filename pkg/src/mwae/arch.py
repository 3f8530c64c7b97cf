"""Autoencoder architectures: the plain clustering AE and the residual anomaly AEs.

Parameters live in a flat name -> Tensor map so that checkpoints, He init and
the optimizer can treat every model the same way.  The forward pass is a pair
of plain functions (``encode``/``decode``) over a :class:`ModelState`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import NormState, Rng, Tensor
from .tensorio import read_container, write_container

CHECKPOINT_MAGIC = b"MWCK"

# (encoder filters, kernel size) per residual variant
ANO_VARIANTS = {
    "S3": ((2, 4, 8, 16), 3),
    "S5": ((2, 4, 8, 16), 5),
    "M3": ((4, 6, 8, 10), 3),
    "M5": ((4, 6, 8, 10), 5),
    "B3": ((32, 64, 128, 256), 3),
}
CLU_FILTERS = (8, 16, 32, 64)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str                       # "plain" or "residual"
    encoder_filters: tuple
    decoder_filters: tuple
    kernel_size: int
    input_channels: int
    input_size: tuple
    dropout_rate: float = 0.2
    name: str = ""

    def __post_init__(self):
        if self.family not in ("plain", "residual"):
            raise SpecError(f"unknown family {self.family!r}")
        if tuple(self.decoder_filters) != tuple(self.encoder_filters[:-1][::-1]):
            raise SpecError("decoder filters must mirror the encoder without its deepest block")
        if self.kernel_size % 2 == 0:
            raise SpecError("kernel size must be odd")
        h, w = self.input_size
        div = 2 ** (len(self.encoder_filters) - 1)
        if h % div or w % div:
            raise SpecError(f"input size {h}x{w} not divisible by {div}")
        if not 0 <= self.dropout_rate < 1:
            raise SpecError("dropout rate must be in [0, 1)")

    @property
    def n_pools(self) -> int:
        return len(self.encoder_filters) - 1

    @property
    def bottleneck_shape(self) -> tuple:
        h, w = self.input_size
        s = 2 ** self.n_pools
        return (self.encoder_filters[-1], h // s, w // s)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["decoder_filters"] = list(self.decoder_filters)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for k in ("encoder_filters", "decoder_filters", "input_size"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict = field(default_factory=dict)        # name -> Tensor
    norm: dict = field(default_factory=dict)          # bn name -> NormState
    rng_seed: Optional[int] = None

    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelState":
        return ModelState(
            spec=self.spec,
            params={k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
            norm={k: v.copy() for k, v in self.norm.items()},
            rng_seed=self.rng_seed,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# construction ---------------------------------------------------------

def _add_conv(st: ModelState, name: str, cin: int, cout: int, k: int):
    st.params[f"{name}.weight"] = Tensor(np.zeros((cout, cin, k, k), np.float32), requires_grad=True)
    st.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)


def _add_bn(st: ModelState, name: str, c: int):
    st.params[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
    st.params[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
    st.norm[name] = NormState(c)


def _block_io(spec: ModelSpec):
    """(prefix, in_channels, out_channels) for every block, encoder then decoder."""
    out = []
    cin = spec.input_channels
    for i, f in enumerate(spec.encoder_filters):
        out.append((f"enc{i}", cin, f))
        cin = f
    for j, f in enumerate(spec.decoder_filters):
        out.append((f"dec{j}", cin, f))
        cin = f
    return out


def allocate(spec: ModelSpec) -> ModelState:
    """Parameter tensors with the right shapes, zero kernels, unit gammas."""
    st = ModelState(spec=spec)
    k = spec.kernel_size
    for prefix, cin, cout in _block_io(spec):
        if spec.family == "plain":
            _add_conv(st, f"{prefix}.conv", cin, cout, k)
            _add_bn(st, f"{prefix}.bn", cout)
        else:
            _add_conv(st, f"{prefix}.conv1", cin, cout, k)
            _add_bn(st, f"{prefix}.bn1", cout)
            _add_conv(st, f"{prefix}.conv2", cout, cout, k)
            _add_bn(st, f"{prefix}.bn2", cout)
            if cin != cout:
                _add_conv(st, f"{prefix}.skip", cin, cout, 1)
    last = spec.decoder_filters[-1]
    _add_conv(st, "head", last, spec.input_channels, 1)
    return st


def he_init(state: ModelState, rng: Rng) -> ModelState:
    """Normal(0, 2/fan_in) kernels; zero biases and betas; unit gammas.

    Kernels are drawn in sorted parameter-name order so a seed fixes every value.
    """
    for name in sorted(state.params):
        p = state.params[name]
        if name.endswith(".weight"):
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            p.data[...] = rng.normal(p.shape, std=np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    for ns in state.norm.values():
        ns.mean[:] = 0.0
        ns.var[:] = 1.0
    state.rng_seed = rng.seed
    return state


def clu_spec(channels: int, size) -> ModelSpec:
    h, w = _size(size)
    if h != w:
        raise SpecError("clustering AE expects square inputs")
    return ModelSpec("plain", CLU_FILTERS, CLU_FILTERS[:-1][::-1], 3, channels, (h, w), name="clu")


def ano_spec(variant: str, channels: int, size, width_scale: float = 1.0) -> ModelSpec:
    """Residual variant spec; ``width_scale`` shrinks every filter count (min 1)."""
    key = variant.upper()
    if key not in ANO_VARIANTS:
        raise SpecError(f"unknown variant {variant!r}; expected one of {sorted(ANO_VARIANTS)}")
    filters, k = ANO_VARIANTS[key]
    if width_scale != 1.0:
        filters = tuple(max(1, int(round(f * width_scale))) for f in filters)
    name = key if width_scale == 1.0 else f"{key}x{width_scale:g}"
    return ModelSpec("residual", filters, filters[:-1][::-1], k, channels, _size(size), name=name)


def build(spec: ModelSpec, seed: int = 0) -> ModelState:
    return he_init(allocate(spec), Rng(seed))


def build_clu_ae(channels: int, size, seed: int = 0) -> ModelState:
    return build(clu_spec(channels, size), seed)


def build_ano_ae(variant: str, channels: int, size, seed: int = 0, width_scale: float = 1.0) -> ModelState:
    return build(ano_spec(variant, channels, size, width_scale), seed)


def _size(size):
    if isinstance(size, int):
        return (size, size)
    h, w = size
    return (int(h), int(w))


# forward ---------------------------------------------------------------

def _conv(st, name, x):
    return T.conv2d(x, st.params[f"{name}.weight"], st.params[f"{name}.bias"])


def _bn(st, name, x, mode):
    return T.batchnorm2d(x, st.params[f"{name}.gamma"], st.params[f"{name}.beta"], st.norm[name], mode)


def plain_block(st: ModelState, prefix: str, x: Tensor, mode: str) -> Tensor:
    return T.relu(_bn(st, f"{prefix}.bn", _conv(st, f"{prefix}.conv", x), mode))


def residual_block(st: ModelState, prefix: str, x: Tensor, mode: str) -> Tensor:
    """conv-BN-ReLU-conv-BN on the main path, identity or 1x1 conv on the skip, ReLU after the sum."""
    h = T.relu(_bn(st, f"{prefix}.bn1", _conv(st, f"{prefix}.conv1", x), mode))
    h = _bn(st, f"{prefix}.bn2", _conv(st, f"{prefix}.conv2", h), mode)
    skip = _conv(st, f"{prefix}.skip", x) if f"{prefix}.skip.weight" in st.params else x
    return T.relu(h + skip)


def _block(st, prefix, x, mode):
    if st.spec.family == "plain":
        return plain_block(st, prefix, x, mode)
    return residual_block(st, prefix, x, mode)


def _as_input(st: ModelState, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if x.data.ndim == 3:
        x = Tensor(x.data[None], dtype=x.dtype)
    c, (h, w) = st.spec.input_channels, st.spec.input_size
    if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
        raise T.ShapeError(f"model expects input [N,{c},{h},{w}], got {x.shape}")
    return x


def encode(st: ModelState, x, mode: str = "eval", rng: Optional[Rng] = None) -> Tensor:
    x = _as_input(st, x)
    spec = st.spec
    for i in range(len(spec.encoder_filters)):
        if i > 0:
            x = T.maxpool2d(x)
        x = _block(st, f"enc{i}", x, mode)
    return T.dropout(x, spec.dropout_rate, mode, rng)


def decode(st: ModelState, z, mode: str = "eval") -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    want = st.spec.bottleneck_shape
    if z.data.ndim != 4 or z.shape[1:] != want:
        raise T.ShapeError(f"decoder expects [N,{want[0]},{want[1]},{want[2]}], got {z.shape}")
    for j in range(len(st.spec.decoder_filters)):
        z = T.upsample2d(z)
        z = _block(st, f"dec{j}", z, mode)
    return T.sigmoid(_conv(st, "head", z))


def forward(st: ModelState, x, mode: str = "eval", rng: Optional[Rng] = None) -> Tensor:
    return decode(st, encode(st, x, mode, rng), mode)


def predict(st: ModelState, x: np.ndarray, batch_size: int = 16, what: str = "output") -> np.ndarray:
    """Eval-mode pass over a stacked array in batches, returning numpy."""
    outs = []
    for i in range(0, len(x), batch_size):
        xb = Tensor(np.asarray(x[i:i + batch_size], dtype=np.float32))
        if what == "bottleneck":
            outs.append(encode(st, xb, "eval").data)
        else:
            outs.append(forward(st, xb, "eval").data)
    return np.concatenate(outs, axis=0)


# checkpoints -----------------------------------------------------------

def save_checkpoint(st: ModelState, path) -> None:
    names = sorted(st.params)
    norms = sorted(st.norm)
    header = {
        "spec": st.spec.to_dict(),
        "seed": st.rng_seed,
        "parameters": [[n, list(st.params[n].shape)] for n in names],
        "norm_stats": [[n, st.norm[n].mean.shape[0]] for n in norms],
    }
    tensors = [st.params[n].data for n in names]
    for n in norms:
        tensors.append(st.norm[n].mean)
        tensors.append(st.norm[n].var)
    write_container(Path(path), CHECKPOINT_MAGIC, header, tensors)


def load_checkpoint(path) -> ModelState:
    header, tensors = read_container(Path(path), CHECKPOINT_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    st = allocate(spec)
    st.rng_seed = header.get("seed")
    it = iter(tensors)
    for name, shape in header["parameters"]:
        arr = next(it)
        if name not in st.params or list(arr.shape) != list(shape) or st.params[name].shape != tuple(shape):
            raise SpecError(f"checkpoint parameter {name} does not match the model spec")
        st.params[name] = Tensor(arr.copy(), requires_grad=True)
    for name, _ in header["norm_stats"]:
        st.norm[name].mean = next(it).copy()
        st.norm[name].var = next(it).copy()
    return st
