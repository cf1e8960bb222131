"""The attention-weighted multi-column counting network.

Three shallow columns with large, medium and small kernels extract features
at 1/4 resolution.  An attention head turns features into a spatial
probability map, reweights the features with it, and a 1x1 convolution
produces the density map.

Variants:

``AM-CNN``
    columns concatenated, one attention head over the 30 concatenated channels.
``AM-CNN(3)``
    one attention head per column, attended features concatenated.
``AM-CNN(L)`` / ``AM-CNN(M)`` / ``AM-CNN(S)``
    a single column with its own attention head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    as_tensor,
    broadcast_mul,
    concat,
    conv2d,
    maxpool2x2,
    relu,
    scale,
    spatial_softmax,
    tanh,
)
from .errors import ShapeError

VARIANTS = ("AM-CNN", "AM-CNN(3)", "AM-CNN(L)", "AM-CNN(M)", "AM-CNN(S)")
INIT_STD = 0.01


@dataclass(frozen=True)
class BranchSpec:
    """One column: four odd kernel sizes and four output widths, pooled after conv1 and conv2."""

    label: str
    kernel_sizes: Tuple[int, int, int, int]
    channels: Tuple[int, int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.kernel_sizes) != 4 or len(self.channels) != 4:
            raise ValueError(f"branch {self.label}: need exactly 4 conv layers")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError(f"branch {self.label}: kernel sizes must be odd, got {self.kernel_sizes}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"branch {self.label}: channel counts must be positive")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def to_dict(self):
        return {"label": self.label, "kernel_sizes": list(self.kernel_sizes), "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["label"], tuple(d["kernel_sizes"]), tuple(d["channels"]))


DEFAULT_SPECS = (
    BranchSpec("L", (9, 7, 7, 7), (16, 32, 16, 8)),
    BranchSpec("M", (7, 5, 5, 5), (20, 40, 20, 10)),
    BranchSpec("S", (5, 3, 3, 3), (24, 48, 24, 12)),
)

POOL_AFTER = (0, 1)


def variant_branches(variant: str) -> Tuple[str, ...]:
    if variant in ("AM-CNN", "AM-CNN(3)"):
        return ("L", "M", "S")
    if variant in ("AM-CNN(L)", "AM-CNN(M)", "AM-CNN(S)"):
        return (variant[-2],)
    raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


class ModelParams:
    """Named parameters plus the structural metadata needed to run and rebuild them."""

    def __init__(self, variant, specs, params, seed=0, rescale=True, attention_kernel=1, in_channels=1):
        self.variant = variant
        self.specs = {s.label: s for s in specs}
        self.params: Dict[str, Parameter] = dict(params)
        self.seed = int(seed)
        self.rescale = bool(rescale)
        self.attention_kernel = int(attention_kernel)
        self.in_channels = int(in_channels)

    @property
    def branches(self) -> Tuple[str, ...]:
        return variant_branches(self.variant)

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def branch_parameters(self, label) -> List[Parameter]:
        prefix = f"branch.{label}."
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state, strict=True):
        missing = [n for n in self.params if n not in state]
        if strict and missing:
            raise ShapeError(f"state is missing tensors: {missing}")
        for name, arr in state.items():
            if name not in self.params:
                if strict:
                    raise ShapeError(f"unexpected tensor {name!r}")
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} does not match model shape {self.params[name].shape}")
            self.params[name].tensor.data[...] = arr

    def metadata(self):
        return {
            "variant": self.variant,
            "seed": self.seed,
            "rescale": self.rescale,
            "attention_kernel": self.attention_kernel,
            "in_channels": self.in_channels,
            "specs": [self.specs[b].to_dict() for b in ("L", "M", "S") if b in self.specs],
        }

    def __repr__(self):
        n = sum(p.data.size for p in self.params.values())
        return f"ModelParams({self.variant}, {len(self.params)} tensors, {n} weights)"


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


HEAD_INITS = ("halfnormal", "normal")


def _head_weight(rng, shape, std, head_init):
    """Output-head weights.

    Features entering the head are non-negative (ReLU), so zero-mean head
    weights often give a negative pre-activation at every position, and the
    output ReLU then blocks every gradient from the first step.  ``halfnormal``
    takes |Normal(0, std**2)| so the head starts live; ``normal`` is the plain draw.
    """
    if head_init not in HEAD_INITS:
        raise ValueError(f"unknown head init {head_init!r}; expected one of {', '.join(HEAD_INITS)}")
    w = _normal(rng, shape, std)
    return np.abs(w) if head_init == "halfnormal" else w


def branch_shapes(spec: BranchSpec, in_channels=1):
    shapes = []
    cin = in_channels
    for i, (k, c) in enumerate(zip(spec.kernel_sizes, spec.channels), 1):
        shapes.append((f"branch.{spec.label}.conv{i}.weight", (c, cin, k, k)))
        shapes.append((f"branch.{spec.label}.conv{i}.bias", (c,)))
        cin = c
    return shapes


def model_shapes(variant, specs, attention_kernel=1, in_channels=1):
    """Ordered (name, shape) list; the order fixes how the init RNG stream is consumed."""
    specs = {s.label: s for s in specs}
    labels = variant_branches(variant)
    for b in labels:
        if b not in specs:
            raise ValueError(f"variant {variant} needs a spec for branch {b}")
    shapes = []
    for b in labels:
        shapes += branch_shapes(specs[b], in_channels)
    ak = attention_kernel
    if variant == "AM-CNN(3)":
        for b in labels:
            c = specs[b].out_channels
            shapes += [(f"attention.{b}.weight", (1, c, ak, ak)), (f"attention.{b}.bias", (1,))]
        total = sum(specs[b].out_channels for b in labels)
    else:
        total = sum(specs[b].out_channels for b in labels)
        shapes += [("attention.weight", (1, total, ak, ak)), ("attention.bias", (1,))]
    shapes += [("head.weight", (1, total, 1, 1)), ("head.bias", (1,))]
    return shapes


def build_model(
    variant: str = "AM-CNN",
    specs: Sequence[BranchSpec] = DEFAULT_SPECS,
    seed: int = 0,
    rescale: bool = True,
    attention_kernel: int = 1,
    in_channels: int = 1,
    init_std: float = INIT_STD,
    head_init: str = "halfnormal",
) -> ModelParams:
    """Fresh parameters: weights ~ Normal(0, init_std**2), biases zero, deterministic in ``seed``."""
    if attention_kernel % 2 == 0:
        raise ValueError("attention kernel size must be odd")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in model_shapes(variant, specs, attention_kernel, in_channels):
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name == "head.weight":
            arr = _head_weight(rng, shape, init_std, head_init)
        else:
            arr = _normal(rng, shape, init_std)
        params[name] = Parameter.from_array(name, arr)
    return ModelParams(variant, specs, params, seed, rescale, attention_kernel, in_channels)


def pretrain_head(spec: BranchSpec, seed=0, init_std=INIT_STD, head_init="halfnormal") -> List[Parameter]:
    """Temporary 1x1 density head used while a column is trained on its own."""
    rng = np.random.default_rng([seed, ord(spec.label)])
    w = _head_weight(rng, (1, spec.out_channels, 1, 1), init_std, head_init)
    w = Parameter.from_array(f"pretrain.{spec.label}.head.weight", w)
    b = Parameter.from_array(f"pretrain.{spec.label}.head.bias", np.zeros(1))
    return [w, b]


def as_image(image) -> Tensor:
    t = as_tensor(image)
    if t.data.ndim == 2:
        t = Tensor(t.data[None])
    if t.data.ndim != 3:
        raise ShapeError(f"image must be [H,W] or [C,H,W], got {t.shape}")
    return t


def _check_divisible(t: Tensor):
    h, w = t.shape[1:]
    if h % 4 or w % 4:
        raise ShapeError(f"image {h}x{w} is not divisible by 4; crop it first")


def forward_branch(params: ModelParams, label: str, image) -> Tensor:
    """conv-pool-conv-pool-conv-conv with ReLU after every conv; output at 1/4 resolution."""
    x = as_image(image)
    _check_divisible(x)
    for i in range(4):
        x = relu(conv2d(x, params[f"branch.{label}.conv{i + 1}.weight"].tensor,
                        params[f"branch.{label}.conv{i + 1}.bias"].tensor))
        if i in POOL_AFTER:
            x = maxpool2x2(x)
    return x


def attention_head(features: Tensor, weight, bias, rescale: bool = True):
    """Score map S = tanh(conv(features)), M = spatial softmax of S, features reweighted by M.

    With ``rescale`` the map is multiplied by the number of positions before
    reweighting, so a uniform M leaves the features unchanged.
    """
    w = weight.tensor if isinstance(weight, Parameter) else as_tensor(weight)
    b = bias.tensor if isinstance(bias, Parameter) else as_tensor(bias)
    s = tanh(conv2d(features, w, b))
    m = spatial_softmax(s)
    reweight = scale(m, float(m.shape[1] * m.shape[2])) if rescale else m
    return m, broadcast_mul(features, reweight)


def forward(params: ModelParams, image, rescale: Optional[bool] = None):
    """Density map at 1/4 resolution and the list of probability maps."""
    rescale = params.rescale if rescale is None else rescale
    x = as_image(image)
    _check_divisible(x)
    feats = [forward_branch(params, b, x) for b in params.branches]
    if params.variant == "AM-CNN(3)":
        maps, attended = [], []
        for b, f in zip(params.branches, feats):
            m, fa = attention_head(f, params[f"attention.{b}.weight"], params[f"attention.{b}.bias"], rescale)
            maps.append(m)
            attended.append(fa)
        fused = concat(attended)
    else:
        f = feats[0] if len(feats) == 1 else concat(feats)
        m, fused = attention_head(f, params["attention.weight"], params["attention.bias"], rescale)
        maps = [m]
    density = relu(conv2d(fused, params["head.weight"].tensor, params["head.bias"].tensor))
    return density, maps


def predict_count(params: ModelParams, image) -> float:
    density, _ = forward(params, image)
    return float(density.data.sum())
