"""The finite-difference gradient suite: every differentiable op, then the whole network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .autodiff import (
    Tensor,
    activation,
    broadcast_mul,
    check_parameters,
    concat,
    conv2d,
    grad_check,
    maxpool2x2,
    spatial_softmax,
    sum_all,
)
from .losses import LossConfig, combined_loss, euclidean_loss, masked_count, relative_deviation_loss
from .model import build_model, forward

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance


def _weighted(t: Tensor, r: np.ndarray) -> Tensor:
    # a random linear read-out makes the upstream gradient non-uniform
    return sum_all(t * Tensor(r))


def op_checks(h: float = 1e-5, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 8, 8))
    w = rng.normal(scale=0.3, size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    r_conv = rng.normal(size=(4, 8, 8))
    # well-separated values so no perturbation crosses a max-pool tie or a ReLU kink
    pool_in = rng.permutation(np.arange(3 * 8 * 8, dtype=np.float64)).reshape(3, 8, 8) * 0.01
    r_pool = rng.normal(size=(3, 4, 4))
    act_in = rng.normal(size=(3, 6, 6))
    act_in[np.abs(act_in) < 1e-3] = 0.5
    r_act = rng.normal(size=(3, 6, 6))
    s = rng.normal(size=(1, 6, 7))
    r_soft = rng.normal(size=(1, 6, 7))
    f = rng.normal(size=(5, 6, 7))
    r_mul = rng.normal(size=(5, 6, 7))
    parts = [rng.normal(size=(c, 4, 4)) for c in (2, 3)]
    r_cat = rng.normal(size=(5, 4, 4))
    gt = rng.random((1, 6, 6)) * 0.1
    pred = rng.random((1, 6, 6)) * 0.1

    cases = [
        ("conv2d.input", lambda t: _weighted(conv2d(t, Tensor(w), Tensor(b)), r_conv), x),
        ("conv2d.weight", lambda t: _weighted(conv2d(Tensor(x), t, Tensor(b)), r_conv), w),
        ("conv2d.bias", lambda t: _weighted(conv2d(Tensor(x), Tensor(w), t), r_conv), b),
        ("maxpool2x2", lambda t: _weighted(maxpool2x2(t), r_pool), pool_in),
        ("relu", lambda t: _weighted(activation(t, "relu"), r_act), act_in),
        ("tanh", lambda t: _weighted(activation(t, "tanh"), r_act), act_in),
        ("spatial_softmax", lambda t: _weighted(spatial_softmax(t), r_soft), s),
        ("broadcast_mul.features", lambda t: _weighted(broadcast_mul(t, Tensor(s)), r_mul), f),
        ("broadcast_mul.map", lambda t: _weighted(broadcast_mul(Tensor(f), t), r_mul), s),
        ("concat", lambda t: _weighted(concat([t, Tensor(parts[1])]), r_cat), parts[0]),
        ("euclidean_loss", lambda t: euclidean_loss([t], [gt]), pred),
        ("relative_deviation_loss", lambda t: relative_deviation_loss([gt.sum()], [masked_count(t)], 1.0), pred),
    ]
    return [CheckResult(name, grad_check(fn, point, h=h), OP_TOLERANCE) for name, fn, point in cases]


def model_check(size: int = 32, h: float = 1e-5, seed: int = 0, n_samples: int = 40,
                variant: str = "AM-CNN") -> CheckResult:
    """Combined loss of the full network w.r.t. sampled weights of every layer."""
    rng = np.random.default_rng(seed)
    # larger-than-default weights keep activations away from the all-zero regime
    model = build_model(variant, seed=seed, init_std=0.1)
    image = rng.random((size, size))
    gt = rng.random((size // 4, size // 4)) * 0.05
    cfg = LossConfig(alpha=1e-3)

    def loss():
        d, _ = forward(model, image)
        rd = relative_deviation_loss([gt.sum()], [masked_count(d)], cfg.z)
        return combined_loss(euclidean_loss([d], [gt]), rd, cfg)

    err, _ = check_parameters(loss, model.parameters(), n_samples=n_samples, h=h, seed=seed + 1)
    return CheckResult(f"{variant} end-to-end {size}x{size}", err, MODEL_TOLERANCE)


def run_suite(h: float = 1e-5, seed: int = 0, size: int = 32) -> List[CheckResult]:
    return op_checks(h, seed) + [model_check(size, h, seed)]
