"""Training losses and counting metrics.

``euclidean_loss`` is the per-pixel-normalized squared error between density
maps, ``relative_deviation_loss`` the squared count error relative to the
true count.  Both return scalar tensors so they can be backpropagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, as_tensor, mul, square, sub, sum_all
from .density import DensityMap
from .errors import ShapeError


@dataclass
class LossConfig:
    alpha: float = 1e-7
    z: float = 1.0
    use_rd: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.z > 0:
            raise ValueError(f"z must be > 0, got {self.z}")


def _grid(x):
    if isinstance(x, DensityMap):
        x = x.grid
    t = as_tensor(x)
    if t.data.ndim == 2:
        t = Tensor(t.data[None]) if not t.requires_grad else t
    return t


def masked_count(pred, mask=None) -> Tensor:
    """Sum of a predicted map, optionally restricted to a {0,1} mask."""
    p = _grid(pred)
    if mask is None:
        return sum_all(p)
    return sum_all(mul(p, Tensor(np.asarray(mask, dtype=np.float64).reshape(p.shape))))


def euclidean_loss(preds: Sequence, gts: Sequence, masks: Optional[Sequence] = None) -> Tensor:
    """Mean over samples of sum((pred - gt)^2) / Pix, with Pix the number of (unmasked) map pixels."""
    if len(preds) != len(gts) or not preds:
        raise ShapeError(f"need matching non-empty batches, got {len(preds)} predictions and {len(gts)} targets")
    total = None
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = _grid(p), _grid(g)
        if p.shape != g.shape:
            raise ShapeError(f"sample {i}: prediction {p.shape} vs ground truth {g.shape}")
        diff = sub(p, g)
        if masks is not None and masks[i] is not None:
            m = np.asarray(masks[i], dtype=np.float64).reshape(p.shape)
            pix = float(m.sum())
            diff = mul(diff, Tensor(m))
        else:
            pix = float(p.data.size)
        term = sum_all(square(diff)) * (1.0 / pix if pix > 0 else 0.0)
        total = term if total is None else total + term
    return total * (1.0 / len(preds))


def relative_deviation_loss(counts_gt: Sequence[float], counts_pred: Sequence, z: float = 1.0) -> Tensor:
    """Mean of ((y - y') / (y + z))^2."""
    if not z > 0:
        raise ValueError(f"z must be > 0, got {z}")
    if len(counts_gt) != len(counts_pred) or not counts_gt:
        raise ShapeError(f"need matching non-empty count lists, got {len(counts_gt)} and {len(counts_pred)}")
    total = None
    for y, yp in zip(counts_gt, counts_pred):
        y = float(y)
        if y < 0:
            raise ValueError(f"ground-truth count must be >= 0, got {y}")
        rel = (as_tensor(yp) - y) * (1.0 / (y + z))
        term = square(rel)
        total = term if total is None else total + term
    return total * (1.0 / len(counts_gt))


def combined_loss(ed: Tensor, rd: Tensor, cfg: LossConfig) -> Tensor:
    """``ed + alpha * rd``; exactly ``ed`` when the relative-deviation term is switched off."""
    if not cfg.use_rd:
        return ed
    return ed + as_tensor(rd) * cfg.alpha


@dataclass
class EvalReport:
    mae: float
    mse: float
    per_image: List[Tuple[float, float]]
    ids: List[str] = field(default_factory=list)

    def to_csv(self) -> str:
        ids = self.ids or [str(i) for i in range(len(self.per_image))]
        lines = ["image_id,gt_count,pred_count"]
        lines += [f"{i},{_fmt(y)},{_fmt(yp)}" for i, (y, yp) in zip(ids, self.per_image)]
        lines += [f"MAE,{_fmt(self.mae)}", f"MSE,{_fmt(self.mse)}"]
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def mae_mse(pairs: Sequence[Tuple[float, float]], ids: Optional[Sequence[str]] = None) -> EvalReport:
    """Mean absolute error and root-mean-square error of (true, estimated) count pairs."""
    if len(pairs) == 0:
        raise ValueError("mae_mse needs at least one (gt, pred) pair")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    err = arr[:, 0] - arr[:, 1]
    mae = float(np.mean(np.abs(err)))
    mse = math.sqrt(float(np.mean(err * err)))
    return EvalReport(mae, mse, [(float(a), float(b)) for a, b in arr], list(ids) if ids else [])


def read_report(text: str) -> EvalReport:
    """Parse the CSV produced by :meth:`EvalReport.to_csv`."""
    ids, pairs, mae, mse = [], [], None, None
    for line in text.strip().splitlines()[1:]:
        parts = line.split(",")
        if parts[0] == "MAE":
            mae = float(parts[1])
        elif parts[0] == "MSE":
            mse = float(parts[1])
        else:
            ids.append(parts[0])
            pairs.append((float(parts[1]), float(parts[2])))
    return EvalReport(mae, mse, pairs, ids)
