"""Output heads, training losses, and evaluation metrics."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn


class DegenerateInputWarning(UserWarning):
    pass


class ClasHead(nn.Module):
    """Mean over time, then an affine map to class logits.

    Tokens are sorted along time before averaging, which makes the pooled
    value bit-identical under any reordering of the sequence.
    """

    def __init__(self, d_in: int = 32, n_class: int = 2):
        super().__init__()
        if n_class < 2:
            raise ValueError("n_class must be >= 2")
        self.fc = nn.Linear(d_in, n_class)

    def forward(self, s):
        return self.fc(s.sort(dim=-2).values.mean(dim=-2))


class RegrHead(nn.Module):
    """Per-step affine map to a scalar; (..., seq, d_in) -> (..., seq)."""

    def __init__(self, d_in: int = 64):
        super().__init__()
        self.fc = nn.Linear(d_in, 1)

    def forward(self, s):
        return self.fc(s).squeeze(-1)


def cross_entropy_ls(logits: torch.Tensor, target: torch.Tensor,
                     smoothing: float = 0.1) -> torch.Tensor:
    """Batch-mean cross-entropy against a smoothed one-hot target.

    The true class gets ``1 - smoothing``; the rest share ``smoothing``
    equally.  This differs from torch's built-in smoothing, which also puts
    mass ``smoothing / n_class`` back on the true class.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    logits = torch.atleast_2d(logits)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    n_class = logits.shape[-1]
    if target.numel() != logits.shape[0]:
        raise ValueError("one target per row of logits required")
    if torch.any((target < 0) | (target >= n_class)):
        raise ValueError(f"class id outside [0, {n_class})")
    q = torch.full_like(logits, smoothing / (n_class - 1))
    q.scatter_(-1, target[:, None], 1.0 - smoothing)
    return -(q * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def ccc_loss(pred: torch.Tensor, target: torch.Tensor, squared_mean: bool = True) -> torch.Tensor:
    """``1 - CCC`` over all elements, with population statistics.

    ``squared_mean=False`` uses the unsquared mean difference in the
    denominator instead of the usual squared term.  When both inputs are
    constant the CCC is taken as 0 and a warning is issued.
    """
    pred, target = pred.reshape(-1), target.reshape(-1).to(pred.dtype)
    if pred.numel() < 2 or pred.numel() != target.numel():
        raise ValueError("need two equal-length vectors of length >= 2")
    mp, mt = pred.mean(), target.mean()
    dp, dt = pred - mp, target - mt
    vp, vt = (dp * dp).mean(), (dt * dt).mean()
    if vp.item() == 0.0 and vt.item() == 0.0:
        warnings.warn("CCC of two constant vectors; defined as 0", DegenerateInputWarning,
                      stacklevel=2)
        return pred.sum() * 0.0 + 1.0
    shift = (mp - mt) ** 2 if squared_mean else (mp - mt)
    return 1.0 - 2.0 * (dp * dt).mean() / (vp + vt + shift)


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    task: str
    n: int
    acc: float | None = None
    f1: float | None = None
    tp: int | None = None
    tn: int | None = None
    fp: int | None = None
    fn: int | None = None
    rmse: float | None = None
    pcc: float | None = None
    ccc: float | None = None
    flags: list[str] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        keys = (("acc", "f1", "tp", "tn", "fp", "fn") if self.task == "classification"
                else ("rmse", "pcc", "ccc"))
        d = asdict(self)
        return {k: v for k, v in d.items()
                if k in keys or k in ("task", "n", "flags", "loss_history", "extra")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion(pred: np.ndarray, labels: np.ndarray, positive: int = 1) -> tuple[int, int, int, int]:
    pred, labels = np.asarray(pred), np.asarray(labels)
    tp = int(np.sum((pred == positive) & (labels == positive)))
    tn = int(np.sum((pred != positive) & (labels != positive)))
    fp = int(np.sum((pred == positive) & (labels != positive)))
    fn = int(np.sum((pred != positive) & (labels == positive)))
    return tp, tn, fp, fn


def acc_from_counts(tp, tn, fp, fn) -> float:
    return (tp + tn) / (tp + fp + tn + fn)


def f1_from_counts(tp, fp, fn) -> float:
    denom = tp + 0.5 * (fp + fn)
    return tp / denom if denom > 0 else 0.0


def metrics_classification(preds, labels) -> MetricsReport:
    """ACC and F1 with class 1 as positive.

    ``preds`` may be class ids or a ``(n, n_class)`` score array; scores are
    argmaxed with ties going to the lower class index.
    """
    preds, labels = np.asarray(preds), np.asarray(labels).astype(int).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    preds = preds.astype(int).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    tp, tn, fp, fn = confusion(preds, labels)
    return MetricsReport(task="classification", n=int(labels.size),
                         acc=acc_from_counts(tp, tn, fp, fn), f1=f1_from_counts(tp, fp, fn),
                         tp=tp, tn=tn, fp=fp, fn=fn)


def pcc(pred, y) -> float:
    pred, y = np.asarray(pred, np.float64).ravel(), np.asarray(y, np.float64).ravel()
    dp, dy = pred - pred.mean(), y - y.mean()
    denom = np.sqrt((dp**2).sum()) * np.sqrt((dy**2).sum())
    return float((dp * dy).sum() / denom) if denom > 0 else 0.0


def ccc(pred, y, squared_mean: bool = True) -> float:
    pred, y = np.asarray(pred, np.float64).ravel(), np.asarray(y, np.float64).ravel()
    mp, my = pred.mean(), y.mean()
    cov = ((pred - mp) * (y - my)).mean()
    shift = (mp - my) ** 2 if squared_mean else (mp - my)
    denom = pred.var() + y.var() + shift
    return float(2 * cov / denom) if denom != 0 else 0.0


def rmse(pred, y) -> float:
    pred, y = np.asarray(pred, np.float64).ravel(), np.asarray(y, np.float64).ravel()
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def metrics_regression(pred, y) -> MetricsReport:
    pred, y = np.asarray(pred, np.float64).ravel(), np.asarray(y, np.float64).ravel()
    if pred.size != y.size or pred.size < 2:
        raise ValueError("need equal-length vectors of length >= 2")
    flags = []
    if pred.std() == 0 or y.std() == 0:
        flags.append("pcc_undefined_constant_input")
    return MetricsReport(task="regression", n=int(y.size), rmse=rmse(pred, y),
                         pcc=pcc(pred, y), ccc=ccc(pred, y), flags=flags)
