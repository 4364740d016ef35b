"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .heads import ccc_loss, cross_entropy_ls
from .model import EmTConfig, build_model

# Gradients below this are judged on absolute error (threshold * ABS_FLOOR); central
# differences of a float64 loss carry ~1e-11 roundoff, which swamps smaller values.
ABS_FLOOR = 1e-6
# A probe that flips a ReLU is retried with the step divided by this, at most MAX_SHRINK times.
SHRINK = 10.0
MAX_SHRINK = 5


@dataclass
class TensorCheck:
    name: str
    numel: int
    n_checked: int
    max_rel_err: float
    max_abs_grad: float
    passed: bool
    n_kinks: int = 0
    n_unresolved: int = 0


@dataclass
class GradReport:
    checks: list[TensorCheck]
    threshold: float
    seed: int
    eps: float
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def failures(self) -> list[TensorCheck]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passed=self.passed, max_rel_err=self.max_rel_err)
        return d


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), ABS_FLOOR)


@contextmanager
def _recording_relu(store: list):
    orig = F.relu

    def relu(x, inplace=False):
        store.append((x > 0).reshape(-1))
        return orig(x, inplace=inplace)

    F.relu = relu
    try:
        yield
    finally:
        F.relu = orig


def _relu_pattern(loss_fn) -> tuple[float, torch.Tensor]:
    store: list = []
    with _recording_relu(store):
        value = loss_fn().item()
    return value, torch.cat(store) if store else torch.zeros(0, dtype=torch.bool)


def check_gradients(loss_fn: Callable[[], torch.Tensor],
                    params: dict[str, torch.Tensor], seed: int = 0, n_coords: int = 32,
                    eps: float = 1e-5, threshold: float = 1e-4,
                    corrupt: Callable[[str, torch.Tensor], torch.Tensor] | None = None) -> GradReport:
    """Compare autograd against central differences on sampled coordinates.

    ``loss_fn`` must recompute the loss from the current parameter values.
    Up to ``n_coords`` coordinates per tensor are perturbed (all of them
    for smaller tensors).  ``corrupt`` can tamper with the analytic
    gradient, which is how the harness itself is tested.

    ReLU activation patterns are recorded at every evaluation.  A probe
    that flips any of them has stepped across a non-differentiable point,
    so the step is shrunk until both probes stay in the smooth region
    around the evaluation point.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    checks = []
    for name, p in params.items():
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        if corrupt is not None:
            grad = corrupt(name, grad)
        grad = grad.detach().reshape(-1).numpy()
        numel = p.numel()
        coords = (np.arange(numel) if numel <= n_coords
                  else np.sort(rng.choice(numel, size=n_coords, replace=False)))
        flat = p.data.view(-1)
        numeric = np.empty(len(coords))
        n_kinks = n_unresolved = 0
        with torch.no_grad():
            ref = _relu_pattern(loss_fn)[1]
            for j, i in enumerate(coords):
                orig = flat[i].item()
                step = eps
                for attempt in range(MAX_SHRINK + 1):
                    flat[i] = orig + step
                    up, m_up = _relu_pattern(loss_fn)
                    flat[i] = orig - step
                    down, m_down = _relu_pattern(loss_fn)
                    flat[i] = orig
                    if torch.equal(m_up, ref) and torch.equal(m_down, ref):
                        break
                    if attempt == 0:
                        n_kinks += 1
                    if attempt == MAX_SHRINK:
                        n_unresolved += 1
                    else:
                        step /= SHRINK
                numeric[j] = (up - down) / (2 * step)
        analytic = grad[coords]
        err = relative_error(analytic, numeric)
        worst = float(err.max()) if len(err) else 0.0
        checks.append(TensorCheck(name=name, numel=numel, n_checked=len(coords),
                                  max_rel_err=worst,
                                  max_abs_grad=float(np.abs(analytic).max(initial=0.0)),
                                  passed=worst < threshold, n_kinks=n_kinks,
                                  n_unresolved=n_unresolved))
    return GradReport(checks=checks, threshold=threshold, seed=seed, eps=eps)


def grad_check(model_cfg: EmTConfig, seed: int = 0, batch: int = 2, seq: int = 6,
               n_coords: int = 32, eps: float = 1e-5, threshold: float = 1e-4,
               corrupt=None) -> GradReport:
    """Finite-difference check of every learnable tensor of a fresh float64 model.

    The model runs in eval mode so dropout does not make the loss stochastic.
    """
    model = build_model(model_cfg, seed=seed, dtype=torch.float64).eval()
    gen = torch.Generator().manual_seed(seed)
    x = 0.3 * torch.rand(batch, seq, model_cfg.n_nodes, model_cfg.n_feat,
                         generator=gen, dtype=torch.float64)
    if model_cfg.task == "classification":
        target = torch.randint(0, model_cfg.n_class, (batch,), generator=gen)

        def loss_fn():
            return cross_entropy_ls(model(x), target, 0.1)
    else:
        target = torch.rand(batch, seq, generator=gen, dtype=torch.float64)

        def loss_fn():
            return ccc_loss(model(x), target)

    params = dict(model.named_parameters())
    report = check_gradients(loss_fn, params, seed, n_coords, eps, threshold, corrupt)
    report.extra = {"model_config": model_cfg.to_dict(), "batch": batch, "seq": seq}
    return report
