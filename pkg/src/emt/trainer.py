"""Training loop, evaluation, and checkpoint resume."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ConfigMismatchError, load_checkpoint, save_checkpoint
from .features import FeatureData, load_feature_data
from .heads import MetricsReport, ccc_loss, cross_entropy_ls, metrics_classification, metrics_regression
from .model import EmT, EmTConfig, build_model
from .presets import DEFAULT_ALPHA, get_preset

log = logging.getLogger(__name__)

_TASK_DEFAULTS = {
    "classification": dict(optimizer="adamw", lr=3e-4, weight_decay=1e-2, batch_size=64,
                           epochs=30, variant="B"),
    "regression": dict(optimizer="adam", lr=5e-5, weight_decay=1e-3, batch_size=2,
                       epochs=30, variant="S"),
}
_STREAMS = {"init": 0, "dropout": 1, "shuffle": 2}


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimization settings.  ``None`` fields take the per-task defaults."""

    task: str = "classification"
    variant: str | None = None
    optimizer: str | None = None
    lr: float | None = None
    weight_decay: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    smoothing: float = 0.1
    p_base: float = 0.25
    alpha: float | None = None
    k_order: int | None = None
    n_anchor: int = 3
    rnn: str = "gru"
    n_class: int = 2
    seed: int = 0
    window: int = 96
    hop: int = 32
    squared_ccc: bool = True
    preset: str | None = None
    no_rmpg: bool = False
    single_gcn: bool = False
    no_tct: bool = False
    no_sta: bool = False

    def __post_init__(self):
        if self.task not in _TASK_DEFAULTS:
            raise ValueError(f"unknown task {self.task!r}")
        for key, value in _TASK_DEFAULTS[self.task].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        preset = get_preset(self.preset)
        if self.alpha is None:
            self.alpha = preset.get("alpha", DEFAULT_ALPHA)
        if self.k_order is None:
            self.k_order = preset.get("k_order")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def model_config(self, n_nodes: int, n_feat: int = 7) -> EmTConfig:
        return EmTConfig(
            n_nodes=n_nodes, task=self.task, variant=self.variant, n_feat=n_feat,
            k_order=self.k_order, n_anchor=self.n_anchor, alpha=self.alpha, p_base=self.p_base,
            rnn=self.rnn, n_class=self.n_class, no_rmpg=self.no_rmpg,
            single_gcn=self.single_gcn, no_tct=self.no_tct, no_sta=self.no_sta,
        )

    def digest(self, model_cfg: EmTConfig) -> str:
        blob = json.dumps({"train": self.to_dict(), "model": model_cfg.to_dict()},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def stream_seed(seed: int, name: str) -> int:
    """Independent seed for a named random stream derived from the master seed."""
    return int(np.random.SeedSequence([seed, _STREAMS[name]]).generate_state(1)[0])


def make_optimizer(model: EmT, cfg: TrainConfig) -> torch.optim.Optimizer:
    kind = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    return kind(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8,
                weight_decay=cfg.weight_decay)


def optimizer_step(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> None:
    """Apply one update after checking every gradient is finite."""
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
    optimizer.step()


def task_loss(model: EmT, out: torch.Tensor, target: torch.Tensor, cfg: TrainConfig):
    if cfg.task == "classification":
        return cross_entropy_ls(out, target, cfg.smoothing)
    return ccc_loss(out, target, squared_mean=cfg.squared_ccc)


@torch.no_grad()
def predict(model: EmT, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = [model(torch.as_tensor(x[i:i + batch_size], dtype=dtype)).numpy()
            for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return np.concatenate(outs)


def evaluate_model(model: EmT, x: np.ndarray, y: np.ndarray) -> MetricsReport:
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty split")
    out = predict(model, x)
    if model.cfg.task == "classification":
        return metrics_classification(out, y)
    return metrics_regression(out.ravel(), np.asarray(y).ravel())


# --------------------------------------------------------------------------
# checkpoint state


def _tensor_state(model: EmT, optimizer, best_state: dict | None) -> dict:
    tensors = {f"param/{n}": p.detach().clone() for n, p in model.named_parameters()}
    names = [n for n, _ in model.named_parameters()]
    opt_state = optimizer.state_dict()["state"]
    for i, pname in enumerate(names):
        for key, value in opt_state.get(i, {}).items():
            tensors[f"optim/{pname}/{key}"] = torch.as_tensor(value).detach().clone()
    if best_state is not None:
        for n, p in best_state.items():
            tensors[f"best/{n}"] = p
    tensors["rng/torch"] = torch.get_rng_state()
    return tensors


def _restore(model: EmT, optimizer, tensors: dict) -> dict | None:
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(tensors[f"param/{n}"])
    names = [n for n, _ in model.named_parameters()]
    state_dict = optimizer.state_dict()
    state = {}
    for i, pname in enumerate(names):
        prefix = f"optim/{pname}/"
        entry = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        if entry:
            state[i] = entry
    state_dict["state"] = state
    optimizer.load_state_dict(state_dict)
    torch.set_rng_state(tensors["rng/torch"])
    best = {k[5:]: v for k, v in tensors.items() if k.startswith("best/")}
    return best or None


def load_model(path: str | Path, which: str = "param") -> tuple[EmT, dict]:
    """Rebuild a model from a checkpoint; ``which='best'`` picks the best-validation weights."""
    tensors, meta = load_checkpoint(path)
    cfg = EmTConfig.from_dict(meta["model_config"])
    model = build_model(cfg)
    prefix = which if any(k.startswith(f"{which}/") for k in tensors) else "param"
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(tensors[f"{prefix}/{n}"])
    model.eval()
    return model, meta


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: EmT
    history: list[dict]
    test: MetricsReport | None
    train_report: MetricsReport | None = None
    checkpoint: Path | None = None
    checkpoint_hash: str | None = None
    extra: dict = field(default_factory=dict)


def _write_history(history: list[dict], path: Path) -> None:
    keys = sorted({k for row in history for k in row})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float)
                                 else row[k]) for k in keys})


def train(cfg: TrainConfig, data: FeatureData, out_dir: str | Path | None = None,
          resume: str | Path | None = None, stop_after: int | None = None,
          force: bool = False) -> TrainResult:
    """Train an EmT model on ``data``.

    Classification keeps the weights with the best validation accuracy for
    the test report; regression reports the final epoch.  ``stop_after``
    ends the run early (after that many completed epochs) with a resumable
    checkpoint.  Resuming with a different configuration raises
    ``ConfigMismatchError`` unless ``force`` is set.
    """
    if data.task != cfg.task:
        raise ValueError(f"data task {data.task!r} does not match config task {cfg.task!r}")
    x_train, y_train = data.get("train")
    model_cfg = cfg.model_config(data.n_nodes, data.n_feat)
    digest = cfg.digest(model_cfg)
    model = build_model(model_cfg, seed=stream_seed(cfg.seed, "init"))
    optimizer = make_optimizer(model, cfg)
    shuffle_rng = np.random.default_rng(stream_seed(cfg.seed, "shuffle"))
    torch.manual_seed(stream_seed(cfg.seed, "dropout"))
    history: list[dict] = []
    start_epoch, best_val, best_state = 0, -math.inf, None

    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if meta["config_hash"] != digest and not force:
            raise ConfigMismatchError(f"{resume}: checkpoint config differs from current config")
        best_state = _restore(model, optimizer, tensors)
        shuffle_rng.bit_generator.state = meta["shuffle_state"]
        start_epoch, best_val, history = meta["epoch"], meta["best_val"], meta["history"]
        if best_val is None:
            best_val = -math.inf

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    has_val = "val" in data.splits and len(data.splits["val"][0]) > 0
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    ckpt_path = ckpt_hash = None
    dtype = next(model.parameters()).dtype
    n = len(x_train)

    for epoch in range(start_epoch, last_epoch):
        model.train()
        order = shuffle_rng.permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            if cfg.task == "classification":
                target = torch.as_tensor(y_train[idx], dtype=torch.long)
            else:
                target = torch.as_tensor(y_train[idx], dtype=dtype)
            out = model(torch.as_tensor(x_train[idx], dtype=dtype))
            loss = task_loss(model, out, target, cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            optimizer.zero_grad()
            loss.backward()
            optimizer_step(model, optimizer)
            losses.append(float(loss.detach()))
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if has_val:
            val = evaluate_model(model, *data.splits["val"])
            if cfg.task == "classification":
                row.update(val_acc=val.acc, val_f1=val.f1)
                if val.acc > best_val:
                    best_val = val.acc
                    best_state = {k: p.detach().clone() for k, p in model.named_parameters()}
            else:
                row.update(val_rmse=val.rmse, val_pcc=val.pcc, val_ccc=val.ccc)
        history.append(row)
        log.info("epoch %d/%d %s", epoch + 1, cfg.epochs,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))
        if out_dir is not None:
            meta = {
                "format": "emt-train", "epoch": epoch + 1, "config": cfg.to_dict(),
                "model_config": model_cfg.to_dict(), "config_hash": digest,
                "shuffle_state": shuffle_rng.bit_generator.state,
                "best_val": None if best_val == -math.inf else best_val,
                "history": history, "data": data.meta,
            }
            ckpt_path = out_dir / "last.ckpt"
            ckpt_hash = save_checkpoint(ckpt_path, _tensor_state(model, optimizer, best_state), meta)

    result = TrainResult(model=model, history=history, test=None, checkpoint=ckpt_path,
                         checkpoint_hash=ckpt_hash)
    if last_epoch < cfg.epochs:
        return result

    final = model
    if cfg.task == "classification" and best_state is not None:
        final = copy.deepcopy(model)
        with torch.no_grad():
            for k, p in final.named_parameters():
                p.copy_(best_state[k])
    final.eval()
    result.model = final
    result.train_report = evaluate_model(final, x_train, y_train)
    if "test" in data.splits and len(data.splits["test"][0]):
        result.test = evaluate_model(final, *data.splits["test"])
        result.test.loss_history = [r["train_loss"] for r in history]
        if (cfg.task == "classification"
                and result.test.acc - result.train_report.acc > 0.1):
            log.warning("test ACC %.3f exceeds train ACC %.3f by more than 0.1",
                        result.test.acc, result.train_report.acc)
    if out_dir is not None:
        _write_history(history, out_dir / "loss_curve.csv")
        if result.test is not None:
            (out_dir / "metrics.json").write_text(result.test.to_json() + "\n", encoding="utf-8")
    return result


def evaluate(checkpoint: str | Path, split: str = "test", data: FeatureData | None = None,
             which: str = "best", dump_hidden: str | Path | None = None,
             dump_limit: int = 16) -> MetricsReport:
    """Evaluate a saved model on one split of its (or the given) feature data.

    ``which='best'`` uses the best-validation weights when the checkpoint
    carries them, else the final weights.
    """
    model, meta = load_model(checkpoint, which)
    if data is None:
        info = meta.get("data", {})
        if "features_dir" not in info:
            raise ValueError("checkpoint does not record its feature directory; pass data")
        data = load_feature_data(info["features_dir"], info.get("window", 96), info.get("hop", 32))
    x, y = data.get(split)
    report = evaluate_model(model, x, y)
    report.extra = {"split": split, "checkpoint_epoch": meta.get("epoch")}
    if dump_hidden is not None:
        dump_hidden_states(model, x[:dump_limit], dump_hidden, prefix=split)
    return report


@torch.no_grad()
def dump_hidden_states(model: EmT, x: np.ndarray, out_dir: str | Path, prefix: str = "") -> list[Path]:
    """Write token sequences before (seq x d_g) and after (seq x width) the blocks as CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    dtype = next(model.parameters()).dtype
    tokens, z = model.encode(torch.as_tensor(x, dtype=dtype))
    written = []
    for i in range(len(x)):
        for tag, arr in (("tokens", tokens[i]), ("tct", z[i])):
            path = out_dir / f"{prefix}{'_' if prefix else ''}{i:04d}_{tag}.csv"
            np.savetxt(path, arr.numpy(), delimiter=",", fmt="%.8g")
            written.append(path)
    return written


def export_adjacency(checkpoint: str | Path, out_dir: str | Path,
                     channel_names: list[str] | None = None, which: str = "best") -> list[Path]:
    """One CSV per graph branch with the effective adjacency, channel names as headers."""
    model, _ = load_model(checkpoint, which)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = model.cfg.n_nodes
    names = channel_names or [f"ch{i:02d}" for i in range(c)]
    if len(names) != c:
        raise ValueError(f"{len(names)} channel names for {c} nodes")
    paths = []
    for i, adj in enumerate(model.rmpg.adjacencies()):
        path = out_dir / f"adjacency_branch{i}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + names)
            for name, row in zip(names, adj.numpy()):
                writer.writerow([name] + [f"{v:.8g}" for v in row])
        paths.append(path)
    return paths
