"""Adam, the training loop, evaluation and the ablation driver."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, OptimState, save_checkpoint
from .data import DegradeConfig, ImagePair, sample_patches
from .losses import LossConfig, loss_terms
from .network import ModelConfig, enhance, init_params, rlednet_forward
from .params import ParamTree
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "l1", "ssim", "tv", "total")


class TreeMismatchError(ValueError):
    """Gradient tree does not line up with the parameter tree."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, terms: dict[str, float]):
        self.step = step
        self.terms = terms
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 4
    patch_size: int = 64
    eval_interval: int = 0  # 0 disables periodic evaluation
    checkpoint_interval: int = 0
    seed: int = 0
    lr: float = 1e-4
    flip: bool = False
    clip_grad: float = 0.0  # global-norm clip; 0 disables
    loss: LossConfig = field(default_factory=LossConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and patch_size >= 1 required")
        if self.eval_interval < 0 or self.checkpoint_interval < 0 or self.lr <= 0 or self.clip_grad < 0:
            raise ValueError("intervals, lr and clip_grad must be non-negative (lr positive)")


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: ParamTree, grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if list(grads) != list(params):
        missing = set(params) ^ set(grads)
        raise TreeMismatchError(f"gradient tree differs from parameter tree: {sorted(missing)[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TreeMismatchError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


def _grads(params: ParamTree) -> dict[str, np.ndarray]:
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in params.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


# ---------------------------------------------------------------------------
# training


def _batch(dataset: Sequence[ImagePair], tcfg: TrainConfig, step: int, multiple: int) -> tuple[np.ndarray, np.ndarray]:
    # randomness keyed on (seed, global step) so resumed runs see the same batches
    rng = np.random.default_rng([tcfg.seed, step])
    n = len(dataset)
    if tcfg.batch_size <= n:
        idx = rng.permutation(n)[: tcfg.batch_size]
    else:
        idx = rng.integers(0, n, size=tcfg.batch_size)
    lows, normals = [], []
    for i in idx:
        patch = sample_patches(dataset[i], tcfg.patch_size, 1, int(rng.integers(2**31)), tcfg.flip, multiple)[0]
        lows.append(patch.low)
        normals.append(patch.normal)
    return np.stack(lows), np.stack(normals)


def train_step(ckpt: Checkpoint, low: np.ndarray, normal: np.ndarray, tcfg: TrainConfig) -> dict[str, float]:
    params = ckpt.params
    dtype = next(iter(params.values())).dtype
    params.zero_grad()
    pred = rlednet_forward(Tensor(low.astype(dtype)), ckpt.config, params)
    terms = loss_terms(pred, normal.astype(dtype), tcfg.loss)
    values = {k: t.item() for k, t in terms.items()}
    step = ckpt.optim.step + 1
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(step, values)
    terms["total"].backward()
    grads = _grads(params)
    if tcfg.clip_grad:
        _clip(grads, tcfg.clip_grad)
    adam_step(params, grads, ckpt.optim)
    params.zero_grad()
    return {"step": step, **values}


def new_checkpoint(config: ModelConfig, tcfg: TrainConfig, dtype=np.float32) -> Checkpoint:
    return Checkpoint(config=config, params=init_params(config, tcfg.seed, dtype), optim=OptimState(lr=tcfg.lr))


def train(
    config: ModelConfig,
    tcfg: TrainConfig,
    dataset: Sequence[ImagePair],
    resume: Checkpoint | None = None,
    out: str | Path | None = None,
    eval_set: Sequence[ImagePair] | None = None,
    callback: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run ``tcfg.iterations`` optimisation steps (continuing ``resume`` if given).

    Returns the final checkpoint and the per-step loss history. Periodic
    evaluation results are logged and attached to history rows as ``eval``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if tcfg.patch_size % config.multiple:
        raise ValueError(f"patch_size {tcfg.patch_size} must be divisible by {config.multiple}")
    if resume is not None:
        if resume.config != config:
            raise ValueError("resume checkpoint was built for a different ModelConfig")
        ckpt = resume
    else:
        ckpt = new_checkpoint(config, tcfg)
    history: list[dict] = []
    for _ in range(tcfg.iterations):
        step = ckpt.optim.step + 1
        low, normal = _batch(dataset, tcfg, step, config.multiple)
        row = train_step(ckpt, low, normal, tcfg)
        if tcfg.eval_interval and step % tcfg.eval_interval == 0:
            report = evaluate(ckpt, eval_set if eval_set is not None else dataset)
            row["eval"] = report.means
            log.info("step %d eval %s", step, report.means)
        if out is not None and tcfg.checkpoint_interval and step % tcfg.checkpoint_interval == 0:
            save_checkpoint(out, ckpt)
        history.append(row)
        if callback is not None:
            callback(row)
    if out is not None:
        save_checkpoint(out, ckpt)
    return ckpt, history


def history_table(history: Sequence[dict], delimiter: str = ",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for row in history:
        writer.writerow([row["step"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation


def evaluate(ckpt: Checkpoint, dataset: Sequence[ImagePair], degradation: dict | None = None) -> metrics.MetricsReport:
    """Enhance every low image and score it against its target (8-bit quantised)."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    report = metrics.MetricsReport(degradation=dict(degradation or {}))
    for pair in dataset:
        restored = enhance(pair.low, ckpt.config, ckpt.params)
        report.add(pair.id, metrics.image_metrics(restored, pair.normal))
    return report


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = {
    "RLED-Net": {},
    "W/o LSRB": {"enable_lsrb": False},
    "W/o SAB": {"enable_sab": False},
    "W/o CAB": {"enable_cab": False},
}
RANKS = (2, 4, 8, 16, 32)


def layer_widths(config: ModelConfig) -> list[int]:
    """Channel count seen by every CST layer, in execution order."""
    widths = []
    for lvl, w in enumerate(config.widths()):
        widths += [config.layer(w).channels] * config.n_enc
    for lvl in reversed(range(config.levels)):
        w = 2 * config.c if lvl == 0 else config.widths()[lvl]
        widths += [config.layer(w).channels] * config.n_enc
    widths += [config.layer(2 * config.c).channels] * config.n_frb
    return widths


def ablation_configs(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    rows = [(name, base.replace(**changes)) for name, changes in ABLATIONS.items()]
    rows += [(f"rank={r}", base.replace(r=r)) for r in RANKS]
    return rows


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)

    def to_table(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        cols = ["group", "model", "rank", "params", "psnr_db", "ssim", "mae_pct", "cse_substitute_x1e3", "final_loss"]
        writer.writerow(cols)
        for row in self.rows:
            writer.writerow(
                [row["group"], row["model"], row["rank"], row["params"]]
                + [f"{row[k]:.6f}" for k in ("psnr", "ssim", "mae", "cse_substitute", "final_loss")]
            )
        return buf.getvalue()


def ablate(base: ModelConfig, tcfg: TrainConfig, dataset: Sequence[ImagePair], eval_set: Sequence[ImagePair] | None = None) -> AblationReport:
    """Train and evaluate the component ablations and the rank sweep."""
    base_widths = layer_widths(base)
    report = AblationReport()
    for name, cfg in ablation_configs(base):
        if layer_widths(cfg) != base_widths:
            raise AssertionError(f"{name} changes the channel layout")
        log.info("ablation %s", name)
        ckpt, history = train(cfg, tcfg, dataset)
        means = evaluate(ckpt, eval_set if eval_set is not None else dataset).means
        report.rows.append(
            {
                "group": "rank" if name.startswith("rank=") else "component",
                "model": name,
                "rank": cfg.r,
                "params": ckpt.params.count(),
                "final_loss": history[-1]["total"] if history else float("nan"),
                **means,
            }
        )
    return report
