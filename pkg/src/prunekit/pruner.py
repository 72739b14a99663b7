"""Greedy layer-wise channel pruning under the joint loss, plus fine-tuning.

The sweep walks conv layers first to last. For each layer it accumulates
gradients of the joint loss over a handful of batches, scores every output
channel by the squared gradient-times-weight mass of its kernel slice, keeps
the top-K, masks the rest, and refits the surviving slice with plain SGD while
the baseline stays frozen. Afterwards the masked channels are physically
removed and the whole network is optionally fine-tuned.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .losses import (LossBreakdown, LossWeights, classification_loss,
                     correlation_loss, joint_loss, reconstruction_loss)
from .metrics import CompressionStats, evaluate
from .network import ChannelMask, Network, apply_mask, forward, materialize
from .tensor import Tape, Tensor, backward, softmax_cross_entropy


class PruneError(RuntimeError):
    pass


class UntrainedBaselineError(PruneError):
    """The baseline model's metadata says it was never trained."""


class DivergenceError(PruneError):
    """Optimization total loss blew past the configured guard threshold."""


@dataclass(frozen=True)
class PruneConfig:
    rate: float
    weights: LossWeights = LossWeights()
    eta: float = 0.01
    selection_batches: int = 10
    refit_epochs: int = 20
    finetune_epochs: int = 0
    enabled_losses: frozenset = frozenset("rsc")
    seed: int = 0
    batch_size: int = 32
    finetune_eta: float = 0.01
    momentum: float = 0.9
    divergence_factor: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise ValueError(f"pruning rate must be in (0,1), got {self.rate}")
        if self.eta < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.eta}")
        if self.selection_batches < 1:
            raise ValueError("selection_batches must be positive")
        if self.refit_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")


@dataclass
class ChannelSelection:
    layer: int
    sensitivities: np.ndarray
    retained: list[int]
    budget: int


@dataclass
class PruneReport:
    config: dict
    baseline_train_error: float
    baseline_test_error: float
    masked_train_error: float
    masked_test_error: float
    final_train_error: float
    final_test_error: float
    selections: dict[int, ChannelSelection]
    loss_curves: dict[int, list[LossBreakdown]]
    stats: CompressionStats
    finetune_log: list[dict]

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "errors": {
                "baseline": {"train": self.baseline_train_error,
                             "test": self.baseline_test_error},
                "masked": {"train": self.masked_train_error,
                           "test": self.masked_test_error},
                "final": {"train": self.final_train_error,
                          "test": self.final_test_error},
            },
            "layers": {
                str(l): {
                    "budget": sel.budget,
                    "retained": list(sel.retained),
                    "sensitivities": [float(v) for v in sel.sensitivities],
                } for l, sel in self.selections.items()
            },
            "compression": {
                "params_before": self.stats.params_before,
                "params_after": self.stats.params_after,
                "param_ratio": self.stats.param_ratio,
                "flops_before": self.stats.flops_before,
                "flops_after": self.stats.flops_after,
                "flops_ratio": self.stats.flops_ratio,
            },
            "finetune_log": self.finetune_log,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def write_loss_curves(self, out_dir) -> None:
        import os
        for l, curve in self.loss_curves.items():
            path = os.path.join(str(out_dir), f"layer_{l}_losses.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epoch", "l_r", "l_s", "l_c", "total"])
                for epoch, bd in enumerate(curve):
                    writer.writerow([epoch, repr(bd.l_r), repr(bd.l_s),
                                     repr(bd.l_c), repr(bd.total)])


def budget_for(channels: int, rate: float) -> int:
    """Retained-channel budget: at least one channel always survives."""
    return max(1, int(math.floor((1.0 - rate) * channels + 0.5)))


def channel_sensitivity(w: Tensor, grad_w: np.ndarray) -> np.ndarray:
    """Per-output-channel score: sum of (gradient * weight)^2 over the channel's
    entire kernel slice."""
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != w.shape:
        raise ValueError(
            f"channel_sensitivity: gradient shape {grad_w.shape} != weight shape {w.shape}")
    if not np.isfinite(grad_w).all():
        raise ValueError("channel_sensitivity: gradient contains NaN/Inf")
    prod = grad_w * w.data
    return (prod * prod).reshape(w.shape[0], -1).sum(axis=1)


def select_channels(delta: np.ndarray, k: int, layer: int = 0) -> ChannelSelection:
    """Deterministic top-K by sensitivity; ties keep the lower index."""
    if k < 1:
        raise ValueError(f"select_channels: K must be >= 1, got {k}")
    delta = np.asarray(delta, dtype=np.float64)
    order = np.argsort(-delta, kind="stable")
    retained = sorted(int(i) for i in order[:min(k, len(delta))])
    return ChannelSelection(layer=layer, sensitivities=delta, retained=retained,
                            budget=k)


def _layer_joint_loss(net_base: Network, net_pruned: Network, layer: int,
                      cfg: PruneConfig, xb: Tensor, yb: np.ndarray,
                      tape: Optional[Tape]) -> LossBreakdown:
    f_base = forward(net_base, xb, upto_layer=layer)
    logits, feats = forward(net_pruned, xb, tape=tape, capture=(layer,))
    f_pruned = feats[layer]
    l_r = reconstruction_loss(f_base, f_pruned, tape)
    l_s = correlation_loss(f_base, f_pruned, tape)
    l_c = softmax_cross_entropy(logits, yb, tape)
    return joint_loss(l_r, l_s, l_c, cfg.weights, cfg.enabled_losses, tape)


def _zero_grads(net: Network) -> None:
    for _, _, t in net.parameters():
        t.zero_grad()


def score_layer(net_base: Network, net_pruned: Network, layer: int, cfg: PruneConfig,
                dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Joint-loss gradients accumulated over selection batches, averaged, then
    turned into per-channel sensitivities."""
    w = net_pruned.params[layer]["w"]
    _zero_grads(net_pruned)
    for _ in range(cfg.selection_batches):
        xb, yb = dataset.sample_batch("train", cfg.batch_size, rng)
        tape = Tape()
        bd = _layer_joint_loss(net_base, net_pruned, layer, cfg, xb, yb, tape)
        backward(bd.total_tensor, tape)
    grad = (w.grad if w.grad is not None else np.zeros_like(w.data)) / cfg.selection_batches
    delta = channel_sensitivity(w, grad)
    _zero_grads(net_pruned)
    return delta


def refit_layer(net_base: Network, net_pruned: Network, layer: int, cfg: PruneConfig,
                dataset: Dataset, rng: np.random.Generator) -> list[LossBreakdown]:
    """Plain SGD on the retained slice of one conv layer; the baseline and every
    other layer stay frozen. Returns the per-epoch loss curve."""
    keep = net_pruned.masks.get(layer)
    if keep is None:
        raise PruneError(f"refit_layer: layer {layer} has no mask applied")
    kidx = np.flatnonzero(keep)
    w = net_pruned.params[layer]["w"]
    b = net_pruned.params[layer]["b"]

    history: list[LossBreakdown] = []
    initial_total: Optional[float] = None
    for _ in range(cfg.refit_epochs):
        sums = np.zeros(4)
        batches = 0
        for xb, yb in dataset.iter_batches("train", cfg.batch_size, rng=rng):
            tape = Tape()
            bd = _layer_joint_loss(net_base, net_pruned, layer, cfg, xb, yb, tape)
            backward(bd.total_tensor, tape)
            if w.grad is not None:
                w.data[kidx] -= cfg.eta * w.grad[kidx]
            if b.grad is not None:
                b.data[kidx] -= cfg.eta * b.grad[kidx]
            _zero_grads(net_pruned)
            sums += (bd.l_r, bd.l_s, bd.l_c, bd.total)
            batches += 1
        epoch_bd = LossBreakdown(*(sums / batches))
        history.append(epoch_bd)
        if initial_total is None:
            initial_total = epoch_bd.total
        elif epoch_bd.total > cfg.divergence_factor * max(initial_total, 1e-12):
            raise DivergenceError(
                f"refit of layer {layer} diverged: total {epoch_bd.total:.4g} "
                f"exceeds {cfg.divergence_factor}x initial {initial_total:.4g}")
    return history


def prune_model(net_base: Network, cfg: PruneConfig,
                dataset: Dataset) -> tuple[Network, PruneReport]:
    """Full sweep: per-layer score/select/mask/refit, then materialize and
    optionally fine-tune."""
    if not net_base.meta.get("trained"):
        raise UntrainedBaselineError("baseline model metadata says it is untrained")
    convs = net_base.conv_layers()
    if not convs:
        raise PruneError("network has no prunable conv layers")

    rng = np.random.default_rng(cfg.seed)
    pruned = net_base.copy(deep=True)
    selections: dict[int, ChannelSelection] = {}
    curves: dict[int, list[LossBreakdown]] = {}

    for layer in convs:
        delta = score_layer(net_base, pruned, layer, cfg, dataset, rng)
        channels = net_base.specs[layer].out_channels
        sel = select_channels(delta, budget_for(channels, cfg.rate), layer=layer)
        keep = np.zeros(channels, dtype=bool)
        keep[sel.retained] = True
        pruned = apply_mask(pruned, ChannelMask(layer, keep))
        selections[layer] = sel
        curves[layer] = (refit_layer(net_base, pruned, layer, cfg, dataset, rng)
                         if cfg.refit_epochs else [])

    masked_train = evaluate(pruned, dataset, "train")
    masked_test = evaluate(pruned, dataset, "test")

    final = materialize(pruned, [ChannelMask(l, np.isin(np.arange(net_base.specs[l].out_channels),
                                                        selections[l].retained))
                                 for l in convs])
    finetune_log: list[dict] = []
    if cfg.finetune_epochs:
        finetune_log = fine_tune(final, dataset, cfg.finetune_epochs,
                                 eta_schedule=cfg.finetune_eta, batch_size=cfg.batch_size,
                                 momentum=cfg.momentum, seed=cfg.seed,
                                 divergence_factor=cfg.divergence_factor)
    final.meta["trained"] = True

    report = PruneReport(
        config={
            "rate": cfg.rate, "alpha": cfg.weights.alpha, "beta": cfg.weights.beta,
            "eta": cfg.eta, "selection_batches": cfg.selection_batches,
            "refit_epochs": cfg.refit_epochs, "finetune_epochs": cfg.finetune_epochs,
            "losses": "".join(k for k in "rsc" if k in cfg.enabled_losses),
            "seed": cfg.seed, "batch_size": cfg.batch_size,
        },
        baseline_train_error=evaluate(net_base, dataset, "train"),
        baseline_test_error=evaluate(net_base, dataset, "test"),
        masked_train_error=masked_train,
        masked_test_error=masked_test,
        final_train_error=evaluate(final, dataset, "train"),
        final_test_error=evaluate(final, dataset, "test"),
        selections=selections,
        loss_curves=curves,
        stats=CompressionStats.compare(net_base, final),
        finetune_log=finetune_log,
    )
    return final, report


EtaSchedule = Union[float, Sequence[float], Callable[[int], float], None]


def _eta_at(schedule: EtaSchedule, epoch: int, default: float = 0.01) -> float:
    if schedule is None:
        return default
    if callable(schedule):
        return float(schedule(epoch))
    if isinstance(schedule, (int, float)):
        return float(schedule)
    return float(schedule[min(epoch, len(schedule) - 1)])


def fine_tune(net: Network, dataset: Dataset, epochs: int,
              eta_schedule: EtaSchedule = None, batch_size: int = 32,
              momentum: float = 0.9, seed: int = 0,
              divergence_factor: float = 10.0) -> list[dict]:
    """SGD-with-momentum training of every parameter on the cross-entropy loss.
    Returns a per-epoch log of mean loss and train/test error."""
    rng = np.random.default_rng(seed)
    velocity = {(idx, name): np.zeros_like(t.data) for idx, name, t in net.parameters()}
    log: list[dict] = []
    initial_loss: Optional[float] = None
    for epoch in range(epochs):
        eta = _eta_at(eta_schedule, epoch)
        total, batches = 0.0, 0
        for xb, yb in dataset.iter_batches("train", batch_size, rng=rng):
            tape = Tape()
            loss = softmax_cross_entropy(forward(net, xb, tape=tape), yb, tape)
            backward(loss, tape)
            for idx, name, t in net.parameters():
                v = velocity[(idx, name)]
                g = t.grad if t.grad is not None else 0.0
                v *= momentum
                v -= eta * g
                t.data += v
                t.zero_grad()
            total += loss.item()
            batches += 1
        mean_loss = total / batches
        if initial_loss is None:
            initial_loss = mean_loss
        elif mean_loss > divergence_factor * max(initial_loss, 1e-12):
            raise DivergenceError(
                f"fine-tuning diverged at epoch {epoch}: loss {mean_loss:.4g} "
                f"exceeds {divergence_factor}x initial {initial_loss:.4g}")
        log.append({
            "epoch": epoch,
            "eta": eta,
            "loss": mean_loss,
            "train_error": evaluate(net, dataset, "train"),
            "test_error": evaluate(net, dataset, "test"),
        })
    return log


def train_baseline(net: Network, dataset: Dataset, epochs: int, eta: float = 0.01,
                   batch_size: int = 32, momentum: float = 0.9,
                   seed: int = 0) -> list[dict]:
    """Train a fresh network as the pruning baseline and flag it as trained."""
    log = fine_tune(net, dataset, epochs, eta_schedule=eta, batch_size=batch_size,
                    momentum=momentum, seed=seed)
    net.meta["trained"] = True
    return log
