"""Parameter/FLOPs accounting, evaluation, and the loss-combination ablation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import DataError, Dataset
from .network import Network, forward
from .tensor import Tensor

ABLATION_COMBOS: tuple[frozenset, ...] = (
    frozenset("r"), frozenset("s"), frozenset("c"),
    frozenset("rs"), frozenset("rc"), frozenset("sc"), frozenset("rsc"),
)


@dataclass(frozen=True)
class CompressionStats:
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int

    @property
    def param_ratio(self) -> float:
        return self.params_before / self.params_after

    @property
    def flops_ratio(self) -> float:
        return self.flops_before / self.flops_after

    @classmethod
    def compare(cls, before: Network, after: Network) -> "CompressionStats":
        return cls(count_params(before), count_params(after),
                   count_flops(before), count_flops(after))


def count_params(net: Network) -> int:
    """Total weight and bias elements across all layers."""
    return sum(t.size for _, _, t in net.parameters())


def count_flops(net: Network, input_shape: Optional[tuple] = None) -> int:
    """Multiply-accumulate count with multiply and add counted separately:
    conv contributes 2*M*C*kh*kw*H'*Z', dense 2*in*out. Pooling, activations,
    and biases are excluded."""
    shape = tuple(input_shape) if input_shape is not None else net.input_shape
    probe = net if shape == net.input_shape else Network(
        net.specs, shape, net.num_classes, params=net.params, meta=dict(net.meta))
    shapes = probe.layer_shapes()
    total = 0
    for idx, spec in enumerate(net.specs):
        if spec.kind == "conv":
            _, ho, wo = shapes[idx]
            total += 2 * spec.out_channels * spec.in_channels * spec.kernel ** 2 * ho * wo
        elif spec.kind == "dense":
            total += 2 * spec.in_features * spec.out_features
    return total


def evaluate(net: Network, dataset: Dataset, split: str = "test",
             batch_size: int = 256) -> float:
    """Top-1 error fraction of the network on one labeled split."""
    images, labels = dataset.normalized(split)
    wrong = 0
    for start in range(0, len(images), batch_size):
        xb = Tensor(images[start:start + batch_size])
        logits = forward(net, xb)
        wrong += int((logits.data.argmax(axis=1) != labels[start:start + batch_size]).sum())
    return wrong / len(images)


def loss_combo_label(combo: frozenset) -> str:
    return "+".join(k for k in "rsc" if k in combo)


def run_ablation(net_base: Network, dataset: Dataset, cfg,
                 combos: Sequence[frozenset] = ABLATION_COMBOS) -> list[dict]:
    """Prune the same baseline once per loss combination (same seed, no
    fine-tuning) and report masked-model train/test error per row."""
    from dataclasses import replace

    from .pruner import prune_model

    rows = []
    for combo in combos:
        run_cfg = replace(cfg, enabled_losses=frozenset(combo), finetune_epochs=0)
        _, report = prune_model(net_base, run_cfg, dataset)
        rows.append({
            "losses": loss_combo_label(combo),
            "train_error": report.masked_train_error,
            "test_error": report.masked_test_error,
        })
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text rendering of a list of dict rows."""
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(row[c]) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
