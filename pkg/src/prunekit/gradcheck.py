"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def suite_cases() -> dict:
    """Named gradient-check cases covering every differentiable operation.

    Each value is ``builder(rng) -> (build_loss, params)`` suitable for
    ``check_gradients``. Used by the test suite and the ``check-grad`` CLI.
    """
    from . import tensor as T
    from .losses import (LossWeights, correlation_loss, joint_loss,
                         reconstruction_loss)

    def _scalarize(x, tape):
        # squared sum keeps the reduction's own gradient nontrivial
        return T.sum_all(T.mul(x, x, tape), tape)

    def conv_case(stride, pad, size=6):
        def build(rng):
            x = Tensor(rng.standard_normal((2, 3, size, size)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
            b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
            def loss(tape):
                return _scalarize(T.conv2d(x, w, stride=stride, pad=pad, bias=b, tape=tape), tape)
            return loss, [x, w, b]
        return build

    def relu_case(rng):
        # keep values away from the kink so central differences stay valid
        vals = rng.standard_normal((3, 7))
        x = Tensor(vals + 0.2 * np.sign(vals), requires_grad=True)
        return (lambda tape: _scalarize(T.relu(x, tape), tape)), [x]

    def pool_case(rng):
        # spread values so the argmax is stable under the FD perturbation
        x = Tensor(rng.standard_normal((2, 2, 6, 6)) * 3.0, requires_grad=True)
        return (lambda tape: _scalarize(T.max_pool2d(x, 2, 2, tape), tape)), [x]

    def dense_case(rng):
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((6, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        return (lambda tape: _scalarize(T.dense(x, w, b, tape), tape)), [x, w, b]

    def flatten_case(rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        return (lambda tape: _scalarize(T.flatten(x, tape), tape)), [x]

    def softmax_case(rng):
        logits = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        labels = rng.integers(0, 4, size=5)
        return (lambda tape: T.softmax_cross_entropy(logits, labels, tape)), [logits]

    def gram_feature_case(rng):
        f = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        return (lambda tape: _scalarize(T.gram_feature(f, tape), tape)), [f]

    def gram_spatial_case(rng):
        f = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        return (lambda tape: _scalarize(T.gram_spatial(f, tape), tape)), [f]

    def reconstruction_case(rng):
        fb = Tensor(rng.standard_normal((2, 3, 4, 4)))
        fp = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        return (lambda tape: reconstruction_loss(fb, fp, tape)), [fp]

    def correlation_case(rng):
        fb = Tensor(rng.standard_normal((2, 3, 3, 3)))
        fp = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        return (lambda tape: correlation_loss(fb, fp, tape)), [fp]

    def joint_case(rng):
        fb = Tensor(rng.standard_normal((2, 3, 3, 3)))
        fp = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        labels = rng.integers(0, 3, size=4)
        def loss(tape):
            return joint_loss(reconstruction_loss(fb, fp, tape),
                              correlation_loss(fb, fp, tape),
                              T.softmax_cross_entropy(logits, labels, tape),
                              LossWeights(0.5, 1.5), frozenset("rsc"),
                              tape).total_tensor
        return loss, [fp, logits]

    return {
        "conv2d": conv_case(1, 1),
        "conv2d_stride2": conv_case(2, 1, size=7),
        "conv2d_nopad": conv_case(1, 0),
        "relu": relu_case,
        "max_pool2d": pool_case,
        "dense": dense_case,
        "flatten": flatten_case,
        "softmax_cross_entropy": softmax_case,
        "gram_feature": gram_feature_case,
        "gram_spatial": gram_spatial_case,
        "reconstruction_loss": reconstruction_case,
        "correlation_loss": correlation_case,
        "joint_loss": joint_case,
    }


def run_suite(n_seeds: int = 20, rtol: float = 1e-3) -> list[tuple[str, float, bool]]:
    """Run every case over ``n_seeds`` seeds; returns (name, worst rel, passed)."""
    results = []
    for name, builder in suite_cases().items():
        worst, ok = 0.0, True
        for seed in range(n_seeds):
            build_loss, params = builder(np.random.default_rng(seed))
            try:
                worst = max(worst, check_gradients(build_loss, params, rtol=rtol))
            except AssertionError:
                ok = False
        results.append((name, worst, ok))
    return results


def numerical_grad(fn: Callable[[], float], param: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar-valued closure w.r.t. every entry of ``param``."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(param.shape)


def check_gradients(build_loss: Callable[[Tape], Tensor], params: Sequence[Tensor],
                    step: float = 1e-4, rtol: float = 1e-3, atol: float = 1e-6) -> float:
    """Compare analytic and numeric gradients of a loss builder.

    ``build_loss(tape)`` must construct the scalar loss from ``params`` on the
    given tape (pass ``None`` while the checker perturbs entries). Returns the
    worst relative error seen; raises AssertionError past tolerance.
    """
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    tape = Tape()
    loss = build_loss(tape)
    backward(loss, tape)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(lambda: build_loss(None).item(), p, step=step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
        rel = np.abs(analytic - numeric) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
        if not np.all(np.abs(analytic - numeric) <= rtol * denom):
            bad = np.unravel_index(int(rel.argmax()), rel.shape) if rel.ndim else ()
            raise AssertionError(
                f"gradient mismatch at {bad}: analytic {analytic[bad]:.6g} "
                f"vs numeric {numeric[bad]:.6g} (rel {rel.max():.3g}, rtol {rtol})")
    return worst
