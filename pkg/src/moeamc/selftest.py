"""Oracle checks runnable without a test framework (``moeamc selftest``)."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .models import HsrmConfig, LsrmConfig, MoEAMC
from .seeding import stream
from .sigsynth import CONSTELLATIONS, apply_awgn, modulate
from .tensorcore import Tensor
from .trainer import adam_step


_OUTPUT_LAYERS = (("hsrm", len(HsrmConfig().head_hidden)), ("lsrm", len(LsrmConfig().head_hidden)))


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(t: Tensor) -> Tensor:
    # fixed irregular weights: symmetric ones can cancel a gradient to exactly
    # zero, leaving the finite difference as pure rounding noise
    w = np.random.default_rng(t.size).uniform(0.5, 1.5, t.shape)
    return (t * Tensor(w)).sum()


def primitive_cases(seed: int = 7) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Small float64 scalar functions, one per differentiable primitive."""
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 3, 8)
    w, b = _leaf(rng, 4, 3, 3), _leaf(rng, 4)
    gamma, beta = _leaf(rng, 3), _leaf(rng, 3)
    lg, lb = _leaf(rng, 8), _leaf(rng, 8)
    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 2)
    a, m = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    tok = _leaf(rng, 2, 3, 4)
    wq, wk, wv, wo = (_leaf(rng, 4, 4) for _ in range(4))
    labels = np.array([0, 4, 2])

    def bn_train():
        return _weighted_sum(tc.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True))

    def bn_eval():
        return _weighted_sum(tc.batch_norm(x, gamma, beta, np.full(3, 0.3), np.full(3, 2.0), False))

    return {
        "matmul": (lambda: _weighted_sum(tc.matmul(a, m)), [a, m]),
        "conv1d": (lambda: _weighted_sum(tc.conv1d(x, w, b, stride=2, pad=1)), [x, w, b]),
        "batch_norm[train]": (bn_train, [x, gamma, beta]),
        "batch_norm[eval]": (bn_eval, [x, gamma, beta]),
        "layer_norm": (lambda: _weighted_sum(tc.layer_norm(x, lg, lb)), [x, lg, lb]),
        "attention": (lambda: _weighted_sum(tc.attention(q, k, v)), [q, k, v]),
        "multi_head_attention": (
            lambda: _weighted_sum(tc.multi_head_attention(tok, wq, wk, wv, wo, 2)),
            [tok, wq, wk, wv, wo],
        ),
        "relu": (lambda: _weighted_sum(tc.relu(a)), [a]),
        "sigmoid": (lambda: _weighted_sum(tc.sigmoid(a)), [a]),
        "softmax": (lambda: _weighted_sum(tc.softmax(a, axis=-1)), [a]),
        "max_pool1d": (lambda: _weighted_sum(tc.max_pool1d(x, 2, 2)), [x]),
        "global_avg_pool": (lambda: _weighted_sum(tc.global_avg_pool(x)), [x]),
        "cross_entropy(softmax(linear))": (
            lambda: tc.cross_entropy(tc.softmax(tc.matmul(a, m), axis=-1), labels),
            [a, m],
        ),
    }


def randomize_heads(model, seed: int = 0):
    """Redraw the experts' down-scaled output layers at full Xavier scale.

    At their initial scale every upstream gradient is ~100x smaller, which
    pushes many coordinates down toward the rounding noise of a finite
    difference.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name in (f"{e}.head.fc{n}.w" for e, n in _OUTPUT_LAYERS):
            std = math.sqrt(2.0 / sum(p.shape))
            p.data = (std * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


def moe_loss_case(seed: int = 1, batch: int = 4, warmup: int = 40):
    """Full mixture loss on a small float64 batch, eval-mode batch norm.

    Running statistics are warmed up with training-mode passes first. Left
    at their initial values they let activations blow up through the
    residual stacks and saturate the expert softmax, which flattens its
    gradients to ~1e-40.

    The network is piecewise linear (ReLU, max-pool), so a step of 1e-5 can
    straddle a kink and spoil the finite difference at some coordinate even
    though the analytic gradient is right. Some batches hit one, some do not;
    the default seed is a batch that does not.
    """
    rng = np.random.default_rng(seed)
    model = randomize_heads(MoEAMC(rng=np.random.default_rng(seed), dtype=np.float64), seed)
    x = Tensor(rng.standard_normal((batch, 2, model.input_len)))
    labels = rng.integers(0, model.n_classes, batch)
    with tc.no_grad():
        for _ in range(warmup):
            model(x, True)
    return model, (lambda: tc.cross_entropy(model(x, False), labels))


# Softmax ignores a per-query shift of the scores, so the key bias has an
# exactly zero gradient; finite differences there are pure rounding noise.
SHIFT_INVARIANT = ("lsrm.enc.attn.bk",)


# individual checks ---------------------------------------------------------------


def check_primitive_gradients():
    worst = {n: tc.grad_check(f, ps) for n, (f, ps) in primitive_cases().items()}
    bad = {n: e for n, e in worst.items() if not e < 1e-6}
    return not bad, f"max rel err {max(worst.values()):.2e}" if not bad else f"over 1e-6: {bad}"


def check_moe_gradient():
    model, f = moe_loss_case()
    checked = {n: p for n, p in model.params.items() if n not in SHIFT_INVARIANT}
    err = tc.grad_check(f, checked, max_coords=256)
    invariant = [model.params[n] for n in SHIFT_INVARIANT]
    for p in invariant:
        p.grad = None
    f().backward(invariant)
    zero = max(float(np.abs(p.grad).max()) for p in invariant)
    return err < 1e-4 and zero < 1e-12, f"max rel err {err:.2e}, key-bias grad {zero:.1e}"


def check_analytic_examples():
    sm = tc.softmax(Tensor([0.0, math.log(3.0)])).data
    ce = tc.cross_entropy(Tensor(np.full((1, 8), 1 / 8)), [3]).item()
    att = tc.attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 1.0], [1.0, 1.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]])).data
    theta = [np.zeros(1)]
    adam_step(theta, [np.ones(1)], {}, 1)
    ok = (
        np.allclose(sm, [0.25, 0.75], atol=1e-15)
        and abs(ce - math.log(8)) < 1e-12
        and np.allclose(att, [[2.0, 3.0]], atol=1e-12)
        and abs(theta[0][0] + 1e-3 / (1 + 1e-8)) < 1e-15
    )
    return ok, "softmax, cross-entropy, attention, adam"


def check_constellations():
    worst = max(abs(np.mean(np.abs(c) ** 2) - 1.0) for c in CONSTELLATIONS.values())
    return worst < 1e-12, f"max |mean power - 1| = {worst:.1e}"


def check_snr_calibration():
    worst = 0.0
    for snr in (-20.0, 0.0, 20.0):
        rng = stream(99, int(snr) + 100)
        clean = modulate(rng.integers(0, 2, 2 * 4096), "QPSK", 8)
        noisy = apply_awgn(clean, snr, rng)
        pn = np.mean((noisy.i - clean.i) ** 2 + (noisy.q - clean.q) ** 2)
        worst = max(worst, abs(10 * math.log10(clean.power / pn) - snr))
    return worst < 0.3, f"max deviation {worst:.3f} dB"


def check_moe_endpoints():
    rng = np.random.default_rng(1)
    model = randomize_heads(MoEAMC(rng=rng, dtype=np.float64))
    x = Tensor(rng.standard_normal((3, 2, model.input_len)))
    final = model.gate.params["gate.mlp.fc2.w"]
    bias = model.gate.params["gate.mlp.fc2.b"]
    final.data[:] = 0.0
    worst = 0.0
    for b, expert in ((20.0, model.hsrm), (-20.0, model.lsrm)):
        bias.data[:] = b
        worst = max(worst, float(np.abs(model(x).data - expert(x).data).max()))
    return worst < 1e-7, f"max |y_final - expert| = {worst:.1e}"


CHECKS = {
    "primitive gradients": check_primitive_gradients,
    "mixture gradient": check_moe_gradient,
    "analytic examples": check_analytic_examples,
    "constellation power": check_constellations,
    "awgn calibration": check_snr_calibration,
    "mixture endpoints": check_moe_endpoints,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failed check, reported like one
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
