"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .models import build_mrnet, forward, init_model

TOLERANCE = 1e-4


def finite_diff_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
                      max_elements: int | None = None, seed: int = 0) -> float:
    """Max over checked elements of |analytic - central difference| / max(1, |analytic|).

    ``f`` is called as ``f(*xs)`` and must return a scalar tensor.  With
    ``max_elements`` set, only that many randomly chosen coordinates of each
    tensor are perturbed (the analytic gradient is still computed in full).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*xs)
    ad.backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    return _compare(f, xs, analytic, eps, max_elements, seed)


def _compare(f, xs, analytic, eps, max_elements, seed) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*xs).item()
            flat[i] = orig - eps
            down = f(*xs).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    v = rng.standard_normal(shape)
    return v + np.sign(v) * margin


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.mul(out, Tensor(weights)).sum()


def op_cases(seed: int) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    """(name, scalar function, inputs) triples covering every differentiable op."""
    rng = np.random.default_rng(seed)
    T = lambda *shape: Tensor(rng.standard_normal(shape))
    cases = []

    for stride, pad, dil in ((1, 1, 1), (2, 0, 1), (1, 2, 2), (1, 5, 5)):
        x, k, b = T(2, 3, 7, 7), T(4, 3, 3, 3), T(4)
        ho = ad.conv_output_size(7, 3, stride, pad, dil)
        r = rng.standard_normal((2, 4, ho, ho))
        cases.append((f"conv2d[s={stride},p={pad},d={dil}]",
                      lambda x, k, b, s=stride, p=pad, d=dil, r=r:
                      _weighted_sum(ad.conv2d(x, k, b, stride=s, padding=p, dilation=d), r),
                      [x, k, b]))

    x, k, b = T(2, 3, 6, 6), T(3, 1, 3, 3), T(3)
    r = rng.standard_normal((2, 3, 3, 3))
    cases.append(("conv2d[depthwise,s=2]",
                  lambda x, k, b, r=r: _weighted_sum(ad.conv2d(x, k, b, stride=2, padding=1, groups=3), r),
                  [x, k, b]))

    x = Tensor(rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1)
    r = rng.standard_normal((2, 3, 2, 2))
    cases.append(("maxpool2d", lambda x, r=r: _weighted_sum(ad.maxpool2d(x), r), [x]))

    x, k, b = T(2, 3, 3, 3), T(3, 2, 2, 2), T(2)
    r = rng.standard_normal((2, 2, 6, 6))
    cases.append(("upconv2x", lambda x, k, b, r=r: _weighted_sum(ad.upconv2x(x, k, b), r), [x, k, b]))

    x = Tensor(_away_from_zero(rng, (3, 5)))
    r = rng.standard_normal((3, 5))
    cases.append(("relu", lambda x, r=r: _weighted_sum(ad.relu(x), r), [x]))

    x, w, b = T(4, 5), T(5, 3), T(3)
    r = rng.standard_normal((4, 3))
    cases.append(("dense", lambda x, w, b, r=r: _weighted_sum(ad.dense(x, w, b), r), [x, w, b]))

    x = T(4, 5)
    r = rng.standard_normal((4, 5))
    cases.append(("softmax", lambda x, r=r: _weighted_sum(ad.softmax(x), r), [x]))

    a, c = T(2, 2, 3, 3), T(2, 3, 3, 3)
    r = rng.standard_normal((2, 5, 3, 3))
    cases.append(("concat_channels", lambda a, c, r=r: _weighted_sum(ad.concat_channels(a, c), r), [a, c]))

    x = T(2, 3, 4, 4)
    r = rng.standard_normal((2, 3))
    cases.append(("global_avg_pool", lambda x, r=r: _weighted_sum(ad.global_avg_pool(x), r), [x]))

    x = T(5, 4)
    labels = rng.integers(0, 4, size=5)
    cases.append(("cross_entropy(softmax)", lambda x, y=labels: ad.cross_entropy(ad.softmax(x), y), [x]))
    return cases


def mrnet_mini_case(seed: int):
    """Tiny double-precision MRNet and a scalar loss over its parameters."""
    spec = build_mrnet(classes=3, input_resolution=16, width_scale="1/128")
    model = init_model(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    # zero biases put dead channels exactly on the ReLU kink, where central
    # differences and the subgradient legitimately disagree
    for name, t in model.params.items():
        if name.endswith(".bias"):
            t.data[...] = rng.uniform(0.05, 0.2, t.shape) * rng.choice((-1.0, 1.0), t.shape)
    batch = rng.uniform(0.0, 1.0, size=(2, 3, 16, 16))
    labels = rng.integers(0, 3, size=2)
    params = list(model.params.values())

    def loss_fn(*_):
        return ad.cross_entropy(forward(model, batch), labels)

    return "mrnet-mini loss", loss_fn, params


def run_gradcheck(seed: int, eps: float = 1e-5, model_samples: int = 12,
                  corrupt: str | None = None) -> list[tuple[str, float]]:
    """Check every op plus the MRNet-mini loss; returns (item, max rel. error) pairs.

    ``corrupt`` names an item whose first analytic gradient is deliberately
    perturbed, so the harness can prove it catches a broken backward pass.
    """
    results = []
    cases = op_cases(seed) + [mrnet_mini_case(seed)]
    for name, f, xs in cases:
        for t in xs:
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            loss = f(*xs)
        ad.backward(loss, tape)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        if corrupt is not None and name.startswith(corrupt):
            idx = 1 if len(analytic) > 1 else 0
            analytic[idx] = analytic[idx] + 0.05
        limit = model_samples if name.startswith("mrnet") else None
        results.append((name, _compare(f, xs, analytic, eps, limit, seed)))
    return results
