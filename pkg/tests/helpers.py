"""Shared builders for tests that exercise the package end to end."""

from pathlib import Path

import numpy as np
from PIL import Image

from mvcnn import tensor as T
from mvcnn.data import ArraySource
from mvcnn.model import ModelConfig, backward, build_model, forward, parse_plan
from mvcnn.tensor import BN_EPSILON
from mvcnn.train import TrainConfig, cross_entropy, fit
from mvcnn.views import ViewCombination
from oracles import FD_STEP, max_rel_error, naive_conv2d, numeric_grad, tensor_rel_error

SMALL_PLAN = "8,8p,16,16p,32,32p,64p"


KINK_MARGIN = 1e-2


def kink_margin(model, x, seed=0) -> float:
    """Distance of the case from the nearest ReLU or max-pool kink.

    Central differences are only a derivative oracle when the probe step
    cannot cross a non-differentiable point, so test cases are drawn until
    every ReLU input and every pool window's top-two gap clears a margin.
    """
    _, cache = forward(model, x, "train", seed)
    margin = np.inf
    for spec, p in model.conv_layers:
        z = T.conv2d_forward(cache.layer_inputs[spec.name], p)
        margin = min(margin, float(np.abs(z).min()))
        if spec.pool_after:
            b = T.batchnorm_forward(cache.activations[spec.name], p.copy(), "train")
            n, c, h, w = b.shape
            b = b[:, :, : h - h % 2, : w - w % 2].reshape(n, c, h // 2, 2, w // 2, 2)
            top = np.sort(b.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4), axis=-1)
            margin = min(margin, float((top[..., -1] - top[..., -2]).min()))
    return margin


def gradient_case(seed: int, max_tries: int = 10_000):
    """Smallest draw index >= 0 whose (model, x, y) sits clear of every kink."""
    cfg = ModelConfig(ViewCombination.RGB_GM, (8, 8), 3, dropout_rate=0.2, conv_plan=parse_plan("3,4p"))
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        model = build_model(cfg, int(rng.integers(2**31))).astype(np.float64)
        for _, p in model.conv_layers:
            p.bn_gamma[:] = rng.uniform(0.5, 1.5, p.bn_gamma.shape)
            p.bn_beta[:] = rng.normal(0, 0.5, p.bn_beta.shape)
        x = rng.standard_normal((2, 4, 8, 8))
        y = np.eye(3)[rng.integers(0, 3, 2)]
        if kink_margin(model, x, seed) >= KINK_MARGIN:
            return model, x, y
    raise RuntimeError(f"no kink-free case found for seed {seed}")


def end_to_end_gradient_error(seed: int, step: float = FD_STEP, elementwise: bool = False) -> float:
    """Worst relative error over the parameter tensors of a 2-conv, 8x8, 3-class model.

    By default each tensor is compared by norm; ``elementwise`` uses the
    per-entry measure, which at the 1e-3 step is dominated on near-zero
    entries by the truncation error of the difference quotient itself.
    """
    model, x, y = gradient_case(seed)

    def loss():
        return cross_entropy(forward(model, x, "train", seed)[0], y)[0]

    probs, cache = forward(model, x, "train", seed)
    grads, _ = backward(model, cache, cross_entropy(probs, y)[1])
    measure = max_rel_error if elementwise else tensor_rel_error
    worst = 0.0
    for spec, params in model.layers:
        for name, g in grads[spec.name].items():
            worst = max(worst, measure(g, numeric_grad(loss, getattr(params, name), step)))
    return worst


def memorization_run(epochs: int = 200, seed: int = 0):
    """Eight samples at 64x64 through a scaled-down plan, one batch per epoch."""
    rng = np.random.default_rng(seed)
    k = 4
    x = rng.random((8, 4, 64, 64)).astype(np.float32)
    labels = np.arange(8) % k
    cfg = ModelConfig(ViewCombination.RGB_GM, (64, 64), k, dropout_rate=0.0, conv_plan=parse_plan(SMALL_PLAN))
    model = build_model(cfg, seed)
    source = ArraySource(x, labels, k)
    tc = TrainConfig(epochs=epochs, batch_size=8, dropout_rate=0.0, seed=seed)
    return fit(model, source, source, tc)


def write_png_dataset(root: Path, classes=("alpha", "beta", "gamma"), per_class=6, size=20, seed=0) -> Path:
    """Folder-per-class PNGs whose classes differ in hue and stripe direction."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for ci, name in enumerate(classes):
        (root / name).mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            img = rng.random((size, size, 3)) * 0.3
            img[..., ci % 3] += 0.6
            if ci % 2:
                img[::3, :, :] *= 0.3
            else:
                img[:, ::3, :] *= 0.3
            Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8)).save(root / name / f"img_{j:02d}.png")
    return root


def toy_model(seed=0):
    """One conv (2 filters) on a 4x4 RGB input, then the pooled linear head."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(ViewCombination.RGB, (4, 4), 2, dropout_rate=0.2, conv_plan=parse_plan("2"))
    model = build_model(cfg, seed)
    conv = model.layer("conv1")[1]
    conv.weights[:] = np.abs(rng.standard_normal(conv.weights.shape))
    conv.bias[:] = rng.uniform(-0.5, 0.5, 2)
    conv.bn_gamma[:] = [1.5, 0.7]
    conv.bn_beta[:] = [0.1, -0.2]
    conv.bn_running_mean[:] = [0.3, 0.2]
    conv.bn_running_var[:] = [2.0, 0.5]
    model.dense.weights[:] = np.array([[0.8, 0.0], [-0.4, 1.1]]).reshape(2, 2, 1, 1)
    model.dense.bias[:] = [0.05, -0.05]
    return model


def hand_gradcam(model, x, target):
    """Derived by hand: every path from the logit to A is linear in infer mode."""
    conv = model.layer("conv1")[1]
    a = np.maximum(naive_conv2d(x[None], conv.weights, conv.bias)[0], 0.0)  # (2, 2, 2)
    scale = conv.bn_gamma.astype(np.float64) / np.sqrt(conv.bn_running_var.astype(np.float64) + BN_EPSILON)
    w = model.dense.weights[target, :, 0, 0].astype(np.float64)
    alpha = w * scale / a[0].size  # d logit / d A_k(i, j), constant over (i, j)
    return np.maximum(np.einsum("k,kij->ij", alpha, a), 0.0)
