"""Saliency maps: channel-weighted class activation mapping with a
gradient-only weighting (gradcam) and a variant whose weights add the
diagonal second derivative to twice the first derivative (gradcam_pp).

Both produce, for a single input image and class index c:

    alpha_k = (1/Z) * sum_ij  weight_term(k, i, j)
    raw     = ReLU( sum_k alpha_k * A_k )

where A_k are the K feature maps of the target conv layer (spatial size
U x V, Z = U*V).  The raw map is bilinearly upsampled to the input size
and divided by its max (an identically-zero map stays zero).

The class score Y_c defaults to the pre-softmax logit; softmax
probability and exp(logit) scores are available via CamConfig.
"""

from dataclasses import dataclass

import numpy as np

from . import model as nn
from .data import bilinear_resample, f_to_u8
from .errors import BuildError, ShapeError
from .ops import relu

SCORE_KINDS = ("logit", "probability", "exp_logit")
HESSIAN_KINDS = ("auto", "fd", "fast")


@dataclass
class CamConfig:
    target_layer: int | None = None  # default: deepest Conv layer
    score_kind: str = "logit"
    fd_step: float = 1e-3
    hessian: str = "auto"


@dataclass
class CamWeights:
    alpha: np.ndarray  # (K,)
    class_index: int
    method: str


@dataclass
class Heatmap:
    raw: np.ndarray  # (U, V), >= 0
    normalized: np.ndarray  # (H, W) in [0, 1], max 1 unless raw is all zero


def _resolve_target(model: nn.Model, cfg: CamConfig) -> int:
    idx = cfg.target_layer
    if idx is None:
        return nn.deepest_conv_index(model.spec)
    if not isinstance(model.spec.layers[idx], nn.Conv):
        raise BuildError(f"target layer {idx} is {model.spec.layers[idx].canonical()}, "
                         "not a Conv layer")
    return idx


def _as_single_batch(image: np.ndarray, spec) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.shape == tuple(spec.input_shape):
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"explain expects a single input, got shape {x.shape}")
    return x


def score_from_logits(logits: np.ndarray, class_index: int, kind: str) -> float:
    z = logits[0]
    if kind == "logit":
        return float(z[class_index])
    if kind == "probability":
        e = np.exp(z - z.max())
        return float(e[class_index] / e.sum())
    if kind == "exp_logit":
        return float(np.exp(z[class_index]))
    raise BuildError(f"unknown score kind {kind!r}; valid: {SCORE_KINDS}")


def _score_logit_grad(logits: np.ndarray, class_index: int, kind: str) -> np.ndarray:
    """d(score)/d(logits), shape (1, K)."""
    k = logits.shape[1]
    g = np.zeros((1, k))
    if kind == "logit":
        g[0, class_index] = 1.0
    elif kind == "probability":
        z = logits[0]
        e = np.exp(z - z.max())
        p = e / e.sum()
        g[0] = -p[class_index] * p
        g[0, class_index] += p[class_index]
    elif kind == "exp_logit":
        g[0, class_index] = np.exp(logits[0, class_index])
    else:
        raise BuildError(f"unknown score kind {kind!r}; valid: {SCORE_KINDS}")
    return g


def grad_wrt_activations(model: nn.Model, image, class_index: int,
                         target_layer: int | None = None,
                         score_kind: str = "logit") -> np.ndarray:
    """dY_c/dA for the target conv layer's output, shape (K, U, V).

    Eval mode (dropout off); leaves the capture cache populated for the
    caller.
    """
    cfg = CamConfig(target_layer=target_layer, score_kind=score_kind)
    idx = _resolve_target(model, cfg)
    x = _as_single_batch(image, model.spec)
    nn.forward(model, x, capture=True)
    logits = model.cache.activations[len(model.spec.layers) - 1]
    upstream = _score_logit_grad(logits, class_index, score_kind)
    grads = nn.backward(model, upstream, need_input_grad=False)
    return grads.activation_nchw(idx + 1)[0]


def _combine(alpha: np.ndarray, activations: np.ndarray, input_hw) -> Heatmap:
    raw = relu(np.einsum("k,kuv->uv", alpha, activations))
    up = bilinear_resample(raw[:, :, None], input_hw[0], input_hw[1])[:, :, 0]
    m = up.max()
    normalized = up / m if m > 0 else np.zeros_like(up)
    return Heatmap(raw=raw, normalized=normalized)


def gradcam(model: nn.Model, image, class_index: int,
            cfg: CamConfig | None = None):
    """Gradient-averaged channel weights: alpha_k = mean_ij dY/dA_kij."""
    cfg = cfg or CamConfig()
    idx = _resolve_target(model, cfg)
    x = _as_single_batch(image, model.spec)
    g = grad_wrt_activations(model, x, class_index, idx, cfg.score_kind)
    acts = model.activation_nchw(idx + 1)[0]
    alpha = g.mean(axis=(1, 2))
    weights = CamWeights(alpha=alpha, class_index=class_index, method="gradcam")
    return weights, _combine(alpha, acts, model.spec.input_shape[1:])


def _piecewise_linear_after(model: nn.Model, idx: int) -> bool:
    tail = model.spec.layers[idx + 1:]
    ok = (nn.ReLU, nn.MaxPool2, nn.Flatten, nn.Dense, nn.Dropout, nn.SoftmaxOutput)
    return all(isinstance(l, ok) for l in tail)


def hessian_diag(model: nn.Model, image, class_index: int,
                 target_layer: int | None = None,
                 cfg: CamConfig | None = None) -> np.ndarray:
    """Diagonal second derivative of the class score w.r.t. the target
    layer's activations, shape (K, U, V).

    Estimators (cfg.hessian):
    - "fd": central second differences, re-running the network from the
      target layer for each perturbed element (authoritative).
    - "fast": closed form exp(S) * (dS/dA)^2, valid only when the score is
      exp_logit and every layer after the target is piecewise linear.
    - "auto": exact zeros for a logit score over a piecewise-linear tail,
      the fast path when eligible, otherwise fd.
    """
    cfg = cfg or CamConfig()
    if target_layer is not None:
        cfg = CamConfig(target_layer, cfg.score_kind, cfg.fd_step, cfg.hessian)
    idx = _resolve_target(model, cfg)
    x = _as_single_batch(image, model.spec)

    mode = cfg.hessian
    if mode not in HESSIAN_KINDS:
        raise BuildError(f"unknown hessian estimator {mode!r}; valid: {HESSIAN_KINDS}")
    linear_tail = _piecewise_linear_after(model, idx)
    if mode == "auto":
        if cfg.score_kind == "logit" and linear_tail:
            nn.forward(model, x, capture=True)
            return np.zeros_like(model.activation_nchw(idx + 1)[0])
        mode = "fast" if (cfg.score_kind == "exp_logit" and linear_tail) else "fd"

    if mode == "fast":
        if cfg.score_kind != "exp_logit" or not linear_tail:
            raise BuildError(
                "fast hessian path needs score_kind='exp_logit' and only "
                "ReLU/pool/flatten/dense/dropout after the target layer; use "
                "hessian='fd' instead"
            )
        g = grad_wrt_activations(model, x, class_index, idx, "logit")
        logits = model.cache.activations[len(model.spec.layers) - 1]
        return np.exp(logits[0, class_index]) * g * g

    # finite differences, restarting the forward pass from the target layer
    nn.forward(model, x, capture=True)
    base = model.activation_nchw(idx + 1).copy()
    h = cfg.fd_step
    y0 = score_from_logits(nn.forward_from(model, idx, base), class_index,
                           cfg.score_kind)
    out = np.empty_like(base[0])
    flat_base = base.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + h
        yp = score_from_logits(nn.forward_from(model, idx, base), class_index,
                               cfg.score_kind)
        flat_base[i] = orig - h
        ym = score_from_logits(nn.forward_from(model, idx, base), class_index,
                               cfg.score_kind)
        flat_base[i] = orig
        flat_out[i] = (yp - 2.0 * y0 + ym) / (h * h)
    return out


def gradcam_pp(model: nn.Model, image, class_index: int,
               cfg: CamConfig | None = None):
    """Channel weights alpha_k = (1/Z) sum_ij (d2Y/dA^2 + 2 dY/dA)."""
    cfg = cfg or CamConfig()
    idx = _resolve_target(model, cfg)
    x = _as_single_batch(image, model.spec)
    hess = hessian_diag(model, x, class_index, idx, cfg)
    g = grad_wrt_activations(model, x, class_index, idx, cfg.score_kind)
    acts = model.activation_nchw(idx + 1)[0]
    alpha = (hess + 2.0 * g).mean(axis=(1, 2))
    weights = CamWeights(alpha=alpha, class_index=class_index, method="gradcam_pp")
    return weights, _combine(alpha, acts, model.spec.input_shape[1:])


# ---------------------------------------------------------------------------
# rendering

def colormap(v: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue -> green -> red with knots at 0, 0.5, 1."""
    v = np.clip(v, 0.0, 1.0)
    lo = np.clip(2.0 * v, 0.0, 1.0)          # blue->green ramp position
    hi = np.clip(2.0 * v - 1.0, 0.0, 1.0)    # green->red ramp position
    r = hi
    g = np.where(v <= 0.5, lo, 1.0 - hi)
    b = np.where(v <= 0.5, 1.0 - lo, 0.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(heatmap: Heatmap, base: np.ndarray) -> np.ndarray:
    """Blend 50% grayscale base with 50% colormapped heatmap; uint8 RGB."""
    if heatmap.normalized.shape != base.shape[:2]:
        raise ShapeError(
            f"heatmap size {heatmap.normalized.shape} != image size {base.shape[:2]}"
        )
    gray = base.mean(axis=2, keepdims=True)
    overlay = 0.5 * gray + 0.5 * colormap(heatmap.normalized)
    return f_to_u8(overlay)
