"""Adversarial, task, privileged and perceptual losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff_core as ad
from .autodiff_core import Tensor

IGNORE_LABEL = 255


@dataclass
class LossWeights:
    alpha: float = 1.0   # adversarial
    beta: float = 0.5    # task
    gamma: float = 0.1   # privileged
    delta: float = 0.33  # perceptual

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    gan_d: float = 0.0
    gan_g: float = 0.0
    task: float = 0.0
    privileged: float = 0.0
    perceptual: float = 0.0
    total_generator_side: float = 0.0

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f.name)) for f in fields(self))


def lsgan_discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean (D(x_r) - 1)^2 + mean D(G(x_s))^2 over all patch scores."""
    return ad.mean(ad.square(d_real - 1.0)) + ad.mean(ad.square(d_fake))


def lsgan_generator_loss(d_fake: Tensor) -> Tensor:
    """Least-squares target-1 form: mean (D(G(x_s)) - 1)^2."""
    return ad.mean(ad.square(d_fake - 1.0))


def minimax_generator_loss(d_fake: Tensor) -> Tensor:
    """Literal negation of the fake half of the discriminator loss: -mean D(G(x_s))^2."""
    return ad.mul(ad.mean(ad.square(d_fake)), -1.0)


GENERATOR_GAN_FORMS = {"least_squares": lsgan_generator_loss, "minimax": minimax_generator_loss}


def cross_entropy_seg(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_LABEL) -> Tensor:
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ad.ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy_seg: every pixel is ignored")
    idx = np.where(valid, labels, 0).astype(np.int64)
    if idx.min() < 0 or idx.max() >= c:
        raise ValueError(f"labels outside 0..{c - 1}")
    picked = ad.take_channels(ad.log_softmax_channels(logits), idx)
    return ad.sum(ad.mul(picked, valid * (-1.0 / count)))


def l1_mean(a: Tensor, b) -> Tensor:
    b = ad.as_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"l1 shape mismatch {a.shape} vs {b.shape}")
    return ad.mean(ad.abs(a - b))


def task_loss(t_fwd, g_fwd, x_s: Tensor, y_s: np.ndarray, x_f: Tensor | None = None) -> Tensor:
    """CE(T(x_s), y_s) + CE(T(G(x_s)), y_s).

    Pass ``x_f`` to reuse an already computed G(x_s) on the current tape.
    """
    if x_f is None:
        x_f = g_fwd(x_s)
    return cross_entropy_seg(t_fwd(x_s), y_s) + cross_entropy_seg(t_fwd(x_f), y_s)


def privileged_loss(p_fwd, g_fwd, x_s: Tensor, z_s, x_f: Tensor | None = None) -> Tensor:
    """Mean |P(x_s) - z_s| + mean |P(G(x_s)) - z_s|."""
    if x_f is None:
        x_f = g_fwd(x_s)
    z = ad.as_tensor(z_s)
    return l1_mean(p_fwd(x_s), z) + l1_mean(p_fwd(x_f), z)


def perceptual_loss(phi, x_s: Tensor, x_f: Tensor) -> Tensor:
    """Sum over the feature maps of phi of the mean absolute difference."""
    total = None
    for a, b in zip(phi(x_s), phi(x_f)):
        term = l1_mean(b, a)
        total = term if total is None else total + term
    return total


def total_generator_objective(w: LossWeights, gan_g, task, privileged, perceptual) -> Tensor:
    terms = [(w.alpha, gan_g), (w.beta, task), (w.gamma, privileged), (w.delta, perceptual)]
    total = Tensor(0.0)
    for weight, term in terms:
        if weight != 0.0 and term is not None:
            total = total + ad.mul(ad.as_tensor(term), weight)
    return total
