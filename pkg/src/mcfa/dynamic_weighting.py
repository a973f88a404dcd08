"""Per-sample attribute loss weights learned from a stage's shared feature.

The head maps the shared feature ``x`` through one affine layer and a
softmax, ``mu = softmax(W^T x + b)``, so the d weights are positive and sum
to one for every sample. The S_Net head is a 1x1 convolution over the
1x1 shared map; the M_Net and L_Net heads are fully connected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, as_tensor, backward, conv2d, flatten, fully_connected,
                     parameter, softmax)


@dataclass
class DynamicWeightHead:
    weight: Tensor  # (D, d) when dense, (d, D, 1, 1) when convolutional
    bias: Tensor  # (d,)
    convolutional: bool = False

    @property
    def in_features(self) -> int:
        return self.weight.shape[1] if self.convolutional else self.weight.shape[0]

    @property
    def num_attributes(self) -> int:
        return self.bias.shape[0]

    @classmethod
    def zeros(cls, in_features: int, num_attributes: int, convolutional: bool = False,
              prefix: str = "") -> "DynamicWeightHead":
        shape = (num_attributes, in_features, 1, 1) if convolutional else (in_features, num_attributes)
        return cls(parameter(np.zeros(shape), name=f"{prefix}weight"),
                   parameter(np.zeros(num_attributes), name=f"{prefix}bias"),
                   convolutional)


def compute_weights(head: DynamicWeightHead, x) -> Tensor:
    """Attribute weights for shared feature ``x``.

    ``x`` is ``(D,)``/``(N, D)`` for a dense head and ``(D,1,1)``/``(N,D,1,1)``
    for a convolutional one (a flat vector is also accepted there).
    Returns ``(d,)`` or ``(N, d)``.
    """
    x = as_tensor(x)
    if head.convolutional:
        if x.ndim in (1, 2):
            x = x.reshape(x.shape + (1, 1))
        if x.shape[-3:] != (head.in_features, 1, 1):
            raise ValueError(f"shared feature {x.shape} does not match head input "
                             f"({head.in_features}, 1, 1)")
        logits = flatten(conv2d(x, head.weight, head.bias))
    else:
        if x.shape[-1] != head.in_features:
            raise ValueError(f"shared feature {x.shape} does not match head input {head.in_features}")
        logits = fully_connected(x, head.weight, head.bias)
    return softmax(logits, axis=-1)


@dataclass
class WeightPressure:
    logit_gradients: np.ndarray  # d(mu . l)/d(logit_q), through the engine
    closed_form: np.ndarray  # mu_q * (l_q - mu . l)
    weighted_mean_loss: float

    @property
    def sign_consistent(self) -> bool:
        """Logit gradient is negative exactly where l_q is below the weighted mean."""
        g = self.closed_form
        below = self.logit_gradients < 0
        return bool(np.all(below[g < 0]) and np.all(~below[g > 0]))


def weight_pressure_check(losses, weights) -> WeightPressure:
    """Gradient of ``weights . losses`` w.r.t. the softmax logits of ``weights``.

    The losses are held constant. A descent step on the weighted loss moves
    weight from attributes whose loss is above the weighted mean toward
    those below it.
    """
    l = np.asarray(losses, dtype=np.float64)
    mu = np.asarray(weights, dtype=np.float64)
    if l.shape != mu.shape or l.ndim != 1:
        raise ValueError("losses and weights must be vectors of equal length")
    # log(mu) reproduces mu under softmax; the floor keeps vertex cases finite
    logits = parameter(np.log(np.maximum(mu, 1e-300)))
    mu_t = softmax(logits)
    total = (mu_t * Tensor(l)).sum()
    backward(total)
    mean_loss = float(mu @ l)
    return WeightPressure(logits.grad.copy(), mu * (l - mean_loss), mean_loss)
