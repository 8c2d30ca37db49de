"""MLP building blocks and the Adam optimizer on top of the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, add, layer_norm, matmul, relu, tanh

_ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass
class MlpParams:
    """Weights for a plain feed-forward net.

    layers holds (weight, bias) pairs with chained dimensions: the out
    width of layer i equals the in width of layer i+1.  The activation is
    applied between layers, never after the last one; ``output_layer_norm``
    optionally normalizes the final output over the feature axis.
    """

    layers: list[tuple[Tensor, Tensor]]
    activation: str = "relu"
    output_layer_norm: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("MlpParams needs at least one layer")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for (w, b) in self.layers:
            if b.shape != (1, w.cols):
                raise ValueError(
                    f"bias shape {b.shape} does not match weight {w.shape}"
                )
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.cols != w1.rows:
                raise ValueError(
                    f"layer dimensions do not chain: {w0.shape} -> {w1.shape}"
                )

    @property
    def in_width(self) -> int:
        return self.layers[0][0].rows

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].cols

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out


def mlp_init(
    widths: list[int],
    rng: np.random.Generator,
    activation: str = "relu",
    output_layer_norm: bool = False,
) -> MlpParams:
    """Fresh MLP with 1/sqrt(fan_in) normal weights and zero biases.

    widths = [in, hidden..., out].
    """
    if len(widths) < 2:
        raise ValueError("mlp_init needs at least [in, out] widths")
    layers = []
    for d_in, d_out in zip(widths, widths[1:]):
        w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        b = Tensor(np.zeros((1, d_out)))
        layers.append((w, b))
    return MlpParams(layers, activation=activation, output_layer_norm=output_layer_norm)


def mlp_forward(params: MlpParams, x: Tensor, tape: Tape | None) -> Tensor:
    """Linear layers with the hidden activation between them.

    Applies layer normalization to the final output when the params say so.
    """
    if x.cols != params.in_width:
        raise ValueError(
            f"mlp_forward: input width {x.cols} != first layer in-width {params.in_width}"
        )
    act = _ACTIVATIONS[params.activation]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = add(matmul(h, w, tape), b, tape)
        if i < last:
            h = act(h, tape)
    if params.output_layer_norm:
        h = layer_norm(h, tape)
    return h


@dataclass
class AdamState:
    """First/second moment accumulators, one per parameter array, plus step count."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list[Tensor], lr: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros(p.shape) for p in params],
            v=[np.zeros(p.shape) for p in params],
            step=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> None:
    """One in-place Adam update with bias correction.

    ``lr`` overrides state.lr for this step (scheduling); moments and the
    step counter are updated in place along with the parameter values.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step length mismatch: {len(params)} params, {len(grads)} grads,"
            f" {len(state.m)} moment slots"
        )
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"adam_step shape mismatch: {p.shape} vs {g.shape}")
    step_lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.value = p.value - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
