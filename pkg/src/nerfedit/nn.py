"""Small fully-connected networks and the Adam optimizer used everywhere.

Weight matrices are stored ``[out, in]`` and biases ``[out]``; the forward
pass is ``x @ W.T + b`` with ReLU between hidden layers and a configurable
output activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError

OUTPUT_ACTIVATIONS = ("none", "sigmoid", "tanh")


def uniform_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    bound = float(np.sqrt(1.0 / in_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(np.float32)


@dataclass
class Mlp:
    """A ReLU MLP: list of (weight, bias) tensors plus an output activation."""

    layers: list[tuple[Tensor, Tensor]]
    output_activation: str = "none"
    name: str = "mlp"

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output_activation!r}")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
                raise DimensionError(f"layer {i} of {self.name}: weight {w.data.shape} / bias {b.data.shape}")
            if prev_out is not None and w.data.shape[1] != prev_out:
                raise DimensionError(
                    f"layer {i} of {self.name}: in-dim {w.data.shape[1]} does not chain from {prev_out}"
                )
            prev_out = w.data.shape[0]

    @classmethod
    def create(cls, dims: list[int], output_activation: str = "none",
               rng: np.random.Generator | None = None, name: str = "mlp") -> "Mlp":
        """Build an MLP with the given layer widths, e.g. [32, 64, 8]."""
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        for i in range(len(dims) - 1):
            w = Tensor(uniform_init(rng, dims[i + 1], dims[i]), requires_grad=True,
                       name=f"{name}/w{i}")
            b = Tensor(np.zeros(dims[i + 1], dtype=np.float32), requires_grad=True,
                       name=f"{name}/b{i}")
            layers.append((w, b))
        return cls(layers, output_activation, name)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].data.shape[0]

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise DimensionError(
                f"{self.name}: input {x.data.shape} incompatible with in-dim {self.in_dim}"
            )
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"{self.name}: non-finite input")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.matmul(h, ad.transpose(w)) + b
            if i != last:
                h = ad.relu(h)
        if self.output_activation == "sigmoid":
            h = ad.sigmoid(h)
        elif self.output_activation == "tanh":
            h = ad.tanh(h)
        return h

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrs = {}
        for i, (w, b) in enumerate(self.layers):
            arrs[f"{self.name}/w{i}"] = w.data
            arrs[f"{self.name}/b{i}"] = b.data
        return arrs

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        for i, (w, b) in enumerate(self.layers):
            w.data = np.ascontiguousarray(arrs[f"{self.name}/w{i}"], dtype=np.float32)
            b.data = np.ascontiguousarray(arrs[f"{self.name}/b{i}"], dtype=np.float32)


@dataclass
class Adam:
    """Bias-corrected Adam over named parameter tensors.

    ``lr_overrides`` maps parameter names to a different learning rate
    (the palette trains 10x faster than the networks).
    """

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update from the accumulated grads, then clear them."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"NaN/Inf gradient for parameter {p.name or i}")
            m = self.m[i]
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.lr_overrides.get(p.name, self.lr) if p.name else self.lr
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)
            p.grad = None

    def state_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        arrs = {f"{prefix}/step": np.array([self.step_count], dtype=np.float32)}
        for i, p in enumerate(self.params):
            key = p.name or f"p{i}"
            arrs[f"{prefix}/m/{key}"] = self.m[i]
            arrs[f"{prefix}/v/{key}"] = self.v[i]
        return arrs

    def load_state_arrays(self, arrs: dict[str, np.ndarray], prefix: str = "adam") -> None:
        self.step_count = int(arrs[f"{prefix}/step"][0])
        for i, p in enumerate(self.params):
            key = p.name or f"p{i}"
            self.m[i] = np.ascontiguousarray(arrs[f"{prefix}/m/{key}"], dtype=np.float32)
            self.v[i] = np.ascontiguousarray(arrs[f"{prefix}/v/{key}"], dtype=np.float32)
