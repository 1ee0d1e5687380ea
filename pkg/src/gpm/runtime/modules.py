"""Parameter containers and the few layers everything is built from."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, layer_norm, matmul


class Parameter(Tensor):
    """A trainable tensor; modules collect these for the optimizer."""

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Namespace for parameters and submodules with torch-like traversal.

    Attribute assignment is enough for registration; `named_parameters`
    walks `__dict__` (and lists of modules) in insertion order, which keeps
    checkpoint record order deterministic.
    """

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def _child_modules(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._child_modules():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': expected {p.data.shape}, got {arr.shape}"
                )
            p.data = arr.copy()


def stochastic_depth_scale(p_skip: float, rng: np.random.Generator | None,
                           training: bool) -> float:
    """Residual-branch multiplier under stochastic depth.

    Training: Bernoulli skip — 0.0 with probability p_skip (caller can then
    skip computing the branch), else 1.0.  Evaluation: deterministic survival
    scaling by 1 - p_skip.
    """
    if not 0.0 <= p_skip < 1.0:
        raise ValueError(f"p_skip must be in [0, 1), got {p_skip}")
    if p_skip == 0.0:
        return 1.0
    if training:
        if rng is None:
            raise ValueError("stochastic depth in training mode needs an rng")
        return 0.0 if rng.random() < p_skip else 1.0
    return 1.0 - p_skip


class Linear(Module):
    """Affine map on the last axis: y = x @ W + b."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
