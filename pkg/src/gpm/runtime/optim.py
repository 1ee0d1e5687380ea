"""AdamW with decoupled weight decay, cosine LR schedule, gradient clipping."""

from __future__ import annotations

import numpy as np

from .modules import Parameter


class AdamW:
    """Adam with weight decay applied directly to the weights, not the grads.

    Update per step t (bias-corrected):
        m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
        w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
    """

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.named_params: list[tuple[str, Parameter]] = list(named_params)
        if not self.named_params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.named_params:
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient; was backward() run?")
            g = p.grad.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.asarray([self.step_count], dtype=np.float32)}
        for name in self.m:
            state[f"m/{name}"] = self.m[name].astype(np.float32)
            state[f"v/{name}"] = self.v[name].astype(np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.step_count = int(np.asarray(state["step"]).ravel()[0])
        for name in self.m:
            self.m[name] = np.asarray(state[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.asarray(state[f"v/{name}"], dtype=np.float64)


def cosine_schedule(step: int, total_steps: int, base_lr: float,
                    min_lr: float = 0.0) -> float:
    """Half-cosine decay: base_lr at step 0, min_lr at total_steps.

    Steps past total_steps clamp at min_lr.
    """
    progress = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * progress))


def clip_global_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their joint l2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    grads = []
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
            grads.append(p)
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in grads:
            p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm
