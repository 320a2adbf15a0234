"""AdamW with decoupled weight decay, and the warmup + half-cosine schedule."""

import math

import numpy as np


class AdamWState:
    """Per-parameter first/second moments and a shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adamw_step(params, grads, state: AdamWState, lr, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=0.0, decay_mask=None):
    """One decoupled-weight-decay Adam update, in place on params.

    decay_mask, when given, switches weight decay off per parameter (the
    usual no-decay treatment of biases/norm gains). A non-finite gradient
    rejects the whole step before any parameter is touched.
    """
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; step rejected")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and (decay_mask is None or decay_mask[i]):
            update = update + weight_decay * p.data
        p.data = p.data - (lr * update).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to base_lr, then half-cosine decay to zero at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr if step < total_steps else 0.0
    frac = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Convenience wrapper binding params, hyperparameters, and state.

    `decay_mask` defaults to the usual rule: decay only matrices
    (ndim >= 2); biases, norm gains, and lone embedding vectors are exempt.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decay_mask=None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        if decay_mask is None:
            decay_mask = [p.data.ndim >= 2 for p in self.params]
        self.decay_mask = list(decay_mask)
        self.state = AdamWState(self.params)

    def step(self, lr=None):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state,
                   self.lr if lr is None else lr,
                   self.beta1, self.beta2, self.eps, self.weight_decay,
                   self.decay_mask)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        """Flat view of optimizer state for checkpointing: (t, [m...], [v...])."""
        return self.state.t, self.state.m, self.state.v

    def load_state_arrays(self, t, ms, vs):
        if len(ms) != len(self.params) or len(vs) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        for i, (m, v) in enumerate(zip(ms, vs)):
            if m.shape != self.params[i].data.shape:
                raise ValueError("optimizer state shape mismatch")
            self.state.m[i] = m.astype(self.params[i].data.dtype)
            self.state.v[i] = v.astype(self.params[i].data.dtype)
        self.state.t = int(t)
