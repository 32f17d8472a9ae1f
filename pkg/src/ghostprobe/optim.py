"""Adam optimizer with bias correction, plus seeded weight initializers."""

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class AdamState:
    """Per-parameter first/second moment buffers and the shared step count."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:  # zero is a valid frozen-parameter step
            raise ShapeError(f"learning rate must be nonnegative, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state):
    """One Adam update, in place, reading each parameter's accumulated .grad."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ShapeError(f"moment buffer for '{name}' has shape {m.shape}, parameter has {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper tying a parameter dict to its AdamState."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.state)


# -- initialization ----------------------------------------------------------


def make_rng(seed):
    """Seeded generator used for every stochastic choice in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def kaiming_conv(rng, out_ch, in_ch, kh, kw, dtype=np.float32):
    """Fan-in scaled normal init for convolution weights."""
    fan_in = in_ch * kh * kw
    std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw))
    return Tensor(w.astype(dtype), requires_grad=True)


def kaiming_tconv(rng, in_ch, out_ch, dtype=np.float32):
    """Init for 2x2 stride-2 transpose conv weights [in_ch, out_ch, 2, 2].

    Taps never overlap, so each output draws from in_ch values only.
    """
    std = np.sqrt(2.0 / in_ch)
    w = rng.normal(0.0, std, size=(in_ch, out_ch, 2, 2))
    return Tensor(w.astype(dtype), requires_grad=True)


def kaiming_linear(rng, in_dim, out_dim, dtype=np.float32):
    std = np.sqrt(2.0 / in_dim)
    w = rng.normal(0.0, std, size=(in_dim, out_dim))
    return Tensor(w.astype(dtype), requires_grad=True)


def xavier_linear(rng, in_dim, out_dim, dtype=np.float32):
    """Symmetric-gain init used for the attention projection matrices."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return Tensor(w.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
