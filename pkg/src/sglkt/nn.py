"""Parameter containers and the small layers shared by the model."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Attribute-discovered parameter tree.

    Any attribute holding a grad-requiring :class:`Tensor`, a ``Module`` or a
    list of modules is part of the tree, in assignment order.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name in own:
                if own[name].shape != np.shape(value):
                    raise ValueError(f"{name}: shape {np.shape(value)} != {own[name].shape}")
                own[name].data = np.array(value, dtype=T.DTYPE)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = param(xavier_uniform(rng, d_in, d_out))
        if bias:
            self.bias = param(np.zeros(d_out))
        else:
            self.bias = None

    def __call__(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class FeedForward(Module):
    """Two linear maps with a ReLU between them."""

    def __init__(self, rng, d_in, d_hidden, d_out=None):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out or d_in)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
