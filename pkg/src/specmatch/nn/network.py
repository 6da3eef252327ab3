"""Sequential network over the fixed layer set."""

from __future__ import annotations

import copy

import numpy as np

from ..errors import ShapeMismatch
from .layers import build_layer

__all__ = ["Network", "infer_shapes", "xavier_bound", "xavier_init"]


def infer_shapes(specs, input_shape):
    """Static per-layer output shapes (excluding the batch axis).

    Returns a list with one entry per spec; raises ShapeMismatch when a
    layer would produce an empty output.
    """
    shapes = []
    shape = tuple(input_shape)
    for spec in specs:
        layer = build_layer(spec, shape, np.float64)
        shape = tuple(layer.out_shape)
        if min(shape) < 1:
            raise ShapeMismatch(f"{spec} maps {layer.in_shape} to empty output {shape}")
        shapes.append(shape)
    return shapes


def xavier_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(network, rng_seed):
    """Re-initialize ``network`` in place: weights uniform in
    ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``, biases zero,
    batch norm to the identity transform. Returns the network."""
    rng = np.random.default_rng(rng_seed)
    for layer in network.layers:
        fans = layer.fans()
        if fans is not None:
            a = xavier_bound(*fans)
            w = layer.params["weight"]
            w[...] = rng.uniform(-a, a, size=w.shape)
            layer.params["bias"][...] = 0
        if "gamma" in layer.params:
            layer.params["gamma"][...] = 1
            layer.params["beta"][...] = 0
            layer.buffers["running_mean"][...] = 0
            layer.buffers["running_var"][...] = 1
    return network


class Network:
    """A stack of layers built from a list of layer specs.

    Parameters
    ----------
    specs : sequence of layer specs
    input_shape : tuple
        ``(channels, length)`` of one sample.
    seed : int, optional
        Xavier initialization seed; parameters stay zero when None.
    dtype : numpy dtype
    """

    def __init__(self, specs, input_shape, seed=None, dtype=np.float32):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers = []
        shape = self.input_shape
        for spec in self.specs:
            layer = build_layer(spec, shape, self.dtype)
            shape = tuple(layer.out_shape)
            if min(shape) < 1:
                raise ShapeMismatch(f"{spec} maps {layer.in_shape} to empty output {shape}")
            self.layers.append(layer)
        self.output_shape = shape
        self.forward_calls = 0
        if seed is not None:
            xavier_init(self, seed)

    def forward(self, x, train=False):
        """Run the stack. Train mode uses batch statistics and caches
        activations for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2 and len(self.input_shape) == 2 and self.input_shape[0] == 1:
            x = x[:, None, :]
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"network expects input {self.input_shape}, got {x.shape[1:]}")
        self.forward_calls += 1
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, grad):
        """Back-propagate ``grad`` (d loss / d output); fills each layer's
        ``grads`` and returns d loss / d input."""
        grad = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    # parameter access ------------------------------------------------------

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield f"{i}.{name}", layer.params[name]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def gradients(self):
        return [layer.grads[name] for layer in self.layers for name in layer.param_names]

    def named_state(self):
        """Parameters and buffers in declaration order (the serialization
        order)."""
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield f"{i}.{name}", layer.params[name]
            for name in layer.buffer_names:
                yield f"{i}.{name}", layer.buffers[name]

    def state_arrays(self):
        return [a for _, a in self.named_state()]

    def get_state(self):
        return [a.copy() for a in self.state_arrays()]

    def set_state(self, arrays):
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ShapeMismatch(f"state has {len(arrays)} arrays, network needs {len(targets)}")
        for dst, src in zip(targets, arrays):
            if dst.shape != np.shape(src):
                raise ShapeMismatch(f"state array shape {np.shape(src)} != {dst.shape}")
            dst[...] = src

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        net = Network(self.specs, self.input_shape, dtype=dtype)
        net.set_state([a.astype(dtype) for a in self.state_arrays()])
        return net

    def clone(self):
        return copy.deepcopy(self)
