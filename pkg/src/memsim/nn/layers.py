"""Hardware-aware layers.

Forward passes in hardware mode go through the dot-product engine using a
cached programmed copy of the weights; backward passes always use the
full-precision inputs and master weights (straight-through).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import dpe
from ..numerics import stream
from ..slicing import SliceScheme, parse_scheme
from .autodiff import Tensor, as_tensor, col2im, conv_output_size, flatten, img2col, maxpool2d, relu

MODES = ("hardware", "digital")


class StaleCacheError(RuntimeError):
    """Master weights changed after the last update_weight()."""


@dataclass(frozen=True)
class MemLayerConfig:
    engine: dpe.EngineConfig | None = None
    input_sli_med: SliceScheme | str | None = None
    weight_sli_med: SliceScheme | str | None = None
    mode: str = "hardware"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "hardware" and self.engine is None:
            raise ValueError("hardware mode requires an engine")
        for name in ("input_sli_med", "weight_sli_med"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, parse_scheme(v))
        if self.engine is not None:
            # fail early on scheme/device mismatch
            self.resolved_engine()

    def resolved_engine(self) -> dpe.EngineConfig | None:
        if self.engine is None:
            return None
        kw = {}
        if self.input_sli_med is not None:
            kw["input_scheme"] = self.input_sli_med
        if self.weight_sli_med is not None:
            kw["weight_scheme"] = self.weight_sli_med
        return self.engine.replace(**kw) if kw else self.engine


DIGITAL = MemLayerConfig(mode="digital")


class Module:
    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def own_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def named_parameters(self, prefix: str = ""):
        for name, p in self.own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def mem_layers(self) -> list[tuple[str, "_MemLayer"]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, _MemLayer)]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def update_weight(self, cycle: int | None = None):
        for _, m in self.mem_layers():
            m.update_weight(cycle)

    def __call__(self, x):
        return self.forward(as_tensor(x))

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class _MemLayer(Module):
    def __init__(self, weight: np.ndarray, bias: np.ndarray | None, config: MemLayerConfig | None,
                 strict_cache: bool = True):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True) if bias is not None else None
        self.config = config or DIGITAL
        self.strict_cache = strict_cache
        self.programmed: dpe.ProgrammedWeights | None = None
        self._snapshot: np.ndarray | None = None
        self._cycle = 0

    @property
    def engine(self) -> dpe.EngineConfig | None:
        return self.config.resolved_engine()

    @property
    def mode(self) -> str:
        return self.config.mode

    def set_config(self, config: MemLayerConfig):
        """Swap the layer configuration; drops any programmed cache."""
        self.config = config
        self.programmed = None
        self._snapshot = None

    def own_parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def weight_matrix(self) -> np.ndarray:
        """Master weights as the (K, N) matrix held by the crossbar."""
        return self.weight.data.reshape(self.weight.shape[0], -1).T

    def update_weight(self, cycle: int | None = None):
        if self.mode != "hardware":
            return
        w = self.weight.data
        if not np.all(np.isfinite(w)):
            raise ValueError("master weights are not finite")
        if cycle is None:
            cycle = self._cycle
        self.programmed = dpe.program_weights(self.weight_matrix(), self.engine, cycle)
        self._snapshot = w.copy()
        self._cycle = cycle + 1

    def _product(self, x2d: np.ndarray) -> np.ndarray:
        if self.mode == "digital":
            return x2d @ self.weight_matrix()
        if self.programmed is None:
            raise StaleCacheError("hardware layer has no programmed weights; call update_weight() first")
        if self.strict_cache and not np.array_equal(self.weight.data, self._snapshot):
            raise StaleCacheError("master weights changed since update_weight(); call it again "
                                  "or construct the layer with strict_cache=False")
        return dpe.matmul(x2d, self.programmed, self.engine).result


class MemLinear(_MemLayer):
    """y = x W^T + b with W of shape (out_features, in_features)."""

    def __init__(self, in_features: int, out_features: int, config: MemLayerConfig | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None, strict_cache: bool = True):
        rng = rng or stream(0, "init")
        bound = np.sqrt(6.0 / in_features)
        w = rng.uniform(-bound, bound, (out_features, in_features))
        b = rng.uniform(-1, 1, out_features) / np.sqrt(in_features) if bias else None
        super().__init__(w, b, config, strict_cache)
        self.in_features, self.out_features = in_features, out_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        xd, w = x.data, self.weight.data
        out = self._product(xd)
        parents = [x, self.weight]
        if self.bias is not None:
            out = out + self.bias.data
            parents.append(self.bias)
        has_bias = self.bias is not None

        def back(g):
            grads = (g @ w, g.T @ xd)
            return grads + ((g.sum(axis=0),) if has_bias else ())

        return Tensor(out, parents=parents, backward_fn=back, op="mem_linear")


class MemConv2d(_MemLayer):
    """2-D convolution lowered to one matrix product via img2col."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int | tuple[int, int],
                 stride: int = 1, padding: int = 0, config: MemLayerConfig | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None, strict_cache: bool = True):
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size
        rng = rng or stream(0, "init")
        fan_in = in_channels * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (out_channels, in_channels, kh, kw))
        b = rng.uniform(-1, 1, out_channels) / np.sqrt(fan_in) if bias else None
        super().__init__(w, b, config, strict_cache)
        self.kernel = (kh, kw)
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, wd = x.shape
        o = self.weight.shape[0]
        if c != self.weight.shape[1]:
            raise ValueError(f"expected {self.weight.shape[1]} input channels, got {c}")
        kh, kw = self.kernel
        oh, ow = conv_output_size(h, wd, kh, kw, self.stride, self.padding)
        cols = img2col(x.data, kh, kw, self.stride, self.padding)
        wmat = self.weight.data.reshape(o, -1)
        out = self._product(cols)
        parents = [x, self.weight]
        if self.bias is not None:
            out = out + self.bias.data
            parents.append(self.bias)
        out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
        has_bias = self.bias is not None
        shape, wshape, stride, pad = x.shape, self.weight.shape, self.stride, self.padding

        def back(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gx = col2im(g2 @ wmat, shape, kh, kw, stride, pad)
            gw = (g2.T @ cols).reshape(wshape)
            return (gx, gw) + ((g2.sum(axis=0),) if has_bias else ())

        return Tensor(out, parents=parents, backward_fn=back, op="mem_conv2d")


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class MaxPool2d(Module):
    def __init__(self, k: int = 2):
        self.k = k

    def forward(self, x):
        return maxpool2d(x, self.k)


class Flatten(Module):
    def forward(self, x):
        return flatten(x)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = []
        for i, item in enumerate(layers):
            name, mod = item if isinstance(item, tuple) else (str(i), item)
            self.layers.append((name, mod))

    def children(self):
        return list(self.layers)

    def __getitem__(self, name):
        for n, m in self.layers:
            if n == name:
                return m
        raise KeyError(name)

    def forward(self, x):
        for _, m in self.layers:
            x = m(x)
        return x


LENET_LAYERS = ("conv1", "conv2", "fc1", "fc2")


def lenet(configs: dict[str, MemLayerConfig] | MemLayerConfig | None = None, seed: int = 0,
          strict_cache: bool = True) -> Sequential:
    """Desk-scale LeNet-like CNN for 1x28x28 inputs.

    ``configs`` is either one config for every layer or a mapping from layer
    name to config. Each hardware layer gets its own stream tag so layer
    noise draws are independent even when engines share a seed.
    """
    def cfg(i, name):
        c = configs.get(name, DIGITAL) if isinstance(configs, dict) else (configs or DIGITAL)
        if c.engine is not None:
            c = MemLayerConfig(c.engine.replace(stream_tag=i), c.input_sli_med, c.weight_sli_med, c.mode)
        return c

    rng = [stream(seed, "init", i) for i in range(4)]
    return Sequential(
        ("conv1", MemConv2d(1, 6, 5, config=cfg(0, "conv1"), rng=rng[0], strict_cache=strict_cache)),
        ("relu1", ReLU()), ("pool1", MaxPool2d(2)),
        ("conv2", MemConv2d(6, 16, 5, config=cfg(1, "conv2"), rng=rng[1], strict_cache=strict_cache)),
        ("relu2", ReLU()), ("pool2", MaxPool2d(2)),
        ("flatten", Flatten()),
        ("fc1", MemLinear(256, 120, config=cfg(2, "fc1"), rng=rng[2], strict_cache=strict_cache)),
        ("relu3", ReLU()),
        ("fc2", MemLinear(120, 10, config=cfg(3, "fc2"), rng=rng[3], strict_cache=strict_cache)),
    )


def configure(model: Module, configs: dict[str, MemLayerConfig] | MemLayerConfig):
    """Reassign layer configs in place, keeping each layer's stream tag distinct."""
    for i, (name, layer) in enumerate(model.mem_layers()):
        if isinstance(configs, dict) and name not in configs:
            continue
        c = configs[name] if isinstance(configs, dict) else configs
        if c.engine is not None:
            c = MemLayerConfig(c.engine.replace(stream_tag=i), c.input_sli_med, c.weight_sli_med, c.mode)
        layer.set_config(c)
    return model
