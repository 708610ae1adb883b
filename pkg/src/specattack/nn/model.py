"""Differentiable classifiers: a small residual ConvNet and a linear baseline.

Both take raw pixel batches in the 0..255 intensity domain, scale them by
1/255 internally, and expose logits, input gradients and Jacobians through
the shared :class:`Classifier` interface.  Every gradient request is charged
to ``gradient_meter`` in batch units.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PIXEL_SCALE = 1.0 / 255.0


class ShapeError(ValueError):
    """Input batch does not match the classifier's expected input shape."""


class Classifier:
    """Base class for models the attack suite can drive.

    Subclasses implement :meth:`logits_graph` on a normalized input tensor
    and list their trainable tensors in :meth:`parameters`.
    """

    input_shape: tuple = ()
    n_classes: int = 2

    def __init__(self):
        self._meter = 0
        self._meter_lock = threading.Lock()
        self.training = False

    # -- metering --------------------------------------------------------

    @property
    def gradient_meter(self) -> int:
        return self._meter

    def charge(self, units: int) -> None:
        with self._meter_lock:
            self._meter += int(units)

    # -- to be provided by subclasses ------------------------------------

    def logits_graph(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        raise NotImplementedError

    def named_tensors(self) -> list:
        """(name, array) pairs for serialization, parameters then buffers."""
        raise NotImplementedError

    # -- shared API ------------------------------------------------------

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"expected batch of shape (n, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        """Logits for a pixel batch; no gradient is recorded or charged."""
        x = self._check(x)
        return self.logits_graph(Tensor(x * PIXEL_SCALE)).data

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.forward(x))

    def predict(self, x):
        """Argmax class (lowest index wins ties) and its softmax confidence."""
        p = self.probabilities(x)
        cls = p.argmax(axis=1)
        return cls, p[np.arange(len(cls)), cls]

    def gradient(self, x, objective, units: int = 1):
        """Value and pixel-gradient of ``sum(objective(logits))``.

        ``objective`` maps the logits tensor to a per-sample loss tensor of
        shape (n,).  Returns (per-sample values, gradient w.r.t. pixels).
        """
        x = self._check(x)
        xt = Tensor(x * PIXEL_SCALE, requires_grad=True)
        per_sample = objective(self.logits_graph(xt))
        ad.tsum(per_sample).backward()
        self.charge(units)
        return per_sample.data.copy(), xt.grad * PIXEL_SCALE

    def grad_input(self, x, labels, loss: str = "ce") -> np.ndarray:
        """Gradient of the per-sample loss w.r.t. pixels; one batch unit.

        ``loss="ce"`` is cross-entropy against ``labels``; ``loss="logit"``
        is the raw logit of class ``labels``.
        """
        labels = np.asarray(labels)
        if loss == "ce":
            obj = lambda z: ad.cross_entropy(z, labels, reduction="none")  # noqa: E731
        elif loss == "logit":
            obj = lambda z: ad.take_rows(z, labels)  # noqa: E731
        else:
            raise ValueError(f"unknown loss {loss!r}")
        return self.gradient(x, obj)[1]

    def jacobian_input(self, x, output: str = "softmax", batch_size: int | None = None):
        """Per-sample Jacobian of softmax outputs (or logits) w.r.t. pixels.

        Returns (outputs, jacobian) with jacobian shaped
        (n, classes, *input_shape).  The meter is charged
        ceil(classes / batch_size) units per sample row-set, where
        ``batch_size`` is the attack batch size (defaults to ``n``).
        """
        if output not in ("softmax", "logits"):
            raise ValueError(f"unknown output {output!r}")
        x = self._check(x)
        n = x.shape[0]
        batch_size = batch_size or n
        xt = Tensor(x * PIXEL_SCALE, requires_grad=True)
        z = self.logits_graph(xt)
        out = ad.softmax(z) if output == "softmax" else z
        jac = np.empty((n, self.n_classes) + tuple(self.input_shape))
        for k in range(self.n_classes):
            xt.grad = None
            seed = np.zeros_like(out.data)
            seed[:, k] = 1.0
            out.backward(seed)
            jac[:, k] = xt.grad * PIXEL_SCALE
        self.charge(math.ceil(self.n_classes * n / batch_size))
        return out.data.copy(), jac

    def reset_meter(self) -> None:
        with self._meter_lock:
            self._meter = 0


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# layers


def _he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, rng, c_in, c_out, k, stride=1, bias=False):
        self.stride = stride
        self.padding = k // 2
        self.weight = Tensor(_he_uniform(rng, (k, k, c_in, c_out), c_in * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def tensors(self, prefix):
        out = [(prefix + ".weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + ".bias", self.bias))
        return out


class BatchNorm:
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = 0.1

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum)

    def tensors(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def buffers(self, prefix):
        return [(prefix + ".running_mean", self.running_mean), (prefix + ".running_var", self.running_var)]


class ResidualBlock:
    """conv-bn-relu-conv-bn plus identity or 1x1 projection shortcut, then relu."""

    def __init__(self, rng, c_in, c_out, stride):
        self.conv1 = Conv(rng, c_in, c_out, 3, stride)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv(rng, c_out, c_out, 3, 1)
        self.bn2 = BatchNorm(c_out)
        self.project = None
        if stride != 1 or c_in != c_out:
            self.project = Conv(rng, c_in, c_out, 1, stride)
            self.project_bn = BatchNorm(c_out)

    def batch_norms(self):
        return [self.bn1, self.bn2] + ([] if self.project is None else [self.project_bn])

    def __call__(self, x, training):
        h = ad.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = x if self.project is None else self.project_bn(self.project(x), training)
        return ad.relu(h + skip)

    def tensors(self, prefix):
        out = self.conv1.tensors(prefix + ".conv1") + self.bn1.tensors(prefix + ".bn1")
        out += self.conv2.tensors(prefix + ".conv2") + self.bn2.tensors(prefix + ".bn2")
        if self.project is not None:
            out += self.project.tensors(prefix + ".project") + self.project_bn.tensors(prefix + ".project_bn")
        return out

    def buffers(self, prefix):
        out = self.bn1.buffers(prefix + ".bn1") + self.bn2.buffers(prefix + ".bn2")
        if self.project is not None:
            out += self.project_bn.buffers(prefix + ".project_bn")
        return out


@dataclass(frozen=True)
class ResNetMiniConfig:
    classes: int
    input_shape: tuple = (128, 128)
    stem_channels: int = 16
    stem_stride: int = 1
    stages: tuple = ((2, 16, 1), (2, 32, 2), (2, 64, 2))
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        for blocks, channels, stride in self.stages:
            if stride not in (1, 2) or blocks < 1 or channels < 1:
                raise ValueError(f"invalid stage {(blocks, channels, stride)}")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def to_dict(self):
        return {
            "classes": self.classes,
            "input_shape": list(self.input_shape),
            "stem_channels": self.stem_channels,
            "stem_stride": self.stem_stride,
            "stages": [list(s) for s in self.stages],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d.get("input_shape", (128, 128)))
        d["stages"] = tuple(tuple(s) for s in d.get("stages", cls.stages))
        return cls(**d)


class ResNetMini(Classifier):
    """Desk-scale residual network on single-channel images."""

    def __init__(self, config: ResNetMiniConfig):
        super().__init__()
        self.config = config
        self.input_shape = config.input_shape
        self.n_classes = config.classes
        rng = np.random.default_rng(config.seed)
        self.stem = Conv(rng, 1, config.stem_channels, 3, config.stem_stride)
        self.stem_bn = BatchNorm(config.stem_channels)
        self.blocks = []
        c = config.stem_channels
        for n_blocks, channels, stride in config.stages:
            for i in range(n_blocks):
                self.blocks.append(ResidualBlock(rng, c, channels, stride if i == 0 else 1))
                c = channels
        self.fc_weight = Tensor(_he_uniform(rng, (c, config.classes), c), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(config.classes), requires_grad=True)

    def logits_graph(self, x):
        h = x.reshape((x.shape[0],) + tuple(self.input_shape) + (1,))
        h = ad.relu(self.stem_bn(self.stem(h), self.training))
        for block in self.blocks:
            h = block(h, self.training)
        return ad.global_avg_pool(h) @ self.fc_weight + self.fc_bias

    def batch_norms(self):
        out = [self.stem_bn]
        for block in self.blocks:
            out += block.batch_norms()
        return out

    def named_parameters(self):
        out = self.stem.tensors("stem") + self.stem_bn.tensors("stem_bn")
        for i, block in enumerate(self.blocks):
            out += block.tensors(f"block{i}")
        return out + [("fc.weight", self.fc_weight), ("fc.bias", self.fc_bias)]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def buffers(self):
        out = self.stem_bn.buffers("stem_bn")
        for i, block in enumerate(self.blocks):
            out += block.buffers(f"block{i}")
        return out

    def named_tensors(self):
        return [(n, t.data) for n, t in self.named_parameters()] + self.buffers()


class LinearClassifier(Classifier):
    """logits = W^T (x / 255) + b over flattened pixels."""

    def __init__(self, weight, bias, input_shape=None):
        super().__init__()
        weight = np.asarray(weight, dtype=np.float64)
        self.input_shape = tuple(input_shape) if input_shape is not None else (weight.shape[0],)
        if int(np.prod(self.input_shape)) != weight.shape[0]:
            raise ShapeError("weight rows must equal the pixel count")
        self.n_classes = weight.shape[1]
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)

    def logits_graph(self, x):
        return x.reshape((x.shape[0], -1)) @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def named_tensors(self):
        return [("weight", self.weight.data), ("bias", self.bias.data)]
