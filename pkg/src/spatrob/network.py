"""A small trainable convolutional classifier with exact gradients.

The network is a plain record of layer descriptions plus weight arrays;
forward/backward run on torch CPU kernels but every public interface
consumes and produces numpy arrays. Weight initialization is drawn from a
seeded numpy generator so checkpoints are reproducible independent of the
torch RNG. Updates are pure: ``sgd_step`` returns a new Network.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .validation import as_image, as_image_batch, check_label

__all__ = [
    "LayerSpec",
    "Network",
    "TrainConfig",
    "build_mnist_net",
    "forward",
    "predict",
    "cross_entropy",
    "cross_entropy_batch",
    "softmax",
    "backward",
    "sgd_step",
]

# fixed chunk size for batched evaluation; keeps memory bounded and makes
# batched results independent of how callers assemble their candidate sets
EVAL_CHUNK = 128


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # 'conv' | 'relu' | 'maxpool' | 'gap' | 'dropout'
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    rate: float = 0.0  # dropout only; inactive outside training

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "rate": self.rate,
        }

    @staticmethod
    def from_json(d: dict) -> "LayerSpec":
        return LayerSpec(**d)


class _QueryMeter:
    """Thread-safe forward/gradient call accounting, shared across sgd clones."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward_queries = 0
        self.grad_queries = 0

    def add_forward(self, n: int):
        with self._lock:
            self.forward_queries += n

    def add_grad(self, n: int):
        with self._lock:
            self.grad_queries += n

    def reset(self):
        with self._lock:
            self.forward_queries = 0
            self.grad_queries = 0


class Network:
    """Ordered conv/relu/pool/gap layers with weights, ending in class logits."""

    def __init__(self, layers, weights, num_classes, dtype=np.float32, momentum_buffers=None, meter=None):
        self.layers = tuple(layers)
        self.num_classes = int(num_classes)
        self.np_dtype = np.dtype(dtype)
        self.torch_dtype = torch.float64 if self.np_dtype == np.float64 else torch.float32
        self.weights = [
            (
                torch.as_tensor(np.asarray(w), dtype=self.torch_dtype),
                torch.as_tensor(np.asarray(b), dtype=self.torch_dtype),
            )
            for w, b in weights
        ]
        self.momentum_buffers = momentum_buffers
        self.meter = meter if meter is not None else _QueryMeter()
        self._validate()

    def _validate(self):
        convs = [l for l in self.layers if l.kind == "conv"]
        if len(convs) != len(self.weights):
            raise ValueError(
                f"{len(convs)} conv layers but {len(self.weights)} weight pairs"
            )
        channels = convs[0].in_channels if convs else 0
        for spec, (w, b) in zip(convs, self.weights):
            expect = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            if tuple(w.shape) != expect or tuple(b.shape) != (spec.out_channels,):
                raise ValueError(f"weight shape {tuple(w.shape)} does not match {expect}")
            if spec.in_channels != channels:
                raise ValueError(
                    f"conv expects {spec.in_channels} input channels, previous layer emits {channels}"
                )
            channels = spec.out_channels
        for w, b in self.weights:
            if not (torch.isfinite(w).all() and torch.isfinite(b).all()):
                raise ValueError("network weights must be finite")
        if self.layers and self.layers[-1].kind != "gap":
            raise ValueError("network must end in a global-average-pool layer")

    @property
    def in_channels(self) -> int:
        return next(l.in_channels for l in self.layers if l.kind == "conv")

    def parameter_count(self) -> int:
        return sum(int(w.numel() + b.numel()) for w, b in self.weights)

    def weight_arrays(self):
        """Weights as numpy arrays in layer order: weight, bias, weight, bias ..."""
        out = []
        for w, b in self.weights:
            out.append(w.numpy().copy())
            out.append(b.numpy().copy())
        return out

    # -- tensor plumbing ----------------------------------------------------

    def _to_tensor(self, images: np.ndarray) -> torch.Tensor:
        arr = np.ascontiguousarray(images, dtype=self.np_dtype)
        return torch.from_numpy(arr)

    def _forward_tensor(self, x: torch.Tensor, training: bool = False) -> torch.Tensor:
        it = iter(self.weights)
        for spec in self.layers:
            if spec.kind == "conv":
                w, b = next(it)
                x = F.conv2d(x, w, b, stride=spec.stride, padding=spec.padding)
            elif spec.kind == "relu":
                x = F.relu(x)
            elif spec.kind == "maxpool":
                x = F.max_pool2d(x, spec.kernel, stride=spec.kernel)
            elif spec.kind == "dropout":
                # regularization only; inference treats it as identity
                x = F.dropout(x, spec.rate, training=training)
            elif spec.kind == "gap":
                x = x.mean(dim=(2, 3))
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        return x

    def _check_batch(self, images: np.ndarray) -> np.ndarray:
        images = as_image_batch(images)
        if images.shape[1] != self.in_channels:
            raise ValueError(
                f"network expects {self.in_channels} channels, got {images.shape[1]}"
            )
        return images

    # -- inference ----------------------------------------------------------

    def logits_batch(self, images: np.ndarray) -> np.ndarray:
        """Logits for a batch, evaluated in fixed-size chunks. (n, classes) float64."""
        images = self._check_batch(images)
        self.meter.add_forward(images.shape[0])
        outs = []
        with torch.no_grad():
            for lo in range(0, images.shape[0], EVAL_CHUNK):
                t = self._to_tensor(images[lo : lo + EVAL_CHUNK])
                outs.append(self._forward_tensor(t).numpy().astype(np.float64))
        return np.concatenate(outs, axis=0)

    def logits(self, image: np.ndarray) -> np.ndarray:
        """Canonical single-image logits; the reference for every recorded loss."""
        image = as_image(image)
        if image.shape[0] != self.in_channels:
            raise ValueError(
                f"network expects {self.in_channels} channels, got {image.shape[0]}"
            )
        self.meter.add_forward(1)
        with torch.no_grad():
            t = self._to_tensor(image[None])
            return self._forward_tensor(t).numpy().astype(np.float64)[0]

    # -- gradients ----------------------------------------------------------

    def input_gradient_batch(self, images: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
        """Per-example cross-entropy input gradients. Returns (logits, grads)."""
        images = self._check_batch(images)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must be one class index per image")
        self.meter.add_grad(images.shape[0])
        logits_out, grads_out = [], []
        for lo in range(0, images.shape[0], EVAL_CHUNK):
            t = self._to_tensor(images[lo : lo + EVAL_CHUNK]).requires_grad_(True)
            y = torch.from_numpy(labels[lo : lo + EVAL_CHUNK])
            logits = self._forward_tensor(t)
            loss = F.cross_entropy(logits, y, reduction="sum")
            (g,) = torch.autograd.grad(loss, t)
            logits_out.append(logits.detach().numpy().astype(np.float64))
            grads_out.append(g.numpy().astype(np.float64))
        return np.concatenate(logits_out), np.concatenate(grads_out)

    def loss_and_weight_grads(self, images: np.ndarray, labels, dropout_seed: int | None = None):
        """Mean cross-entropy over the batch plus gradients for every weight.

        Training-mode pass: dropout layers are active, seeded by
        ``dropout_seed`` for reproducibility (identity when the net has no
        dropout layers).
        """
        images = self._check_batch(images)
        labels = np.asarray(labels, dtype=np.int64)
        self.meter.add_grad(images.shape[0])
        if dropout_seed is not None:
            torch.manual_seed(dropout_seed)
        t = self._to_tensor(images)
        y = torch.from_numpy(labels)
        params = [p for pair in self.weights for p in pair]
        for p in params:
            p.requires_grad_(True)
        logits = self._forward_tensor(t, training=True)
        loss = F.cross_entropy(logits, y, reduction="mean")
        grads = torch.autograd.grad(loss, params)
        for p in params:
            p.requires_grad_(False)
        paired = [(grads[i], grads[i + 1]) for i in range(0, len(grads), 2)]
        return float(loss.item()), paired


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs. lr decays by lr_decay every decay_every_steps if set.

    ``dropout`` regularizes the classifier head during training only; zero
    keeps the network the plain conv stack.
    """

    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    init_seed: int = 0
    data_seed: int = 0
    lr_decay: float = 1.0
    decay_every_steps: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    def lr_at(self, step_index: int) -> float:
        if self.decay_every_steps:
            return self.lr * self.lr_decay ** (step_index // self.decay_every_steps)
        return self.lr


MNIST_LAYERS = (
    LayerSpec("conv", kernel=5, padding=0, in_channels=1, out_channels=32),
    LayerSpec("relu"),
    LayerSpec("maxpool", kernel=2),
    LayerSpec("conv", kernel=5, padding=0, in_channels=32, out_channels=64),
    LayerSpec("relu"),
    LayerSpec("maxpool", kernel=2),
    LayerSpec("conv", kernel=3, padding=1, in_channels=64, out_channels=128),
    LayerSpec("relu"),
    LayerSpec("conv", kernel=3, padding=1, in_channels=128, out_channels=256),
    LayerSpec("relu"),
    LayerSpec("conv", kernel=1, padding=0, in_channels=256, out_channels=10),
    LayerSpec("gap"),
)


def he_init_weights(layers, seed: int, dtype=np.float32):
    """He fan-in normal conv weights, zero biases, from a seeded numpy RNG."""
    rng = np.random.default_rng(seed)
    weights = []
    for spec in layers:
        if spec.kind != "conv":
            continue
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal(
            (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        ) * std
        b = np.zeros(spec.out_channels)
        weights.append((w.astype(dtype), b.astype(dtype)))
    return weights


def build_mnist_net(seed: int, dtype=np.float32, dropout: float = 0.0) -> Network:
    """The 10-class fully-convolutional classifier used throughout.

    conv5x5x32 / pool2 / conv5x5x64 / pool2 / conv3x3x128 / conv3x3x256 /
    conv1x1x10 / global average pool. Works on 28x28 inputs and any larger
    square canvas (the pooling head absorbs spatial size). A nonzero
    ``dropout`` inserts a training-only dropout layer before the 1x1
    classifier head, the usual regularizer for this stem.
    """
    layers = MNIST_LAYERS
    if dropout > 0:
        head = MNIST_LAYERS.index(
            LayerSpec("conv", kernel=1, padding=0, in_channels=256, out_channels=10)
        )
        layers = MNIST_LAYERS[:head] + (LayerSpec("dropout", rate=dropout),) + MNIST_LAYERS[head:]
    return Network(layers, he_init_weights(layers, seed, dtype), 10, dtype)


def forward(net: Network, image: np.ndarray) -> np.ndarray:
    """Logits for one (c, h, w) image."""
    return net.logits(image)


def predict(net: Network, image: np.ndarray) -> int:
    """Argmax class; ties break toward the lowest class index."""
    return int(np.argmax(forward(net, image)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label: int) -> float:
    """Per-example cross-entropy in nats, max-subtraction stabilized."""
    z = np.asarray(logits, dtype=np.float64)
    label = check_label(label, z.shape[-1])
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) - (z[label] - m))


def cross_entropy_batch(logits: np.ndarray, labels) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = z.max(axis=1)
    lse = np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - (z[np.arange(z.shape[0]), labels] - m)


def backward(net: Network, image: np.ndarray, label: int):
    """Loss plus exact reverse-mode gradients for the weights and the input.

    Returns (loss, grad_weights, grad_image) where grad_weights is a list of
    (d_weight, d_bias) numpy pairs aligned with the conv layers.
    """
    image = as_image(image)
    label = check_label(label, net.num_classes)
    if image.shape[0] != net.in_channels:
        raise ValueError(
            f"network expects {net.in_channels} channels, got {image.shape[0]}"
        )
    t = net._to_tensor(image[None]).requires_grad_(True)
    y = torch.tensor([label])
    params = [p for pair in net.weights for p in pair]
    for p in params:
        p.requires_grad_(True)
    logits = net._forward_tensor(t)
    loss = F.cross_entropy(logits, y)
    grads = torch.autograd.grad(loss, [t] + params)
    for p in params:
        p.requires_grad_(False)
    net.meter.add_grad(1)
    grad_image = grads[0].numpy().astype(np.float64)[0]
    rest = grads[1:]
    grad_weights = [
        (rest[i].numpy().astype(np.float64), rest[i + 1].numpy().astype(np.float64))
        for i in range(0, len(rest), 2)
    ]
    return float(loss.item()), grad_weights, grad_image


def sgd_step(net: Network, grads, config: TrainConfig, step_index: int) -> Network:
    """Classical momentum update: v <- m v + g, w <- w - lr v. Returns a new net."""
    lr = config.lr_at(step_index)
    mu = config.momentum
    buffers = net.momentum_buffers
    if buffers is None:
        buffers = [
            (torch.zeros_like(w), torch.zeros_like(b)) for w, b in net.weights
        ]
    new_weights, new_buffers = [], []
    for (w, b), (gw, gb), (vw, vb) in zip(net.weights, grads, buffers):
        gw_t = torch.as_tensor(np.asarray(gw), dtype=net.torch_dtype)
        gb_t = torch.as_tensor(np.asarray(gb), dtype=net.torch_dtype)
        if tuple(gw_t.shape) != tuple(w.shape) or tuple(gb_t.shape) != tuple(b.shape):
            raise ValueError("gradient shapes do not match network weights")
        vw2 = mu * vw + gw_t
        vb2 = mu * vb + gb_t
        new_weights.append((w - lr * vw2, b - lr * vb2))
        new_buffers.append((vw2, vb2))
    return Network(
        net.layers,
        [(w.numpy(), b.numpy()) for w, b in new_weights],
        net.num_classes,
        net.np_dtype,
        momentum_buffers=new_buffers,
        meter=net.meter,
    )
