import os
import pathlib
import struct

import numpy as np
import pytest

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent


def mnist_dir():
    env = os.environ.get("SPATROB_MNIST_DIR")
    candidates = [pathlib.Path(env)] if env else []
    candidates.append(REPO_ROOT / "data" / "mnist")
    for c in candidates:
        if (c / "t10k-images-idx3-ubyte.gz").exists() or (
            c / "t10k-images-idx3-ubyte"
        ).exists():
            return c
    return None


def mnist_file(directory, stem):
    for name in (f"{stem}.gz", stem):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(stem)


requires_mnist = pytest.mark.skipif(
    mnist_dir() is None,
    reason="MNIST IDX files not found; set SPATROB_MNIST_DIR or place them in data/mnist",
)


@pytest.fixture(scope="session")
def mnist_test_set():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found; set SPATROB_MNIST_DIR")
    from spatrob.data_io import load_idx

    return load_idx(
        mnist_file(d, "t10k-images-idx3-ubyte"), mnist_file(d, "t10k-labels-idx1-ubyte")
    )


def write_idx_pair(tmpdir, images_u8, labels_u8):
    """Write a raw IDX image/label pair; images_u8 is (n, rows, cols) uint8."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    img_path = pathlib.Path(tmpdir) / "images-idx3-ubyte"
    lab_path = pathlib.Path(tmpdir) / "labels-idx1-ubyte"
    img_path.write_bytes(struct.pack(">IIII", 2051, n, rows, cols) + images_u8.tobytes())
    lab_path.write_bytes(struct.pack(">II", 2049, n) + labels_u8.tobytes())
    return img_path, lab_path


def small_net(seed=0, classes=10, in_channels=1):
    """A fast 2-conv classifier for unit tests."""
    from spatrob.network import LayerSpec, Network, he_init_weights

    layers = (
        LayerSpec("conv", kernel=3, padding=1, in_channels=in_channels, out_channels=8),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2),
        LayerSpec("conv", kernel=1, in_channels=8, out_channels=classes),
        LayerSpec("gap"),
    )
    return Network(layers, he_init_weights(layers, seed), classes)


def constant_net(classes=10, const_class=3):
    """Input-independent model that always predicts const_class."""
    from spatrob.network import LayerSpec, Network

    layers = (
        LayerSpec("conv", kernel=1, in_channels=1, out_channels=classes),
        LayerSpec("gap"),
    )
    w = np.zeros((classes, 1, 1, 1))
    b = np.zeros(classes)
    b[const_class] = 5.0
    return Network(layers, [(w, b)], classes, np.float64)


def fit_small_net(images, labels, seed=1, epochs=12, lr=0.3, batch=32):
    """Tiny direct SGD loop for building decisive test models.

    The hot learning rate compensates for the gradient attenuation of the
    average-pooling head at this scale.
    """
    from spatrob.network import LayerSpec, Network, TrainConfig, he_init_weights, sgd_step

    layers = (
        LayerSpec("conv", kernel=3, padding=1, in_channels=1, out_channels=16),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2),
        LayerSpec("conv", kernel=3, padding=1, in_channels=16, out_channels=32),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2),
        LayerSpec("conv", kernel=1, in_channels=32, out_channels=10),
        LayerSpec("gap"),
    )
    net = Network(layers, he_init_weights(layers, seed), 10)
    cfg = TrainConfig(lr=lr, momentum=0.9, batch_size=batch, epochs=epochs)
    rng = np.random.default_rng(0)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for lo in range(0, len(order), batch):
            idx = order[lo : lo + batch]
            _, grads = net.loss_and_weight_grads(images[idx], labels[idx])
            net = sgd_step(net, grads, cfg, step)
            step += 1
    return net


@pytest.fixture(scope="session")
def digits16():
    """Small synthetic 10-class set at 16x16 plus a decisively trained net."""
    images, labels = synthetic_digits(320, seed=5, size=16)
    net = fit_small_net(images, labels)
    preds = np.argmax(net.logits_batch(images), axis=1)
    assert np.mean(preds == labels) > 0.95
    return net, images, labels


def synthetic_digits(n, seed=0, size=28):
    """Tiny procedural 10-class image set for fast training tests.

    Each class is a distinct blocky glyph pattern with positional jitter,
    enough structure for a conv net to overfit or separate quickly.
    """
    rng = np.random.default_rng(seed)
    base = np.zeros((10, size, size), dtype=np.float32)
    lo, hi = max(2, size // 8), max(3, size - size // 3)
    for cls in range(10):
        g = np.random.default_rng(1000 + cls)
        for _ in range(4):
            r0, c0 = g.integers(lo, hi, size=2)
            h, w = g.integers(2, max(3, size // 4) + 1, size=2)
            base[cls, r0 : min(r0 + h, size - 2), c0 : min(c0 + w, size - 2)] = 1.0
    images = np.empty((n, 1, size, size), dtype=np.float32)
    labels = rng.integers(0, 10, size=n)
    for i, cls in enumerate(labels):
        shift_r, shift_c = rng.integers(-2, 3, size=2)
        img = np.roll(base[cls], (shift_r, shift_c), axis=(0, 1))
        noise = rng.random((size, size)).astype(np.float32) * 0.15
        images[i, 0] = np.clip(img * rng.uniform(0.7, 1.0) + noise, 0.0, 1.0)
    return images, labels
