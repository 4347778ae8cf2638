"""Shared fixtures.

Real MNIST/CIFAR-10 are optional: tests that need the actual corpora look
under the dataset root (SDBNN_DATA or ./data) and skip with a message when
the files are absent. Format and end-to-end training tests run on
procedurally generated datasets written in the real IDX / CIFAR-10 binary
layouts, so the production loaders are exercised either way.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from sdbnn import data as D
from sdbnn import models as M
from sdbnn.models import BinPolicy


def mnist_micro_spec(policy: BinPolicy | None = None) -> M.ModelSpec:
    """Small 1x28x28 model with one binary block, for fast training tests."""
    p = policy or BinPolicy(asd="sigmoid", wsd=True)
    text = (
        "c1 conv in=1 out=4 k=3 stride=2 pad=1 inputs=input\n"
        "n1 bn c=4 inputs=c1\n"
        "h1 act fn=hardtanh inputs=n1\n"
        "b1 binconv in=4 out=8 k=3 stride=2 pad=1 {policy} inputs=h1\n"
        "n2 bn c=8 inputs=b1\n"
        "g gap inputs=n2\n"
        "fc linear in=8 out=10 inputs=g\n"
    )
    pol = " ".join(f"{k}={v}" for k, v in p.layer_params().items())
    return M.ModelSpec.from_text(text.format(policy=pol))


def _glyph_templates(rng: np.random.Generator, classes: int = 10, side: int = 20) -> np.ndarray:
    """Distinct smooth blob patterns, one per class."""
    templates = np.zeros((classes, side, side), dtype=np.float64)
    yy, xx = np.mgrid[0:side, 0:side]
    for c in range(classes):
        t = np.zeros((side, side))
        for _ in range(4):
            cy, cx = rng.uniform(3, side - 3, 2)
            sy, sx = rng.uniform(1.5, 4.0, 2)
            t += np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        templates[c] = t / t.max()
    return templates


def make_synthetic_digits(n: int, seed: int, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Jittered noisy glyphs: uint8 images [n,1,side,side] and labels [n]."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    templates = _glyph_templates(np.random.default_rng(np.random.PCG64(1234)))
    tside = templates.shape[1]
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = np.zeros((n, 1, side, side), dtype=np.uint8)
    max_off = side - tside
    for i, lab in enumerate(labels):
        oy, ox = rng.integers(0, max_off + 1, 2)
        canvas = np.zeros((side, side))
        canvas[oy : oy + tside, ox : ox + tside] = templates[lab]
        canvas = canvas * rng.uniform(0.7, 1.0) + rng.normal(0, 0.08, (side, side))
        images[i, 0] = (np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    return images, labels


def write_mnist_fixture(root: Path, n_train: int = 2000, n_test: int = 600,
                        seed: int = 7) -> dict[str, str]:
    """Write IDX files in the real format; returns filename->md5 digests."""
    root.mkdir(parents=True, exist_ok=True)
    digests = {}
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = make_synthetic_digits(n, s)
        img_name, lbl_name = D.MNIST_FILES[split]
        img_blob = D.serialize_idx_images(images)
        lbl_blob = D.serialize_idx_labels(labels)
        (root / img_name).write_bytes(img_blob)
        (root / lbl_name).write_bytes(lbl_blob)
        digests[img_name] = hashlib.md5(img_blob).hexdigest()
        digests[lbl_name] = hashlib.md5(lbl_blob).hexdigest()
    return digests


def write_cifar_fixture(root: Path, n_per_batch: int = 200, seed: int = 11) -> Path:
    """Write CIFAR-10-format binary batches with procedural 3-channel images."""
    d = root / D.CIFAR_DIR
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(seed))
    for fname in D.CIFAR_FILES["train"] + D.CIFAR_FILES["test"]:
        labels = rng.integers(0, 10, n_per_batch).astype(np.uint8)
        images = rng.integers(0, 256, (n_per_batch, 3, 32, 32)).astype(np.uint8)
        for i, lab in enumerate(labels):  # class-dependent color bias
            images[i, lab % 3] = np.clip(images[i, lab % 3].astype(int) + 60, 0, 255)
        (d / fname).write_bytes(D.serialize_cifar_batch(images, labels))
    return root


@pytest.fixture(scope="session")
def synth_mnist_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synth-mnist")
    write_mnist_fixture(root)
    return root


@pytest.fixture(scope="session")
def synth_mnist(synth_mnist_root) -> tuple[D.Dataset, D.Dataset]:
    train = D.load(D.DatasetSource(kind="mnist", root=synth_mnist_root, split="train"))
    test = D.load(D.DatasetSource(kind="mnist", root=synth_mnist_root, split="test"))
    return train, test


@pytest.fixture(scope="session")
def synth_cifar_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synth-cifar")
    write_cifar_fixture(root)
    return root


def real_dataset_root(kind: str) -> Path | None:
    """Location of the real corpus, or None when it is not installed."""
    root = D.default_root()
    try:
        if kind == "mnist":
            D._read_raw(root / D.MNIST_FILES["train"][0], None, verify=False)
        else:
            found = False
            for cand in (root / D.CIFAR_DIR / D.CIFAR_FILES["train"][0],
                         root / D.CIFAR_FILES["train"][0]):
                if cand.exists() or cand.with_name(cand.name + ".gz").exists():
                    found = True
            if not found:
                return None
        return root
    except FileNotFoundError:
        return None


def require_real(kind: str) -> Path:
    root = real_dataset_root(kind)
    if root is None:
        pytest.skip(f"real {kind} corpus not present under {D.default_root()} "
                    f"(set {D.DATA_ROOT_ENV}); this environment has no dataset mirror")
    return root
