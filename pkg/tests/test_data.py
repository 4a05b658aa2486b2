import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from deepvib.data import (
    Dataset,
    FormatError,
    LabelRangeError,
    load_feature_csv,
    load_idx,
    read_idx,
    scale_to_pm1,
    synth_blobs,
    unscale_from_pm1,
    write_idx,
)
from deepvib.nn import ConfigError
from deepvib.numcore import Rng


def _images(path, n, rows=28, cols=28, fill=0, magic=0x803, extra=b""):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", magic, n, rows, cols))
        fh.write(bytes([fill]) * (n * rows * cols))
        fh.write(extra)


def _labels(path, labels, magic=0x801):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", magic, len(labels)))
        fh.write(bytes(labels))


def test_idx_header_and_shape(tmp_path):
    _images(tmp_path / "i", 10000, fill=7)
    _labels(tmp_path / "l", [i % 10 for i in range(10000)])
    head = (tmp_path / "i").read_bytes()[:4]
    assert head == b"\x00\x00\x08\x03"
    d = load_idx(tmp_path / "i", tmp_path / "l")
    assert d.inputs.shape == (10000, 784) and np.all(d.inputs == 7.0)
    assert np.bincount(d.labels).tolist() == [1000] * 10


def test_idx_gzip_roundtrip(tmp_path):
    arr = Rng(0).integers(0, 256, (3, 4, 5)).astype(np.uint8)
    write_idx(tmp_path / "a", arr)
    (tmp_path / "a.gz").write_bytes(gzip.compress((tmp_path / "a").read_bytes()))
    hdr, back = read_idx(tmp_path / "a.gz")
    assert hdr.dims == (3, 4, 5) and np.array_equal(back, arr)


def test_idx_bad_magic(tmp_path):
    _images(tmp_path / "i", 2, magic=0x802)
    with pytest.raises(FormatError, match="offset 0"):
        read_idx(tmp_path / "i")


def test_idx_truncated(tmp_path):
    _images(tmp_path / "i", 2)
    data = (tmp_path / "i").read_bytes()
    (tmp_path / "t").write_bytes(data[:-10])
    with pytest.raises(FormatError, match="offset"):
        read_idx(tmp_path / "t")
    (tmp_path / "h").write_bytes(data[:6])
    with pytest.raises(FormatError, match="offset 4"):
        read_idx(tmp_path / "h")


def test_idx_trailing_bytes(tmp_path):
    _images(tmp_path / "i", 2, extra=b"\x00\x01")
    with pytest.raises(FormatError, match="trailing"):
        read_idx(tmp_path / "i")


def test_idx_count_mismatch(tmp_path):
    _images(tmp_path / "i", 3)
    _labels(tmp_path / "l", [0, 1])
    with pytest.raises(FormatError, match="offset 4"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_label_out_of_range(tmp_path):
    _images(tmp_path / "i", 2)
    _labels(tmp_path / "l", [3, 10])
    with pytest.raises(LabelRangeError, match="offset 9"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_wrong_kind(tmp_path):
    _labels(tmp_path / "l", [0, 1])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "l", tmp_path / "l")


def test_scale_endpoints():
    d = Dataset(np.array([[0.0, 255.0, 128.0]]), np.array([0]), 1)
    out = scale_to_pm1(d).inputs[0]
    assert out[0] == -1.0 and out[1] == 1.0
    assert out[2] == pytest.approx(0.00392157, abs=1e-8)


@given(arrays(np.float64, (4, 3), elements=st.integers(0, 255).map(float)))
def test_scale_invertible(x):
    d = Dataset(x, np.zeros(4, dtype=int), 1)
    s = scale_to_pm1(d).inputs
    assert np.all((-1 <= s) & (s <= 1))
    np.testing.assert_allclose(unscale_from_pm1(s), x, atol=1e-12)


def test_dataset_invariants():
    with pytest.raises(LabelRangeError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(FormatError):
        Dataset(np.zeros((2, 3)), np.array([0]), 3)
    with pytest.raises(FormatError):
        Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 3)


def _csv(tmp_path, text, name="f.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_feature_csv_basic(tmp_path):
    d = load_feature_csv(_csv(tmp_path, "0.1,0.2,0.3,0.4,1\n1,2,3,4,0\n-1,-2,-3,-4e-1,2\n"), 4)
    assert d.inputs.shape == (3, 4) and d.labels.tolist() == [1, 0, 2] and d.n_classes == 3
    assert d.inputs[2, 3] == -0.4


def test_feature_csv_header_skipped(tmp_path):
    d = load_feature_csv(_csv(tmp_path, "a,b,label\n1.5,2,0\n3,4,1\n"))
    assert d.inputs.tolist() == [[1.5, 2.0], [3.0, 4.0]]


def test_feature_csv_dim_mismatch(tmp_path):
    with pytest.raises(ConfigError):
        load_feature_csv(_csv(tmp_path, "1,2,0\n3,4,1\n"), expected_dim=3)


def test_feature_csv_ragged(tmp_path):
    with pytest.raises(FormatError, match=":3:"):
        load_feature_csv(_csv(tmp_path, "1,2,0\n3,4,1\n5,1\n"))


def test_feature_csv_non_numeric(tmp_path):
    with pytest.raises(FormatError, match=":2:"):
        load_feature_csv(_csv(tmp_path, "1,2,0\n3,x,1\n"))
    with pytest.raises(FormatError, match="integer"):
        load_feature_csv(_csv(tmp_path, "1,2,0.5\n", "g.csv"))


def _linear_fit_error(train, test):
    """Least-squares one-vs-rest linear classifier, test error."""
    X = np.hstack([train.inputs, np.ones((len(train), 1))])
    T = np.eye(train.n_classes)[train.labels]
    W, *_ = np.linalg.lstsq(X, T, rcond=None)
    Xt = np.hstack([test.inputs, np.ones((len(test), 1))])
    return float(np.mean((Xt @ W).argmax(1) != test.labels))


def test_synth_separable_two_blobs():
    r = Rng(0)
    tr = synth_blobs(r.substream("a"), 2, 500, 2, 10.0)
    te = synth_blobs(r.substream("b"), 2, 500, 2, 10.0)
    # two unit-variance blobs 2s apart: Bayes error Phi(-s)
    bayes = norm.cdf(-10.0 * 2 / 2)
    assert bayes < 1e-20
    assert _linear_fit_error(tr, te) < 0.01
    assert np.all(np.abs(tr.inputs) <= 1)


def test_synth_zero_separation_is_chance():
    r = Rng(1)
    tr = synth_blobs(r.substream("a"), 4, 2000, 3, 0.0)
    te = synth_blobs(r.substream("b"), 4, 2000, 3, 0.0)
    assert abs(_linear_fit_error(tr, te) - 0.75) < 0.03


def test_synth_reproducible():
    a = synth_blobs(Rng(5), 3, 10, 4, 2.0)
    b = synth_blobs(Rng(5), 3, 10, 4, 2.0)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    with pytest.raises(ConfigError):
        synth_blobs(Rng(5), 0, 10, 4, 2.0)


def test_bundled_mnist_split():
    pytest.importorskip("mlxtend")
    from deepvib.data import mnist_bundled, mnist_desk_split
    full = mnist_bundled()
    assert full.inputs.shape == (5000, 784)
    assert full.inputs.min() >= 0 and full.inputs.max() <= 255
    tr, te = mnist_desk_split()
    assert len(tr) == 4000 and len(te) == 1000
    assert np.bincount(te.labels).tolist() == [100] * 10
    assert tr.inputs.min() >= -1 and tr.inputs.max() <= 1


FULL = os.environ.get("VIB_FULL_MNIST_DIR")


@pytest.mark.skipif(not FULL, reason="set VIB_FULL_MNIST_DIR to the canonical MNIST IDX files")
def test_canonical_mnist_test_split():
    d = Path(FULL)
    pick = lambda stem: next(p for p in (d / stem, d / f"{stem}.gz") if p.exists())
    data = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"), split="test")
    counts = np.bincount(data.labels)
    assert len(data) == 10000 and counts[0] == 980 and counts[1] == 1135
