import numpy as np
import pytest

from qzo.data import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    DataError,
    batch_stream,
    hash_split,
    load_csv,
    make_synthetic,
)


def test_two_gaussians_deterministic():
    a = make_synthetic("two-gaussians", 100, 0.5, seed=3)
    b = make_synthetic("two-gaussians", 100, 0.5, seed=3)
    assert np.array_equal(a.features.a, b.features.a)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.split, b.split)


def test_two_gaussians_class_balance():
    for n in (10, 11, 400):
        ds = make_synthetic("two-gaussians", n, 0.5, seed=1)
        frac = np.mean(ds.labels == 0)
        assert abs(frac - 0.5) <= 0.05


def test_two_gaussians_zero_noise_linearly_separable():
    # independent oracle: first-order gradient descent on a dense logistic
    # model must reach 100% train accuracy when the clusters don't overlap
    ds = make_synthetic("two-gaussians", 60, 0.0, seed=2)
    idx = ds.indices(SPLIT_TRAIN)
    x, y = ds.features.a[idx], ds.labels[idx]
    w = np.zeros((2, 2))
    b = np.zeros(2)
    onehot = np.eye(2)[y]
    for _ in range(500):
        logits = x @ w.T + b
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(y)
        w -= 1.0 * g.T @ x
        b -= 1.0 * g.sum(axis=0)
    acc = np.mean((x @ w.T + b).argmax(axis=1) == y)
    assert acc == 1.0


def test_two_moons_shape_and_balance():
    ds = make_synthetic("two-moons", 200, 0.1, seed=5)
    assert ds.features.cols == 2
    assert abs(np.mean(ds.labels == 0) - 0.5) <= 0.05
    assert ds.task == "classification"


def test_linear_regression_zero_noise_floor():
    # with no label noise a least-squares fit on the raw features is exact,
    # so a scale setting reproducing that fit beats the quantized zero-shot
    from qzo.quant import quantize_scalar
    from qzo.tensor import DenseMatrix
    from qzo.models import QuantizedMLP, loss as model_loss

    ds = make_synthetic("linear-regression", 200, 0.0, seed=4)
    idx = ds.indices(SPLIT_TRAIN)
    x, y = ds.features.a[idx], ds.labels[idx]
    xb = np.column_stack([x, np.ones(len(x))])
    coef, *_ = np.linalg.lstsq(xb, y, rcond=None)
    w_star, b_star = coef[:3], coef[3]

    layer = quantize_scalar(DenseMatrix(w_star.reshape(1, 3)), bits=8, group_size=1)
    layer.bias = np.array([b_star])
    model = QuantizedMLP(layers=[layer], activation="identity", head="mse")
    floor = model_loss(model, (x, y))

    # tune the per-weight scales to recover the least-squares weights exactly
    q = layer.qweights[0].astype(float)
    tuned = np.where(q != 0, np.abs(w_star) / np.maximum(np.abs(q), 1e-300), 0.0)
    layer.scales[:] = tuned
    tuned_loss = model_loss(model, (x, y))
    assert tuned_loss <= floor + 1e-12
    assert tuned_loss < 1e-10


def test_make_synthetic_rejects_tiny_n():
    with pytest.raises(DataError):
        make_synthetic("two-gaussians", 5, 0.1, seed=0)


def test_make_synthetic_unknown_kind():
    with pytest.raises(DataError):
        make_synthetic("spiral", 100, 0.1, seed=0)


def test_hash_split_is_exact_eight_to_two():
    split = hash_split(10, seed=0)
    assert (split == SPLIT_TRAIN).sum() == 8
    assert (split == SPLIT_TEST).sum() == 2


def test_hash_split_deterministic_but_seed_dependent():
    assert np.array_equal(hash_split(50, seed=1), hash_split(50, seed=1))
    assert not np.array_equal(hash_split(50, seed=1), hash_split(50, seed=2))


# -- csv ----------------------------------------------------------------------


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_ten_rows_split(tmp_path):
    rows = "\n".join(f"{i * 0.5},{i * 0.25},{i % 2}" for i in range(10))
    path = _write(tmp_path, "x0,x1,label\n" + rows + "\n")
    ds = load_csv(path, seed=0)
    assert ds.n == 10
    assert (ds.split == SPLIT_TRAIN).sum() == 8
    assert (ds.split == SPLIT_TEST).sum() == 2
    assert ds.task == "classification" and ds.n_classes == 2


def test_load_csv_header_only(tmp_path):
    path = _write(tmp_path, "x0,x1,label\n")
    with pytest.raises(DataError, match="empty dataset"):
        load_csv(path)


def test_load_csv_missing_label_column(tmp_path):
    path = _write(tmp_path, "x0,x1\n1,2\n")
    with pytest.raises(DataError, match="missing column"):
        load_csv(path)


def test_load_csv_non_numeric_cell_reports_location(tmp_path):
    path = _write(tmp_path, "x0,x1,label\n1,2,0\n1,oops,1\n")
    with pytest.raises(DataError, match=r"row 3.*x1"):
        load_csv(path)


def test_load_csv_same_seed_same_split(tmp_path):
    rows = "\n".join(f"{i},{i+1},{i % 2}" for i in range(20))
    path = _write(tmp_path, "x0,x1,label\n" + rows + "\n")
    a = load_csv(path, seed=9)
    b = load_csv(path, seed=9)
    assert np.array_equal(a.split, b.split)


def test_load_csv_real_targets_are_regression(tmp_path):
    path = _write(tmp_path, "x0,label\n1,0.25\n2,0.5\n3,1.5\n4,2.0\n5,0.1\n"
                            "6,0.7\n7,0.9\n8,1.1\n9,1.3\n10,1.7\n")
    ds = load_csv(path)
    assert ds.task == "regression"


# -- batches ------------------------------------------------------------------


def test_batch_stream_deterministic():
    ds = make_synthetic("two-gaussians", 64, 0.5, seed=8)
    a = batch_stream(ds, SPLIT_TRAIN, 8, seed=1)
    b = batch_stream(ds, SPLIT_TRAIN, 8, seed=1)
    for _ in range(12):
        assert np.array_equal(next(a), next(b))


def test_batch_stream_covers_epoch_without_repeats():
    ds = make_synthetic("two-gaussians", 40, 0.5, seed=8)
    train = ds.indices(SPLIT_TRAIN)
    per_epoch = len(train) // 8
    stream = batch_stream(ds, SPLIT_TRAIN, 8, seed=2)
    seen = np.concatenate([next(stream) for _ in range(per_epoch)])
    assert len(np.unique(seen)) == len(seen)
    assert set(seen).issubset(set(train))


def test_batch_stream_rejects_oversized_batch():
    ds = make_synthetic("two-gaussians", 20, 0.5, seed=8)
    with pytest.raises(DataError):
        next(batch_stream(ds, SPLIT_TRAIN, 17, seed=0))
