"""Fitting one-vs-all image classification tasks with low tensor rank predictors.

Each binarized 28x28 image indexes one entry of an order-784 tensor with
dimension two per mode, so a predictor is a tensor of that shape. Fitting a
rank-k CP factorization to the labels measures how well tensors of rank at
most k explain the data.
"""
import csv
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .optimizer import AdamConfig, DivergenceError, adam_train
from .seeding import rng as _rng

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
VARIANTS = ("original", "rand_image", "rand_label")
THRESHOLD = 128
LABEL_SCALE = 2.0
INIT_MEAN = 1.0
INIT_STD = 1e-3


class IDXFormatError(ValueError):
    pass


def _read_idx(path, magic, ndim):
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXFormatError(f"{path}: truncated header at byte offset {len(data)}")
    got = struct.unpack(">i", data[:4])[0]
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic number {got}, expected {magic}")
    dims = struct.unpack(">" + "i" * ndim, data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) < expected:
        raise IDXFormatError(f"{path}: truncated at byte offset {len(data)}, "
                             f"expected {expected} bytes")
    if len(data) > expected:
        raise IDXFormatError(f"{path}: {len(data) - expected} trailing bytes after offset {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


@dataclass
class Split:
    """Images as ``(n, 784)`` uint8 rows and integer class labels."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    test: Split


def load_idx(images_path, labels_path):
    """Read an image file and a label file in IDX format into a :class:`Split`."""
    for p in (images_path, labels_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"IDX file not found: {p}")
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IDXFormatError("labels must lie in 0..9")
    return Split(images.reshape(images.shape[0], -1), labels.astype(np.int64))


def load_dataset(directory, prefix_train="train", prefix_test="t10k"):
    d = Path(directory)
    return Dataset(
        load_idx(d / f"{prefix_train}-images-idx3-ubyte", d / f"{prefix_train}-labels-idx1-ubyte"),
        load_idx(d / f"{prefix_test}-images-idx3-ubyte", d / f"{prefix_test}-labels-idx1-ubyte"),
    )


def binarize(images, threshold=THRESHOLD):
    """Round grayscale pixels scaled to [0, 1]: 1 iff ``pixel >= threshold``."""
    return (np.asarray(images) >= threshold).astype(np.uint8)


def binarize_dataset(ds, threshold=THRESHOLD):
    return Dataset(Split(binarize(ds.train.X, threshold), ds.train.y),
                   Split(binarize(ds.test.X, threshold), ds.test.y))


def make_variant(ds, variant, seed):
    """Return the original data, random binary images, or shuffled labels.

    Label permutations are drawn independently for the train and test splits.
    """
    if variant == "original":
        return ds
    if variant == "rand_image":
        out = []
        for k, split in enumerate((ds.train, ds.test)):
            gen = _rng(seed, "variant", 0, k)
            out.append(Split(gen.integers(0, 2, split.X.shape, dtype=np.uint8), split.y))
        return Dataset(*out)
    if variant == "rand_label":
        out = []
        for k, split in enumerate((ds.train, ds.test)):
            gen = _rng(seed, "variant", 1, k)
            out.append(Split(split.X, split.y[gen.permutation(len(split))]))
        return Dataset(*out)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def subsample(ds, n_train, seed):
    """Uniformly chosen subset of `n_train` training examples (order kept)."""
    if n_train is None or n_train >= len(ds.train):
        return ds
    gen = _rng(seed, "shuffle", 0)
    keep = np.sort(gen.choice(len(ds.train), size=n_train, replace=False))
    return Dataset(Split(ds.train.X[keep], ds.train.y[keep]), ds.test)


@dataclass
class ProbeTask:
    variant: str
    digit: int
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray


def one_vs_all(ds, digit, variant="original"):
    return ProbeTask(variant, int(digit),
                     np.ascontiguousarray(ds.train.X), (ds.train.y == digit).astype(np.float64),
                     np.ascontiguousarray(ds.test.X), (ds.test.y == digit).astype(np.float64))


def predict_binary_cp(params, X):
    out = np.empty(X.shape[0])
    return _kernels.binary_cp_predict(params, X, out)


def clipped_mse(pred, y):
    return float(np.mean(np.minimum((pred - y) ** 2, 1.0)))


@dataclass
class FitResult:
    params: np.ndarray
    train_mse: float
    test_mse_clipped: float
    iters: int


def fit_rank_k(task, k, config=None, seed=0):
    """Fit a rank-`k` CP predictor of order 784 with mini-batch Adam.

    Weights start at ``N(1, 1e-3**2)``. Training targets are twice the 0/1
    labels; reported errors use predictions divided by two against the
    original labels, with per-example test errors clipped at one.
    """
    if k < 1:
        raise ValueError("rank must be at least 1")
    config = config or AdamConfig()
    n_modes = task.train_X.shape[1]
    key = (VARIANTS.index(task.variant), task.digit, k)
    gen = _rng(seed, "init", *key)
    params = INIT_MEAN + INIT_STD * gen.standard_normal((n_modes, 2, k))
    targets = LABEL_SCALE * task.train_y
    grad = np.zeros_like(params)

    def objective(ps, batch):
        grad[:] = 0.0
        value = _kernels.binary_cp_value_grad(ps[0], task.train_X, batch.astype(np.int64),
                                              targets, grad)
        return value, [grad]

    _, records = adam_train([params], objective, len(task.train_y), config,
                            _rng(seed, "shuffle", *key))
    train_pred = predict_binary_cp(params, task.train_X) / LABEL_SCALE
    test_pred = predict_binary_cp(params, task.test_X) / LABEL_SCALE
    if not (np.all(np.isfinite(train_pred)) and np.all(np.isfinite(test_pred))):
        raise DivergenceError(f"non-finite predictions for digit {task.digit}, k={k}")
    return FitResult(params, float(np.mean((train_pred - task.train_y) ** 2)),
                     clipped_mse(test_pred, task.test_y), records[-1].iter)


def ridge_baseline(task, ridge_alpha=0.5):
    """Ridge regression on pixels with an unpenalized intercept.

    Returns ``(train_mse, clipped_test_mse)``.
    """
    X = task.train_X.astype(np.float64)
    y = task.train_y
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    A = Xc.T @ Xc
    A[np.diag_indices_from(A)] += ridge_alpha
    w = np.linalg.solve(A, Xc.T @ (y - y_mean))
    b = y_mean - x_mean @ w
    train_pred = X @ w + b
    test_pred = task.test_X.astype(np.float64) @ w + b
    return float(np.mean((train_pred - y) ** 2)), clipped_mse(test_pred, task.test_y)


RESULT_COLUMNS = ["variant", "digit", "k", "train_mse", "test_mse_clipped", "iters"]
SUMMARY_COLUMNS = ["variant", "k", "train_mean", "train_std", "test_mean", "test_std"]


@dataclass
class ProbeSpec:
    """Everything a single fitting job needs besides the data."""

    variant: str
    digit: int
    k: int
    seed: int
    adam: AdamConfig


_WORKER_DATA = {}


def _init_worker(datasets):
    _WORKER_DATA.update(datasets)


def _run_job(spec):
    ds = _WORKER_DATA[spec.variant]
    start = time.perf_counter()
    if spec.k == 0:
        train_mse, test_mse = ridge_baseline(one_vs_all(ds, spec.digit, spec.variant))
        iters = 0
    else:
        res = fit_rank_k(one_vs_all(ds, spec.digit, spec.variant), spec.k, spec.adam, spec.seed)
        train_mse, test_mse, iters = res.train_mse, res.test_mse_clipped, res.iters
    row = {"variant": spec.variant, "digit": spec.digit, "k": spec.k,
           "train_mse": train_mse, "test_mse_clipped": test_mse, "iters": iters}
    return row, time.perf_counter() - start


def prepare_variants(ds, variants, seed, n_train=None):
    """Binarize, subsample and build every requested variant of `ds`."""
    binary = subsample(binarize_dataset(ds), n_train, seed)
    return {v: make_variant(binary, v, seed) for v in variants}


def run_probe(ds, variants=VARIANTS, digits=range(10), ranks=range(1, 16), seed=0,
              adam=None, n_train=None, jobs=1, ridge=False):
    """Fit every (variant, digit, k) task.

    ``k = 0`` rows hold the ridge baseline when `ridge` is set. Results are
    returned in a fixed order regardless of `jobs`.

    Returns
    -------
    rows : list of dict
        One row per task, keyed by :data:`RESULT_COLUMNS`.
    timings : list of float
        Wall-clock seconds per task, aligned with `rows`.
    """
    adam = adam or AdamConfig()
    datasets = prepare_variants(ds, variants, seed, n_train)
    ks = ([0] if ridge else []) + [int(k) for k in ranks]
    specs = [ProbeSpec(v, int(d), k, seed, adam) for v in variants for d in digits for k in ks]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(datasets,)) as ex:
            results = list(ex.map(_run_job, specs))
    else:
        _init_worker(datasets)
        results = [_run_job(s) for s in specs]
        _WORKER_DATA.clear()
    for (row, secs) in results:
        logger.info("%s digit=%d k=%d train=%.4g test=%.4g (%.1fs)", row["variant"],
                    row["digit"], row["k"], row["train_mse"], row["test_mse_clipped"], secs)
    return [r for r, _ in results], [t for _, t in results]


def summarize(rows):
    """Mean and standard deviation over digits per (variant, k)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["variant"], r["k"]), []).append(r)
    out = []
    for (variant, k), rs in groups.items():
        tr = np.array([r["train_mse"] for r in rs])
        te = np.array([r["test_mse_clipped"] for r in rs])
        out.append({"variant": variant, "k": k, "train_mean": float(tr.mean()),
                    "train_std": float(tr.std()), "test_mean": float(te.mean()),
                    "test_std": float(te.std())})
    return out


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_rows(rows, columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def nonincreasing_in_k(rows, slack=1e-4):
    """Tasks whose train error increases by more than `slack` as k grows."""
    by_task = {}
    for r in rows:
        if r["k"] > 0:
            by_task.setdefault((r["variant"], r["digit"]), []).append((r["k"], r["train_mse"]))
    bad = []
    for key, vals in by_task.items():
        vals.sort()
        if any(b[1] > a[1] + slack for a, b in zip(vals, vals[1:])):
            bad.append(key)
    return bad

