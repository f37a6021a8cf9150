"""Training loop, metrics, and the two synthetic diagnostic tasks.

train() is plain Adam on MSE with best-val early stopping: evaluate the
validation split after every epoch, keep a copy of the best parameters,
stop after `patience` epochs without improvement, restore the best copy,
and only then touch the test split (exactly once).

The synthetic generators exercise the two failure modes of frequency-only
mappings: case 1 pairs each input window with a continuation that starts
104 steps later (windows drawn with random phase), case 2 is a contiguous
period-24 cosine series whose spectrum lands on bin 14 when read in
windows of 336 and on bin 8 when read in windows of 192.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import ConfigError, NumericError


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ConfigError(f"prediction shape {pred.shape} != target shape {target.shape}")


def mse(pred, target):
    _check_shapes(pred, target)
    d = pred - target
    return float(np.mean(d * d))


def mae(pred, target):
    _check_shapes(pred, target)
    return float(np.mean(np.abs(pred - target)))


@dataclass(frozen=True)
class TrainConfig:
    T: int
    L: int
    epochs: int = 30
    patience: int = 5
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("T", "L", "epochs", "patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    test: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")


def _batch_error_sums(model, batch):
    d = model.forward(batch.X).value - batch.Y
    return float(np.sum(d * d)), float(np.sum(np.abs(d))), d.size


def evaluate(model, batches, threads=1):
    """(MSE, MAE) over a batch stream, weighted by element count.

    threads > 1 evaluates batches in a worker pool; parameters are only
    read, and the reduction stays in batch order, so the result is
    identical to the single-threaded one.
    """
    sq = absum = n = 0
    with ad.no_grad():
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda b: _batch_error_sums(model, b), batches))
        else:
            parts = (_batch_error_sums(model, b) for b in batches)
        for s, a, k in parts:
            sq += s
            absum += a
            n += k
    if n == 0:
        raise ConfigError("evaluation stream produced no windows")
    return sq / n, absum / n


def _epoch_seed(seed, epoch):
    return seed * 1_000_003 + epoch


def train(model, source, cfg, log=None, eval_threads=1):
    """Fit model on source's train split; returns (model, RunReport).

    The model comes back holding the best-validation parameters. source
    provides train_batches(shuffle_seed) / val_batches() / test_batches().
    The optimizer loop is single-threaded; eval_threads only parallelizes
    the per-epoch validation and final test passes.
    """
    report = RunReport(config={"train": asdict(cfg), "model": model.spec.to_header()})
    t0 = time.perf_counter()
    best_val = np.inf
    best_state = [p.value.copy() for p in model.params]
    bad_epochs = 0

    for epoch in range(1, cfg.epochs + 1):
        sq = n = 0
        for i, batch in enumerate(source.train_batches(_epoch_seed(cfg.seed, epoch))):
            pred = model.forward(batch.X)
            diff = ad.sub(pred, Tensor(batch.Y))
            loss = (diff * diff).mean()
            if not np.isfinite(loss.value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {i}")
            ad.zero_grads(model.params)
            ad.backward(loss, model.params)
            ad.adam_step(model.params, cfg.lr)
            sq += float(loss.value) * diff.value.size
            n += diff.value.size
        train_mse = sq / max(n, 1)

        val_mse, val_mae = evaluate(model, source.val_batches(), eval_threads)
        report.epochs.append(
            {"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "val_mae": val_mae}
        )
        if log:
            log(
                f"epoch {epoch:3d}  train_mse {train_mse:.6f}  "
                f"val_mse {val_mse:.6f}  val_mae {val_mae:.6f}"
            )
        if val_mse < best_val:
            best_val = val_mse
            best_state = [p.value.copy() for p in model.params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    for p, v in zip(model.params, best_state):
        p.value = v
    test_mse, test_mae = evaluate(model, source.test_batches(), eval_threads)
    report.test = {"mse": test_mse, "mae": test_mae}
    report.seconds = time.perf_counter() - t0
    return model, report


# --- synthetic diagnostics ------------------------------------------------------


class PairedWindows:
    """Window source over explicit (X, Y) pairs, for tasks whose targets
    are not contiguous continuations of their inputs."""

    def __init__(self, X, Y, batch_size, splits=(0.6, 0.2, 0.2)):
        if X.shape[:2] != Y.shape[:2]:
            raise ConfigError(f"X {X.shape} and Y {Y.shape} disagree on windows/channels")
        self.X, self.Y = X, Y
        self.batch_size = batch_size
        self.D = X.shape[1]
        W = X.shape[0]
        n_train = int(W * splits[0] + 1e-9)
        n_val = int(W * splits[1] + 1e-9)
        self._parts = {
            "train": np.arange(0, n_train),
            "val": np.arange(n_train, n_train + n_val),
            "test": np.arange(n_train + n_val, W),
        }
        if min(len(v) for v in self._parts.values()) < 1:
            raise ConfigError(f"{W} windows is too few to split {splits}")

    def _iter(self, idx):
        for i in range(0, len(idx), self.batch_size):
            chunk = idx[i : i + self.batch_size]
            yield _Pair(self.X[chunk], self.Y[chunk], chunk)

    def train_batches(self, shuffle_seed):
        order = np.random.default_rng(shuffle_seed).permutation(self._parts["train"])
        return self._iter(order)

    def val_batches(self):
        return self._iter(self._parts["val"])

    def test_batches(self):
        return self._iter(self._parts["test"])


@dataclass(frozen=True)
class _Pair:
    X: np.ndarray
    Y: np.ndarray
    starts: np.ndarray


def make_case1(seed, windows=1000, T=336, L=96, k=14, gap=104, batch_size=64):
    """Single-bin cosine windows whose targets start `gap` steps later.

    x[n] = cos(2pi k (n + delta) / T) with delta ~ U[0, T) per window;
    y[v] = cos(2pi k (v + delta + gap) / T). Every window's spectrum has
    exactly one active bin, but the input->target map mixes that bin's
    real and imaginary parts, so per-bin diagonal maps cannot fit it.
    """
    rng = np.random.default_rng(seed)
    delta = rng.uniform(0.0, T, size=windows)[:, None, None]
    n = np.arange(T)[None, None, :]
    v = np.arange(L)[None, None, :]
    X = np.cos(2 * np.pi * k * (n + delta) / T)
    Y = np.cos(2 * np.pi * k * (v + delta + gap) / T)
    return PairedWindows(X, Y, batch_size=batch_size)


def make_case2(seed, length=4000, period=24):
    """Contiguous cosine series with a fixed per-sample period.

    Windows of length 336 put its energy at bin 336/period = 14, windows
    of length 192 put it at bin 8: the same signal, different indices.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(length)
    x = np.cos(2 * np.pi * t / period + phase)
    return Dataset(name="case2", values=x[None, :])


# --- prediction export -----------------------------------------------------------


def export_predictions(path, model, batches):
    """CSV dump: window_id,channel,step,y_true,y_pred."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("window_id,channel,step,y_true,y_pred\n")
        with ad.no_grad():
            for batch in batches:
                pred = model.forward(batch.X).value
                B, D, L = pred.shape
                for b in range(B):
                    wid = int(batch.starts[b])
                    for d in range(D):
                        for step in range(L):
                            f.write(
                                f"{wid},{d},{step},"
                                f"{batch.Y[b, d, step]:.17g},{pred[b, d, step]:.17g}\n"
                            )
