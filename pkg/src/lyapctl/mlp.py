"""Feedforward network imitating the solver: ``(x, r) -> (u, P)``.

Everything here is plain numpy: forward pass, backpropagation, Adam with a
cosine-annealed learning rate, inverted dropout. ``P`` is emitted packed
(upper triangle, row-major) and unpacked into an exactly symmetric matrix;
no positive-definiteness projection is applied.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_rng_seed
from .dataset import TrainingDataset, packed_size, unpack_symmetric
from .exceptions import FormatError, NetworkNumericError, TrainingDivergedError

__all__ = [
    "DEFAULT_HIDDEN",
    "MlpArchitecture",
    "MlpParameters",
    "TrainConfig",
    "ImitationGap",
    "init",
    "forward",
    "train",
    "cosine_lr",
    "measure_gap",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_csv",
    "ImitationNetwork",
]

DEFAULT_HIDDEN = (8, 32, 64, 64, 32, 16)
CKPT_MAGIC = b"LYNN"
CKPT_VERSION = 1


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden: tuple = DEFAULT_HIDDEN
    output_dim: int = 4
    activation: str = "relu"
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def for_system(cls, n: int, m: int, p: int, **kwargs) -> "MlpArchitecture":
        return cls(input_dim=n + m, output_dim=p + packed_size(n), **kwargs)

    @property
    def widths(self) -> tuple:
        return (self.input_dim,) + self.hidden + (self.output_dim,)


@dataclass(eq=False)
class MlpParameters:
    arch: MlpArchitecture
    weights: list
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    n_state: int = 2

    @property
    def n_control(self) -> int:
        return self.arch.output_dim - packed_size(self.n_state)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def copy(self) -> "MlpParameters":
        return MlpParameters(
            self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.in_mean.copy(), self.in_std.copy(), self.out_mean.copy(), self.out_std.copy(), self.n_state,
        )

    def equals(self, other: "MlpParameters") -> bool:
        mine = [*self.weights, *self.biases, self.in_mean, self.in_std, self.out_mean, self.out_std]
        theirs = [*other.weights, *other.biases, other.in_mean, other.in_std, other.out_mean, other.out_std]
        return self.arch == other.arch and self.n_state == other.n_state and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 2000
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t_max: Optional[int] = None  # None: total epochs
    lr_min: float = 1e-6
    dropout_rate: float = 0.1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ImitationGap:
    du_bar: float
    dP_bar: float
    val_mse: float

    def to_dict(self) -> dict:
        return asdict(self)


def init(arch: MlpArchitecture, seed: int = 0, n_state: int = 2) -> MlpParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity normalization."""
    rng = np.random.default_rng(check_rng_seed(seed))
    widths = arch.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(
        arch, weights, biases,
        np.zeros(arch.input_dim), np.ones(arch.input_dim),
        np.zeros(arch.output_dim), np.ones(arch.output_dim),
        n_state,
    )


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(float) if kind == "relu" else 1.0 - a * a


def _propagate(params, Zn, rng=None, rate=0.0):
    """Forward on normalized inputs. Returns normalized outputs and the per-layer cache."""
    kind = params.arch.activation
    a = Zn
    cache = []
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        if k == last:
            cache.append((a, z, None, None))
            return z, cache
        h = _act(z, kind)
        mask = None
        if rng is not None and rate > 0:
            mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * mask
        cache.append((a, z, h, mask))
        a = h
    return a, cache


def _backprop(params, cache, dout):
    kind = params.arch.activation
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    delta = dout
    for k in range(len(params.weights) - 1, -1, -1):
        a_in, z, h, mask = cache[k]
        if k < len(params.weights) - 1:
            act = _act(z, kind) if kind == "tanh" else None
            delta = delta * _act_grad(z, act, kind)
        grads_w[k] = a_in.T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ params.weights[k].T
            prev_mask = cache[k - 1][3]
            if prev_mask is not None:
                delta = delta * prev_mask
    return grads_w, grads_b


def _mse_and_grad(params, Zn, Yn, rng=None, rate=0.0):
    out, cache = _propagate(params, Zn, rng, rate)
    resid = out - Yn
    loss = float(np.mean(resid * resid))
    dout = 2.0 * resid / resid.size
    gw, gb = _backprop(params, cache, dout)
    return loss, gw, gb


def _normalize_inputs(params, Z):
    return (Z - params.in_mean) / params.in_std


def _denormalize_outputs(params, Yn):
    return Yn * params.out_std + params.out_mean


def _locate_nonfinite(params, Zn):
    kind = params.arch.activation
    a = Zn
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            a = a @ W + b
            if k < len(params.weights) - 1:
                a = _act(a, kind)
        if not np.all(np.isfinite(a)):
            return k
    return len(params.weights) - 1


def predict_raw(params: MlpParameters, Z: np.ndarray) -> np.ndarray:
    """Eval-mode output ``[u, packed P]`` for a batch of ``[x, r]`` rows."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Zn = _normalize_inputs(params, Z)
    with np.errstate(over="ignore", invalid="ignore"):
        out, _ = _propagate(params, Zn)
    if not np.all(np.isfinite(out)):
        raise NetworkNumericError(_locate_nonfinite(params, Zn))
    return _denormalize_outputs(params, out)


def forward(params: MlpParameters, x, r, mode: str = "eval", seed: Optional[int] = None) -> tuple:
    """Return ``(u_hat, P_hat)``; batched when ``x`` is 2-D.

    In ``train`` mode hidden activations are dropped with the architecture's
    rate and rescaled (inverted dropout), masks drawn from ``seed``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    single = x.ndim == 1
    Z = np.hstack([np.atleast_2d(x), np.atleast_2d(r)])
    if Z.shape[1] != params.arch.input_dim:
        raise ValueError(f"expected {params.arch.input_dim} inputs, got {Z.shape[1]}")
    if mode == "eval" or params.arch.dropout_rate == 0:
        out = predict_raw(params, Z)
    else:
        Zn = _normalize_inputs(params, Z)
        with np.errstate(over="ignore", invalid="ignore"):
            raw, _ = _propagate(params, Zn, np.random.default_rng(seed), params.arch.dropout_rate)
        if not np.all(np.isfinite(raw)):
            raise NetworkNumericError(_locate_nonfinite(params, Zn))
        out = _denormalize_outputs(params, raw)
    p = params.n_control
    u_hat = out[:, :p]
    P_hat = unpack_symmetric(out[:, p:], params.n_state)
    if single:
        return u_hat[0], P_hat[0]
    return u_hat, P_hat


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    t_max = cfg.t_max or cfg.epochs
    return float(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + np.cos(np.pi * epoch / t_max)))


def _fit_stats(A: np.ndarray) -> tuple:
    mean = A.mean(axis=0)
    std = A.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def train(
    dataset_train: TrainingDataset,
    dataset_val: Optional[TrainingDataset],
    arch: MlpArchitecture,
    cfg: TrainConfig,
) -> tuple:
    """Mini-batch Adam on the MSE of normalized ``[u, packed P]`` targets.

    Returns the trained parameters and a list of per-epoch records
    ``{"epoch", "lr", "train_mse", "val_mse"}`` (val is NaN without a
    validation set).
    """
    if len(dataset_train) == 0:
        raise ValueError("training set is empty")
    if arch.dropout_rate != cfg.dropout_rate:
        arch = MlpArchitecture(arch.input_dim, arch.hidden, arch.output_dim, arch.activation, cfg.dropout_rate)
    Z = dataset_train.features()
    Y = dataset_train.targets()
    if Z.shape[1] != arch.input_dim or Y.shape[1] != arch.output_dim:
        raise ValueError("dataset dimensions do not match the architecture")

    params = init(arch, cfg.seed, n_state=dataset_train.n)
    params.in_mean, params.in_std = _fit_stats(Z)
    params.out_mean, params.out_std = _fit_stats(Y)
    Zn = _normalize_inputs(params, Z)
    Yn = (Y - params.out_mean) / params.out_std
    if dataset_val is not None and len(dataset_val):
        Zv = _normalize_inputs(params, dataset_val.features())
        Yv = (dataset_val.targets() - params.out_mean) / params.out_std
    else:
        Zv = Yv = None

    rng = np.random.default_rng(cfg.seed + 1)
    m_w = [np.zeros_like(w) for w in params.weights]
    v_w = [np.zeros_like(w) for w in params.weights]
    m_b = [np.zeros_like(b) for b in params.biases]
    v_b = [np.zeros_like(b) for b in params.biases]
    step = 0
    curve = []
    N = len(Zn)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(N) if cfg.shuffle else np.arange(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gw, gb = _mse_and_grad(params, Zn[idx], Yn[idx], rng, arch.dropout_rate)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total += loss * len(idx)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for k in range(len(params.weights)):
                for p_, g, m_, v_ in ((params.weights, gw, m_w, v_w), (params.biases, gb, m_b, v_b)):
                    m_[k] = cfg.beta1 * m_[k] + (1 - cfg.beta1) * g[k]
                    v_[k] = cfg.beta2 * v_[k] + (1 - cfg.beta2) * g[k] * g[k]
                    p_[k] = p_[k] - lr * (m_[k] / c1) / (np.sqrt(v_[k] / c2) + cfg.eps_adam)
        train_mse = total / N
        val_mse = float("nan")
        if Zv is not None:
            out, _ = _propagate(params, Zv)
            val_mse = float(np.mean((out - Yv) ** 2))
        if not (np.isfinite(train_mse) and (Zv is None or np.isfinite(val_mse))):
            raise TrainingDivergedError(epoch)
        curve.append({"epoch": epoch + 1, "lr": lr, "train_mse": train_mse, "val_mse": val_mse})
    return params, curve


def measure_gap(params: MlpParameters, dataset_val: TrainingDataset) -> ImitationGap:
    """Sample maxima of ``||u_hat - u||_2`` and the spectral norm of ``P_hat - P``."""
    if len(dataset_val) == 0:
        raise ValueError("validation set is empty")
    out = predict_raw(params, dataset_val.features())
    p = params.n_control
    du = np.linalg.norm(out[:, :p] - dataset_val.u, axis=1)
    dP = unpack_symmetric(out[:, p:] - dataset_val.P, params.n_state)
    dP_norm = np.abs(np.linalg.eigvalsh(dP)).max(axis=1)
    Yn = (dataset_val.targets() - params.out_mean) / params.out_std
    On = (out - params.out_mean) / params.out_std
    return ImitationGap(float(du.max()), float(dP_norm.max()), float(np.mean((On - Yn) ** 2)))


def grad_check(arch: MlpArchitecture, seed: int = 0, probe_count: int = 100, batch: int = 16, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of the MSE."""
    arch = MlpArchitecture(arch.input_dim, arch.hidden, arch.output_dim, arch.activation, 0.0)
    rng = np.random.default_rng(seed)
    params = init(arch, seed)
    for b in params.biases:
        b[:] = rng.uniform(-0.5, 0.5, size=b.shape)
    Zn = rng.normal(size=(batch, arch.input_dim))
    Yn = rng.normal(size=(batch, arch.output_dim))
    _, gw, gb = _mse_and_grad(params, Zn, Yn)
    tensors = [*params.weights, *params.biases]
    grads = [*gw, *gb]
    sizes = np.array([t.size for t in tensors])
    flat_idx = rng.choice(sizes.sum(), size=min(probe_count, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def loss():
        out, _ = _propagate(params, Zn)
        return float(np.mean((out - Yn) ** 2))

    worst = 0.0
    for fi in flat_idx:
        t = int(np.searchsorted(offsets, fi, side="right") - 1)
        pos = np.unravel_index(fi - offsets[t], tensors[t].shape)
        orig = tensors[t][pos]
        tensors[t][pos] = orig + h
        lp = loss()
        tensors[t][pos] = orig - h
        lm = loss()
        tensors[t][pos] = orig
        fd = (lp - lm) / (2 * h)
        bp = grads[t][pos]
        worst = max(worst, abs(fd - bp) / max(abs(fd), abs(bp), 1e-8))
    return worst


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: MlpParameters, path, extra: Optional[dict] = None) -> None:
    """Versioned binary: magic, version byte, JSON architecture header, little-endian float64 payload."""
    header = {"arch": asdict(params.arch), "n_state": params.n_state, "extra": extra or {}}
    header["arch"]["hidden"] = list(params.arch.hidden)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    arrays = [*params.weights, *params.biases, params.in_mean, params.in_std, params.out_mean, params.out_std]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(blob)) + blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Return ``(params, extra)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: expected checkpoint version {CKPT_VERSION}, found {version}")
    header = json.loads(data[9 : 9 + hlen])
    arch = MlpArchitecture(**header["arch"])
    widths = arch.widths
    shapes = [(a, b) for a, b in zip(widths[:-1], widths[1:])] + [(b,) for b in widths[1:]]
    shapes += [(arch.input_dim,)] * 2 + [(arch.output_dim,)] * 2
    offset = 9 + hlen
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float))
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"{path}: payload size does not match the architecture")
    L = len(widths) - 1
    params = MlpParameters(arch, arrays[:L], arrays[L : 2 * L], *arrays[2 * L :], n_state=header["n_state"])
    return params, header["extra"]


def write_loss_csv(curve: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_mse", "val_mse"])
        for rec in curve:
            writer.writerow([rec["epoch"], repr(rec["lr"]), repr(rec["train_mse"]), repr(rec["val_mse"])])


# -- estimator ---------------------------------------------------------------


class ImitationNetwork(RegressorMixin, BaseEstimator):
    """Regressor from ``[x, r]`` rows to ``[u, packed P]`` rows.

    ``control(x, r)`` gives the closed-loop view ``(u_hat, P_hat)``.
    """

    def __init__(
        self,
        n_state=2,
        hidden=DEFAULT_HIDDEN,
        activation="relu",
        dropout_rate=0.1,
        lr0=1e-3,
        epochs=2000,
        batch_size=256,
        lr_min=1e-6,
        seed=0,
    ):
        self.n_state = n_state
        self.hidden = hidden
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.lr0 = lr0
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_min = lr_min
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, epochs=self.epochs, batch_size=self.batch_size, lr_min=self.lr_min,
            dropout_rate=self.dropout_rate, seed=self.seed,
        )

    def _arch(self, input_dim, output_dim) -> MlpArchitecture:
        return MlpArchitecture(input_dim, tuple(self.hidden), output_dim, self.activation, self.dropout_rate)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = np.atleast_2d(y.T).T
        k = packed_size(self.n_state)
        if y.shape[1] <= k:
            raise ValueError(f"y needs more than {k} columns for n_state={self.n_state}")
        train_ds = _as_dataset(X, y, self.n_state)
        val_ds = None
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, multi_output=True)
            val_ds = _as_dataset(X_val, np.atleast_2d(y_val.T).T, self.n_state)
        self.params_, self.loss_curve_ = train(
            train_ds, val_ds, self._arch(X.shape[1], y.shape[1]), self._train_config()
        )
        self.n_features_in_ = X.shape[1]
        return self

    def fit_dataset(self, train_ds: TrainingDataset, val_ds: Optional[TrainingDataset] = None):
        self.n_state = train_ds.n
        arch = self._arch(train_ds.features().shape[1], train_ds.targets().shape[1])
        self.params_, self.loss_curve_ = train(train_ds, val_ds, arch, self._train_config())
        self.n_features_in_ = arch.input_dim
        return self

    @classmethod
    def from_params(cls, params: MlpParameters) -> "ImitationNetwork":
        a = params.arch
        est = cls(n_state=params.n_state, hidden=a.hidden, activation=a.activation, dropout_rate=a.dropout_rate)
        est.params_ = params
        est.loss_curve_ = []
        est.n_features_in_ = a.input_dim
        return est

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X)
        return predict_raw(self.params_, X)

    def control(self, x, r) -> tuple:
        return forward(self.params_, x, r)

    def control_batch(self, X, r) -> np.ndarray:
        """Inputs ``u_hat`` for a stack of states sharing one reference."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        R = np.broadcast_to(np.atleast_1d(np.asarray(r, dtype=float)), (len(X), self.params_.arch.input_dim - X.shape[1]))
        return predict_raw(self.params_, np.hstack([X, R]))[:, : self.params_.n_control]

    def gap(self, dataset_val: TrainingDataset) -> ImitationGap:
        check_is_fitted(self, "params_")
        return measure_gap(self.params_, dataset_val)


def _as_dataset(X, y, n_state) -> TrainingDataset:
    k = packed_size(n_state)
    p = y.shape[1] - k
    N = len(X)
    return TrainingDataset(
        X[:, :n_state], X[:, n_state:], y[:, :p], y[:, p:], np.zeros(N, dtype=np.uint8), np.zeros(N), {},
    )
