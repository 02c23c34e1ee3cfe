"""Elman RNN, minibatch SGD with early stopping, and sliding-window inference."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .dsp import overlap_average, sliding_windows
from .objectives import LossSpec, sdr_maps, window_loss, window_projectors

__all__ = [
    "RnnParams",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "init_params",
    "rnn_forward",
    "elman",
    "train",
    "infer",
    "batch_loss",
    "write_params_csv",
    "read_params_csv",
    "write_history_csv",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("W_in", "W_rec", "b_h", "W_out", "b_out")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class RnnParams:
    W_in: np.ndarray  # (H, 1)
    W_rec: np.ndarray  # (H, H)
    b_h: np.ndarray  # (H,)
    W_out: np.ndarray  # (1, H)
    b_out: np.ndarray  # ()

    def __post_init__(self):
        H = self.hidden_size
        shapes = {"W_in": (H, 1), "W_rec": (H, H), "b_h": (H,), "W_out": (1, H), "b_out": ()}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ad.ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def hidden_size(self) -> int:
        return np.asarray(self.W_rec).shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "RnnParams":
        return RnnParams(*[a.copy() for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec, H: int) -> "RnnParams":
        vec = np.asarray(vec, dtype=np.float64)
        shapes = [(H, 1), (H, H), (H,), (1, H), ()]
        out, i = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(vec[i : i + n].reshape(s))
            i += n
        return cls(*out)

    @classmethod
    def zeros(cls, H: int) -> "RnnParams":
        return cls(np.zeros((H, 1)), np.zeros((H, H)), np.zeros(H), np.zeros((1, H)), np.zeros(()))


def init_params(H: int, rng: np.random.Generator) -> RnnParams:
    """Weights uniform on [-1/sqrt(H), 1/sqrt(H)], zero biases."""
    b = 1.0 / np.sqrt(H)
    return RnnParams(
        W_in=rng.uniform(-b, b, (H, 1)),
        W_rec=rng.uniform(-b, b, (H, H)),
        b_h=np.zeros(H),
        W_out=rng.uniform(-b, b, (1, H)),
        b_out=np.zeros(()),
    )


def elman(x, W_in: Var, W_rec: Var, b_h: Var, W_out: Var, b_out: Var) -> Var:
    """Fused Elman recurrence over a constant input batch ``x`` of shape ``(B, W)``.

    Records a single tape node whose backward is backpropagation through time.
    Gives the same values and adjoints as the per-step composition in
    :func:`rnn_forward` with ``fused=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    B, T = x.shape
    w_in = W_in.value[:, 0]
    w_rec = W_rec.value
    w_out = W_out.value[0]
    H = w_rec.shape[0]

    drive = x[:, :, None] * w_in + b_h.value  # (B, T, H)
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    w_rec_t = w_rec.T
    for t in range(T):
        h = np.tanh(drive[:, t] + h @ w_rec_t)
        hs[t] = h
    y = hs @ w_out + b_out.value  # (T, B)
    out = y.T.copy()

    def vjp(g):
        gt = np.ascontiguousarray(g.T)  # (T, B)
        d_w_out = (gt.reshape(-1) @ hs.reshape(-1, H))[None, :]
        d_b_out = np.asarray(gt.sum())
        d_pre = np.empty((T, B, H))
        carry = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = np.multiply.outer(gt[t], w_out)
            dh += carry
            da = dh * (1.0 - hs[t] * hs[t])
            d_pre[t] = da
            carry = da @ w_rec
        flat = d_pre.reshape(-1, H)
        d_w_rec = flat[B:].T @ hs[:-1].reshape(-1, H)
        d_w_in = (np.ascontiguousarray(x.T).reshape(-1) @ flat)[:, None]
        d_b_h = flat.sum(axis=0)
        return d_w_in, d_w_rec, d_b_h, d_w_out, d_b_out

    return W_in.tape.record("elman", (W_in, W_rec, b_h, W_out, b_out), out, vjp)


def _param_vars(params: RnnParams, tape: Tape) -> list[Var]:
    return [tape.variable(a) for a in params.arrays()]


def rnn_forward(params, x, tape: Tape | None = None, fused: bool = True) -> Var:
    """Run the network over window(s) ``x`` of shape ``(W,)`` or ``(B, W)``.

    ``params`` is either :class:`RnnParams` (leaves are created on ``tape``) or
    a sequence of five Vars already on a tape.  The hidden state starts at 0.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ad.ShapeError(f"input windows must be (W,) or (B, W), got {x.shape}")
    if isinstance(params, RnnParams):
        if tape is None:
            tape = Tape()
        pv = _param_vars(params, tape)
    else:
        pv = list(params)
    W_in, W_rec, b_h, W_out, b_out = pv
    if fused:
        out = elman(x, W_in, W_rec, b_h, W_out, b_out)
    else:
        B, T = x.shape
        W_in_t, W_rec_t, W_out_t = ad.transpose(W_in), ad.transpose(W_rec), ad.transpose(W_out)
        h = None
        cols = []
        for t in range(T):
            pre = ad.matmul(x[:, t : t + 1], W_in_t) + b_h
            if h is not None:
                pre = pre + ad.matmul(h, W_rec_t)
            h = ad.tanh(pre)
            cols.append(ad.matmul(h, W_out_t) + b_out)
        out = ad.concat(cols, axis=1)
    if single:
        out = ad.reshape(out, (x.shape[1],))
    return out


def infer(params: RnnParams, mixture, window: int, shift: int = 1) -> np.ndarray:
    """Full-length estimate: run every window, then overlap-average."""
    mixture = np.asarray(mixture, dtype=np.float64)
    if mixture.size < window:
        raise ValueError(f"mixture of length {mixture.size} is shorter than the window {window}")
    X = sliding_windows(mixture, window, shift)
    out = rnn_forward(params, X).value
    return overlap_average(out, shift, mixture.size)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 500
    learning_rate: float = 1e-3
    patience: int = 20
    val_fraction: float = 0.1
    hidden_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 0 or self.patience < 1 or self.hidden_size < 1:
            raise ValueError("max_epochs >= 0, patience >= 1 and hidden_size >= 1 required")


@dataclass
class TrainResult:
    params: RnnParams
    history: list[tuple[int, float, float]]
    best_epoch: int
    stopped_epoch: int
    n_train: int
    n_val: int
    batches_run: int
    diagnostics: Counter = field(default_factory=Counter)

    def __iter__(self):
        return iter((self.params, self.history))


class _LossContext:
    """Per-dataset constants a loss needs (projector maps for neg_sdr)."""

    def __init__(self, spec: LossSpec, Y: np.ndarray):
        self.spec = spec
        self.Y = Y
        self.maps = None
        self.projectors = None
        if spec.kind == "neg_sdr":
            self.projectors = window_projectors(Y, spec.sdr.max_delay)
            self.maps = sdr_maps(self.projectors)

    def __call__(self, est: Var, idx, diagnostics=None) -> Var:
        maps = projs = None
        if self.maps is not None:
            maps = (self.maps[0][idx], self.maps[1][idx])
            projs = [self.projectors[i] for i in idx]
        return window_loss(self.spec, est, self.Y[idx], projs, maps, diagnostics)


def batch_loss(params, X, Y, spec: LossSpec, tape: Tape | None = None, fused: bool = True):
    """Mean per-window loss over a batch; returns ``(loss_var, param_vars)``."""
    tape = tape or Tape()
    pv = _param_vars(params, tape) if isinstance(params, RnnParams) else list(params)
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    ctx = _LossContext(spec, Y)
    est = rnn_forward(pv, X, fused=fused)
    losses = ctx(est, np.arange(len(Y)))
    return ad.mean(losses), pv


def _validation_loss(params: RnnParams, X: np.ndarray, idx: np.ndarray, ctx: _LossContext) -> float:
    est = rnn_forward(params, X[idx], Tape())
    return float(ad.mean(ctx(est, idx)).value)


def _split(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = min(int(round(frac * n)), n - 1)
    if n_val <= 0:
        # too small to hold anything out; validate on the training windows
        return perm, perm
    return perm[n_val:], perm[:n_val]


def train(
    X,
    Y,
    loss: LossSpec,
    cfg: TrainConfig = TrainConfig(),
    init: RnnParams | None = None,
) -> TrainResult:
    """Minibatch SGD on the mean per-window loss with early stopping.

    Returns the parameters with the best validation loss and the per-epoch
    history ``(epoch, train_loss, val_loss)`` (epochs numbered from 1).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("empty dataset")
    if X.shape != Y.shape:
        raise ad.ShapeError(f"inputs {X.shape} and targets {Y.shape} differ")

    init_seq, split_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init.copy() if init is not None else init_params(cfg.hidden_size, np.random.default_rng(init_seq))
    train_idx, val_idx = _split(len(X), cfg.val_fraction, np.random.default_rng(split_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    ctx = _LossContext(loss, Y)
    diag: Counter = Counter()

    def evaluate(p: RnnParams) -> float:
        return _validation_loss(p, X, val_idx, ctx)

    best_params = params.copy()
    best_val = evaluate(params)
    best_epoch = 0
    history: list[tuple[int, float, float]] = []
    bad = 0
    batches = 0
    epoch = 0
    lr = cfg.learning_rate
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            tape = Tape()
            pv = _param_vars(params, tape)
            est = rnn_forward(pv, X[idx])
            obj = ad.mean(ctx(est, idx, diag))
            value = float(obj.value)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            grads = backward_params(obj, pv)
            params = RnnParams(*[p - lr * g for p, g in zip(params.arrays(), grads)])
            total += value * len(idx)
            batches += 1
        train_loss = total / len(order)
        val_loss = evaluate(params)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1, val_loss)
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val, best_epoch, bad = val_loss, epoch, 0
            best_params = params.copy()
        else:
            bad += 1
            if bad >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        stopped_epoch=epoch,
        n_train=len(train_idx),
        n_val=len(val_idx),
        batches_run=batches,
        diagnostics=diag,
    )


def backward_params(root: Var, pv: list[Var]) -> list[np.ndarray]:
    g = ad.backward(root)
    return [g[v] for v in pv]


def _as_2d(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(1, 1) if arr.ndim == 0 else arr.reshape(arr.shape[0], -1)


def write_params_csv(path, params: RnnParams) -> None:
    """Flat ``name,row,col,value`` table; vectors are columns, ``b_out`` is 1x1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "row", "col", "value"])
        for name, arr in zip(PARAM_NAMES, params.arrays()):
            for (r, c), v in np.ndenumerate(_as_2d(arr)):
                w.writerow([name, r, c, repr(float(v))])


def read_params_csv(path) -> RnnParams:
    entries: dict[str, list[tuple[int, int, float]]] = {n: [] for n in PARAM_NAMES}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["name"] not in entries:
                raise ValueError(f"{path}: unknown parameter {row['name']!r}")
            entries[row["name"]].append((int(row["row"]), int(row["col"]), float(row["value"])))
    if not entries["W_rec"]:
        raise ValueError(f"{path}: no W_rec entries")
    H = 1 + max(r for r, _, _ in entries["W_rec"])
    template = RnnParams.zeros(H)
    arrays = []
    for name, ref in zip(PARAM_NAMES, template.arrays()):
        a = _as_2d(ref).copy()
        for i, j, v in entries[name]:
            a[i, j] = v
        arrays.append(a.reshape(ref.shape))
    return RnnParams(*arrays)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, f"{tr:.10g}", f"{va:.10g}"])
