"""Reference classifier and training mathematics.

Multinomial logistic regression (optionally with one tanh hidden layer)
over flattened 41x41x3 patches, trained with Adam under a one-cycle
learning-rate schedule and selected by lowest validation loss.  All math
is float64 and a pure function of (data, config, seed), which keeps
gradient checks and rerun comparisons exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DecodeError, DimensionMismatchError
from .patches import FEATURE_DIM, PatchDataset, balanced_sampler, sample_batch

MODEL_MAGIC = b"NUCM"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 256
    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 10_000.0
    val_every: int = 250
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


# --- core math --------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def crossentropy(logits: np.ndarray, true_class) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Accepts a single logit vector with an integer class or a batch with a
    class array; the gradient includes the 1/batch factor.
    """
    z = np.asarray(logits, np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
        y = np.array([true_class])
    else:
        y = np.asarray(true_class)
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    rows = np.arange(len(z))
    loss = float((lse - z[rows, y]).mean())
    grad = softmax(z)
    grad[rows, y] -= 1.0
    grad /= len(z)
    return loss, (grad[0] if squeeze else grad)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float,
                 warmup_frac: float = 0.3, div_factor: float = 25.0,
                 final_div_factor: float = 10_000.0) -> float:
    """Cosine ramp initial -> peak at warmup_frac, then peak -> final."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    initial = peak_lr / div_factor
    final = initial / final_div_factor
    boundary = round(warmup_frac * total_steps)
    if step <= boundary:
        if boundary == 0:
            return peak_lr
        frac = (1 - np.cos(np.pi * step / boundary)) / 2
        return initial + (peak_lr - initial) * frac
    span = total_steps - 1 - boundary
    if span <= 0:
        return peak_lr
    frac = (1 + np.cos(np.pi * (step - boundary) / span)) / 2
    return final + (peak_lr - final) * frac


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Adam update with bias correction; t counts from 1."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


# --- models -----------------------------------------------------------------

class LinearModel:
    """Logits = X W + b; weights start at zero so the initial loss is ln C."""

    kind = "linear"

    def __init__(self, feature_dim: int, class_count: int):
        self.feature_dim = feature_dim
        self.class_count = class_count
        self.params = {
            "W": np.zeros((feature_dim, class_count)),
            "b": np.zeros(class_count),
        }

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.params["W"] + self.params["b"]

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        loss, dlogits = crossentropy(self.logits(x), y)
        return loss, {"W": x.T @ dlogits, "b": dlogits.sum(axis=0)}


class MlpModel:
    """One tanh hidden layer; seeded uniform +-1/sqrt(fan-in) init."""

    kind = "mlp"

    def __init__(self, feature_dim: int, class_count: int, hidden: int, seed: int):
        self.feature_dim = feature_dim
        self.class_count = class_count
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        s1 = 1 / np.sqrt(feature_dim)
        s2 = 1 / np.sqrt(hidden)
        self.params = {
            "W1": rng.uniform(-s1, s1, (feature_dim, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.uniform(-s2, s2, (hidden, class_count)),
            "b2": np.zeros(class_count),
        }

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(x @ self.params["W1"] + self.params["b1"])
        return h @ self.params["W2"] + self.params["b2"]

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        h = np.tanh(x @ self.params["W1"] + self.params["b1"])
        loss, dlogits = crossentropy(h @ self.params["W2"] + self.params["b2"], y)
        dh = dlogits @ self.params["W2"].T * (1 - h * h)
        return loss, {
            "W1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "W2": h.T @ dlogits,
            "b2": dlogits.sum(axis=0),
        }


def _make_model(feature_dim: int, class_count: int, config: TrainConfig):
    if config.hidden:
        return MlpModel(feature_dim, class_count, config.hidden, config.seed + 1)
    return LinearModel(feature_dim, class_count)


# --- training loop ----------------------------------------------------------

@dataclass
class TrainedModel:
    kind: str
    feature_dim: int
    class_count: int
    hidden: int | None
    params: dict[str, np.ndarray]
    config: TrainConfig
    best_step: int
    best_val_loss: float
    train_curve: list[float] = field(repr=False)
    val_curve: list[tuple[int, float, float]] = field(repr=False)  # (step, loss, acc)

    def logits(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.feature_dim:
            raise DimensionMismatchError(
                f"features have dim {x.shape[-1]}, model expects {self.feature_dim}")
        if self.kind == "mlp":
            h = np.tanh(x @ self.params["W1"] + self.params["b1"])
            return h @ self.params["W2"] + self.params["b2"]
        return x @ self.params["W"] + self.params["b"]

    def save(self, path) -> None:
        names = sorted(self.params)
        header = {
            "kind": self.kind,
            "feature_dim": self.feature_dim,
            "class_count": self.class_count,
            "hidden": self.hidden,
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss,
            "config": asdict(self.config),
            "params": [{"name": n, "shape": list(self.params[n].shape)}
                       for n in names],
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(self.params[n], "<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        raw = Path(path).read_bytes()
        if raw[:4] != MODEL_MAGIC:
            raise DecodeError(f"{path}: not a model file")
        (hlen,) = struct.unpack_from("<I", raw, 4)
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        offset = 8 + hlen
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            if offset + count * 8 > len(raw):
                raise DecodeError(f"{path}: trailing or missing parameter bytes")
            arr = np.frombuffer(raw, "<f8", count=count, offset=offset)
            params[entry["name"]] = arr.reshape(shape).copy()
            offset += count * 8
        if offset != len(raw):
            raise DecodeError(f"{path}: trailing or missing parameter bytes")
        cfg = TrainConfig(**header["config"])
        return cls(
            kind=header["kind"],
            feature_dim=header["feature_dim"],
            class_count=header["class_count"],
            hidden=header["hidden"],
            params=params,
            config=cfg,
            best_step=header["best_step"],
            best_val_loss=header["best_val_loss"],
            train_curve=[],
            val_curve=[],
        )


def _evaluate(model, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits = model.logits(x)
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    loss = float((lse - logits[np.arange(len(y)), y]).mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


def train(dataset: PatchDataset, config: TrainConfig,
          train_indices: np.ndarray, val_indices: np.ndarray,
          class_names: Sequence[str] | None = None,
          train_stream: Iterator[int] | None = None) -> TrainedModel:
    """Run the full loop; returns parameters from the best validation step."""
    labels = dataset.labels
    class_count = dataset.class_count
    if train_stream is None:
        train_stream = balanced_sampler(labels, config.seed, class_count,
                                        include=np.asarray(train_indices),
                                        class_names=class_names)
    val_indices = np.asarray(val_indices)
    x_val = dataset.features(val_indices)
    y_val = labels[val_indices].astype(np.int64)

    model = _make_model(dataset.data["pixels"].shape[1], class_count, config)
    m_state = {n: np.zeros_like(p) for n, p in model.params.items()}
    v_state = {n: np.zeros_like(p) for n, p in model.params.items()}

    train_curve: list[float] = []
    val_curve: list[tuple[int, float, float]] = []
    best_step = -1
    best_val = np.inf
    best_params: dict[str, np.ndarray] = {}

    def run_validation(step: int) -> None:
        nonlocal best_step, best_val, best_params
        loss, acc = _evaluate(model, x_val, y_val)
        val_curve.append((step, loss, acc))
        if loss < best_val:
            best_val = loss
            best_step = step
            best_params = {n: p.copy() for n, p in model.params.items()}

    for step in range(config.steps):
        idx = sample_batch(train_stream, config.batch_size)
        x = dataset.features(idx)
        y = labels[idx].astype(np.int64)
        loss, grads = model.loss_and_grads(x, y)
        train_curve.append(loss)
        lr = one_cycle_lr(step, config.steps, config.peak_lr, config.warmup_frac,
                          config.div_factor, config.final_div_factor)
        t = step + 1
        for name, grad in grads.items():
            model.params[name], m_state[name], v_state[name] = adam_step(
                model.params[name], grad, m_state[name], v_state[name],
                t, lr, config.beta1, config.beta2, config.eps)
        if (step + 1) % config.val_every == 0:
            run_validation(step + 1)
    if not val_curve or val_curve[-1][0] != config.steps:
        run_validation(config.steps)

    return TrainedModel(
        kind=model.kind,
        feature_dim=model.feature_dim,
        class_count=class_count,
        hidden=getattr(model, "hidden", None),
        params=best_params,
        config=config,
        best_step=best_step,
        best_val_loss=float(best_val),
        train_curve=train_curve,
        val_curve=val_curve,
    )


def predict(model: TrainedModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (argmax, first index wins ties) and probabilities."""
    probs = softmax(model.logits(np.asarray(features, np.float64)))
    return probs.argmax(axis=1), probs


def write_predictions_csv(path, nucleus_ids: Sequence[int], slide_ids: Sequence[str],
                          true_labels: Sequence[int], pred_labels: np.ndarray,
                          probs: np.ndarray) -> None:
    class_count = probs.shape[1]
    header = ["nucleus_id", "slide_id", "true_label", "pred_label"]
    header += [f"p{i}" for i in range(class_count)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(pred_labels)):
            row = [str(int(nucleus_ids[i])), str(slide_ids[i]),
                   str(int(true_labels[i])), str(int(pred_labels[i]))]
            row.extend(repr(float(p)) for p in probs[i])
            fh.write(",".join(row) + "\n")
