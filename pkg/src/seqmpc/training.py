"""Optimizer, training loop, and the versioned checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SequenceSample
from .model import ModelConfig, ModelParams, NormStats, loss_and_grad

_MAGIC = b"SEQMPCKPT\x00"
_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 3e-4
    grad_clip: float = 1.0
    seed: int = 0
    patience: int = 10
    min_delta: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # float32 halves the memory traffic of the big attention arrays; gradient
    # verification runs the default float64 path
    compute_dtype: str = "float64"


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_val_loss: float
    final_train_loss: float


class Adam:
    """Adaptive-moment gradient descent with global gradient-norm clipping."""

    def __init__(self, tensors: dict[str, np.ndarray], settings: TrainSettings):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0
        self.s = settings

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None):
        s = self.s
        lr = s.learning_rate if lr is None else lr
        if s.grad_clip > 0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > s.grad_clip:
                scale = s.grad_clip / total
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - s.beta1 ** self.t
        bc2 = 1.0 - s.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = s.beta1 * self.m[k] + (1 - s.beta1) * g
            self.v[k] = s.beta2 * self.v[k] + (1 - s.beta2) * (g * g)
            tensors[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + s.adam_eps)


def stack_samples(samples: list[SequenceSample], stats: NormStats,
                  crop_length: int | None = None, crops_per_sample: int = 2,
                  crop_seed: int = 0) -> dict:
    """Stack equal-length samples into one normalized teacher-forcing batch.

    With crop_length shorter than the trajectories, each sample contributes
    crops_per_sample windows of that length (the trajectory start plus seeded
    random offsets), matching how sliding contexts look at inference time.
    """
    if not samples:
        raise ValueError("empty sample list")
    n = samples[0].n_steps
    if any(s.n_steps != n for s in samples):
        raise ValueError("samples must share a common length")
    target = np.stack([np.broadcast_to(s.target, (n, s.target.shape[0])) for s in samples])
    data = {
        "target": stats.norm_target(target),
        "rtg": stats.norm_rtg(np.stack([s.rtg for s in samples])),
        "vb": stats.norm_vb(np.stack([s.vbudget.astype(float) for s in samples])),
        "states": stats.norm_state(np.stack([s.states for s in samples])),
        "controls": stats.norm_control(np.stack([s.controls for s in samples])),
    }
    if crop_length is not None and crop_length < n:
        rng = np.random.default_rng(crop_seed)
        starts = []
        for _ in samples:
            offs = [0] + list(rng.integers(1, n - crop_length + 1,
                                           size=max(crops_per_sample - 1, 0)))
            starts.append(offs)
        cropped = {k: [] for k in data}
        for i, offs in enumerate(starts):
            for o in offs:
                for k in data:
                    cropped[k].append(data[k][i, o:o + crop_length])
        data = {k: np.stack(v) for k, v in cropped.items()}
    data["normalized"] = True
    return data


def _slice_batch(data: dict, idx: np.ndarray) -> dict:
    out = {k: (v[idx] if isinstance(v, np.ndarray) else v) for k, v in data.items()}
    return out


def evaluate_loss(params: ModelParams, stats: NormStats, data: dict,
                  batch_size: int = 64) -> float:
    n = data["rtg"].shape[0]
    total = 0.0
    for i in range(0, n, batch_size):
        idx = np.arange(i, min(i + batch_size, n))
        value, _ = loss_and_grad(params, stats, _slice_batch(data, idx), need_grad=False)
        total += value * len(idx)
    return total / n


def train(params: ModelParams, stats: NormStats, train_data: dict,
          val_data: dict | None = None, settings: TrainSettings | None = None,
          log=None) -> TrainResult:
    """Minibatch training with early stopping on the validation plateau.

    Deterministic given (params, data, settings.seed); returns the parameters
    with the best validation loss (or final training loss when no validation
    split is supplied).
    """
    settings = settings or TrainSettings()
    params = params.copy()
    dtype = np.dtype(settings.compute_dtype)
    if dtype != np.float64:
        for k in params.tensors:
            params.tensors[k] = params.tensors[k].astype(dtype)
        train_data = {k: (v.astype(dtype) if isinstance(v, np.ndarray) else v)
                      for k, v in train_data.items()}
        if val_data is not None:
            val_data = {k: (v.astype(dtype) if isinstance(v, np.ndarray) else v)
                        for k, v in val_data.items()}
    opt = Adam(params.tensors, settings)
    rng = np.random.default_rng(settings.seed)
    n = train_data["rtg"].shape[0]
    history: list[dict] = []
    best_val = np.inf
    best_params = params.copy()
    stall = 0
    train_loss = np.nan
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, settings.batch_size):
            idx = order[i:i + settings.batch_size]
            value, grads = loss_and_grad(params, stats, _slice_batch(train_data, idx))
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {i // settings.batch_size}")
            opt.step(params.tensors, grads)
            epoch_loss += value * len(idx)
        train_loss = epoch_loss / n
        entry = {"epoch": epoch, "train_loss": train_loss}
        if val_data is not None:
            val_loss = evaluate_loss(params, stats, val_data)
            entry["val_loss"] = val_loss
            if val_loss < best_val - settings.min_delta:
                best_val = val_loss
                best_params = params.copy()
                stall = 0
            else:
                stall += 1
        history.append(entry)
        if log:
            log(f"epoch {epoch}: " + " ".join(f"{k}={v:.6g}" for k, v in entry.items() if k != "epoch"))
        if val_data is not None and stall >= settings.patience:
            break
    if val_data is None:
        best_params = params
        best_val = train_loss
    return TrainResult(params=best_params, history=history,
                       best_val_loss=float(best_val), final_train_loss=float(train_loss))


# --- checkpoint container ------------------------------------------------------

def save_checkpoint(path, params: ModelParams, stats: NormStats,
                    meta: dict | None = None):
    """Binary container: magic, version, JSON header, raw little-endian payload.

    The payload layout is fully described by the header, and the encoding is
    deterministic, so value round-trips are bit-exact.
    """
    tensors = dict(sorted(params.tensors.items()))
    stat_arrays = stats.to_arrays()
    manifest = {"tensors": {}, "stats": {}}
    payload = bytearray()
    for section, arrays in (("tensors", tensors), ("stats", stat_arrays)):
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            manifest[section][name] = {"shape": list(a.shape), "offset": len(payload)}
            payload.extend(a.astype("<f8").tobytes())
    header = {
        "format_version": _FORMAT_VERSION,
        "config": params.config.to_dict(),
        "meta": meta or {},
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[ModelParams, NormStats, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    config = ModelConfig(**header["config"])

    def read_section(section):
        out = {}
        for name, info in header["manifest"][section].items():
            shape = tuple(info["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = info["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            out[name] = arr.reshape(shape).astype(np.float64)
        return out

    params = ModelParams(config, read_section("tensors"))
    stats = NormStats.from_arrays(read_section("stats"))
    return params, stats, header["meta"]
