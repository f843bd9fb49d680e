"""Training loop, accuracy evaluation, and the binary checkpoint format."""
from __future__ import annotations

import io
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import TrainConfig, from_dict
from .data import Dataset, iterate_batches, standardize
from .errors import CorruptionError, FormatError, NonFiniteError, UpgradeError
from .model import Classifier
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCOUTCKP"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "loss", "area", "train_acc", "test_acc")


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    area: float
    train_acc: float
    test_acc: float

    def row(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.area!r},{self.train_acc!r},{self.test_acc!r}"


@dataclass
class TrainState:
    config: TrainConfig
    model: Classifier
    optimizer: Adam
    epoch: int = 0
    history: List[EpochRecord] = field(default_factory=list)


def new_state(config: TrainConfig) -> TrainState:
    model = Classifier(config.model, seed=config.seed)
    opt = Adam(model.params, config.learning_rate, config.weight_decay)
    return TrainState(config, model, opt)


def prepare_images(images: np.ndarray, config: TrainConfig) -> np.ndarray:
    return standardize(images, config.data.mean, config.data.std).astype(np.float32)


def evaluate_accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions; ``images`` are already standardized.

    For negative explanations (e = -1) the largest, i.e. least negative,
    logit is still the prediction.
    """
    if len(labels) == 0:
        return 0.0
    pred = model.predict_logits(images, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def train(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Optional[Dataset] = None,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[EpochRecord, TrainState], None]] = None,
) -> TrainState:
    """Run ``config.epochs`` epochs (continuing from ``state`` if given)."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    n = config.model.n_classes
    if train_set.labels.min() < 0 or train_set.labels.max() >= n:
        raise ValueError(f"training labels must lie in [0, {n})")
    state = state or new_state(config)
    model, opt = state.model, state.optimizer
    x_train = prepare_images(train_set.images, config)
    x_test = prepare_images(test_set.images, config) if test_set is not None else None
    y_train = train_set.labels
    steps_per_epoch = -(-len(y_train) // config.batch_size)
    warmup_steps = config.lambda_warmup_epochs * steps_per_epoch

    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        noise_rng = np.random.default_rng([config.seed, 3, epoch])
        tot_loss = tot_area = 0.0
        correct = seen = 0
        for b, idx in enumerate(iterate_batches(len(y_train), config.batch_size, config.seed, epoch)):
            fwd = model.forward(x_train[idx], training=True, rng=noise_rng)
            lam = None
            if warmup_steps > 0:
                step = (epoch - 1) * steps_per_epoch + b + 1
                lam = config.model.xslot.lam * min(1.0, step / warmup_steps)
            loss, _, area = model.loss(fwd, y_train[idx], lam)
            lv = loss.item()
            if not np.isfinite(lv):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            k = len(idx)
            tot_loss += lv * k
            tot_area += (area.item() if area is not None else 0.0) * k
            correct += int((fwd.logits.data.argmax(axis=1) == y_train[idx]).sum())
            seen += k
        test_acc = evaluate_accuracy(model, x_test, test_set.labels) if x_test is not None else float("nan")
        rec = EpochRecord(epoch, tot_loss / seen, tot_area / seen, correct / seen, test_acc)
        state.history.append(rec)
        state.epoch = epoch
        log.info("epoch %d loss %.4f area %.2f train_acc %.4f test_acc %.4f", *rec.__dict__.values())
        if on_epoch is not None:
            on_epoch(rec, state)
    return state


def write_log(path, history: List[EpochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for rec in history:
            fh.write(rec.row() + "\n")


def read_log(path) -> List[EpochRecord]:
    with open(path) as fh:
        lines = fh.read().strip().splitlines()[1:]
    return [EpochRecord(int(p[0]), *map(float, p[1:])) for p in (ln.split(",") for ln in lines)]


# ---------------------------------------------------------------- checkpoints

_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _encode(meta: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    text = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPES:
            raise FormatError(f"cannot checkpoint {name} with dtype {arr.dtype}")
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _DTYPES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def _decode(blob: bytes):
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptionError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise UpgradeError(
            f"checkpoint format version {version}; this build reads version {CHECKPOINT_VERSION}. "
            "Re-save it with a matching release."
        )
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch (truncated or corrupted file)")
    try:
        pos += 4
        (tlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + tlen].decode())
        pos += tlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES_INV[code]
            nbytes = int(np.prod(shape)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CorruptionError(f"tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptionError(f"malformed checkpoint: {err}") from None
    if pos != len(body):
        raise CorruptionError("trailing bytes after last tensor")
    return meta, tensors


def save_checkpoint(path, state: TrainState) -> None:
    meta = {
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "adam_step": state.optimizer.step_count,
        "rng": {"seed": state.config.seed, "next_epoch": state.epoch + 1},
        "history": [rec.__dict__ for rec in state.history],
    }
    tensors = dict(state.model.state_arrays())
    for k in state.model.params:
        tensors[f"adam.m:{k}"] = state.optimizer.m[k]
        tensors[f"adam.v:{k}"] = state.optimizer.v[k]
    blob = _encode(meta, tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        meta, tensors = _decode(fh.read())
    config = from_dict(meta["config"])
    state = new_state(config)
    model = state.model
    for k, p in model.params.items():
        arr = tensors.get(f"param:{k}")
        if arr is None or arr.shape != p.shape:
            raise CorruptionError(f"checkpoint lacks parameter {k} or has the wrong shape")
        p.data = arr
    for k in model.buffers:
        model.buffers[k] = tensors[f"buffer:{k}"]
    for k in model.params:
        state.optimizer.m[k] = tensors[f"adam.m:{k}"]
        state.optimizer.v[k] = tensors[f"adam.v:{k}"]
    state.optimizer.step_count = meta["adam_step"]
    state.epoch = meta["epoch"]
    state.history = [EpochRecord(**r) for r in meta.get("history", [])]
    return state
