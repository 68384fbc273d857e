"""The classifier: a one-hidden-layer MLP wrapped by a persistent calibration head.

The head starts as the identity. A post-hoc calibration phase may promote it
to a learned temperature or an affine map over the logits; once promoted it
is never reset, and its parameters keep training together with the base
network on later experiences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Matrix, Param
from .errors import ConfigError, ShapeError, UsageError

MIN_TEMPERATURE = 1e-3


@dataclass
class MlpClassifier:
    W1: Param
    b1: Param
    W2: Param
    b2: Param
    in_dim: int
    hidden_dim: int
    n_classes: int

    def params(self) -> list[Param]:
        return [self.W1, self.b1, self.W2, self.b2]


def init_mlp(in_dim: int, hidden_dim: int, n_classes: int, seed: int) -> MlpClassifier:
    """Glorot-uniform weights, zero biases, fully seeded."""
    if min(in_dim, hidden_dim, n_classes) <= 0:
        raise ConfigError(
            f"dims must be positive, got {(in_dim, hidden_dim, n_classes)}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return MlpClassifier(
        W1=Param(glorot(in_dim, hidden_dim)),
        b1=Param(np.zeros((1, hidden_dim))),
        W2=Param(glorot(hidden_dim, n_classes)),
        b2=Param(np.zeros((1, n_classes))),
        in_dim=in_dim, hidden_dim=hidden_dim, n_classes=n_classes)


def forward_logits(m: MlpClassifier, x) -> Matrix:
    """relu(x @ W1 + b1) @ W2 + b2, as a graph node."""
    if not isinstance(x, Matrix):
        x = Matrix(x)
    if x.cols != m.in_dim:
        raise ShapeError(f"input has {x.cols} features, model expects {m.in_dim}")
    h = ad.relu(ad.add_row_bias(ad.matmul(x, m.W1), m.b1))
    return ad.add_row_bias(ad.matmul(h, m.W2), m.b2)


# ---------------------------------------------------------------------------
# Calibration heads
# ---------------------------------------------------------------------------


class IdentityHead:
    """No-op head: logits pass through unchanged."""

    kind = "identity"

    def apply(self, z: Matrix) -> Matrix:
        return z

    def params(self) -> list[Param]:
        return []

    def mask_grads(self) -> None:
        pass

    def project(self) -> None:
        pass


class TemperatureHead:
    """Divides logits by a learned positive scalar; prediction-preserving."""

    kind = "temperature"

    def __init__(self, t: float = 1.0):
        if t < MIN_TEMPERATURE:
            raise ConfigError(f"temperature must be >= {MIN_TEMPERATURE}, got {t}")
        self.T = Param([[float(t)]])

    @property
    def temperature(self) -> float:
        return float(self.T.data[0, 0])

    def apply(self, z: Matrix) -> Matrix:
        return ad.div_by_scalar(z, self.T)

    def params(self) -> list[Param]:
        return [self.T]

    def mask_grads(self) -> None:
        pass

    def project(self) -> None:
        # keep T away from zero after every optimizer step
        if self.T.data[0, 0] < MIN_TEMPERATURE:
            self.T.data[0, 0] = MIN_TEMPERATURE


class AffineHead:
    """Learned affine map on logits: z @ W^T + b (diagonal W for vector scaling)."""

    kind = "affine"

    def __init__(self, n_classes: int, diagonal_only: bool = False):
        self.n_classes = n_classes
        self.diagonal_only = diagonal_only
        self.W = Param(np.eye(n_classes))
        self.b = Param(np.zeros((1, n_classes)))

    def apply(self, z: Matrix) -> Matrix:
        if z.cols != self.n_classes:
            raise ShapeError(f"head expects {self.n_classes} logits, got {z.cols}")
        return ad.add_row_bias(ad.matmul(z, ad.transpose(self.W)), self.b)

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def mask_grads(self) -> None:
        # diagonal constraint: off-diagonal entries never receive updates
        if self.diagonal_only and self.W.grad is not None:
            diag = np.diag(np.diag(self.W.grad))
            self.W.grad[:] = diag

    def project(self) -> None:
        pass


Head = IdentityHead | TemperatureHead | AffineHead


@dataclass
class ModelOutput:
    logits: np.ndarray
    probs: np.ndarray
    predicted: np.ndarray    # argmax per row, lowest index on ties
    confidence: np.ndarray   # max prob per row


@dataclass
class CalibratedModel:
    base: MlpClassifier
    head: Head

    def params(self) -> list[Param]:
        return self.base.params() + self.head.params()

    def logits(self, x) -> Matrix:
        return self.head.apply(forward_logits(self.base, x))


def apply_head(head: Head, z: Matrix) -> Matrix:
    return head.apply(z)


def predict(cm: CalibratedModel, x) -> ModelOutput:
    z = cm.logits(x)
    probs = ad.softmax_rows(z).data
    return ModelOutput(
        logits=z.data,
        probs=probs,
        predicted=probs.argmax(axis=1),
        confidence=probs.max(axis=1))


# ---------------------------------------------------------------------------
# Checkpoints
#
# Binary layout (big-endian):
#   8 bytes   magic "CALCKPT1"
#   u8        head tag: 0 identity, 1 temperature, 2 affine, 3 affine-diagonal
#   u32 x3    in_dim, hidden_dim, n_classes
#   repeated  per parameter, in order W1 b1 W2 b2 [T | W b]:
#             u32 rows, u32 cols, rows*cols f64 row-major
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CALCKPT1"
_HEAD_TAGS = {"identity": 0, "temperature": 1, "affine": 2}


def _head_tag(head: Head) -> int:
    if isinstance(head, AffineHead):
        return 3 if head.diagonal_only else 2
    return _HEAD_TAGS[head.kind]


def _write_param(f, p: Param) -> None:
    f.write(struct.pack(">II", p.rows, p.cols))
    f.write(struct.pack(f">{p.rows * p.cols}d", *p.data.reshape(-1)))


def _read_param(f) -> Param:
    rows, cols = struct.unpack(">II", f.read(8))
    vals = struct.unpack(f">{rows * cols}d", f.read(8 * rows * cols))
    return Param(np.array(vals).reshape(rows, cols))


def save_checkpoint(cm: CalibratedModel, path: str) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">BIII", _head_tag(cm.head), cm.base.in_dim,
                            cm.base.hidden_dim, cm.base.n_classes))
        for p in cm.base.params():
            _write_param(f, p)
        for p in cm.head.params():
            _write_param(f, p)


def load_checkpoint(path: str) -> CalibratedModel:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"not a checkpoint file: bad magic {magic!r}")
        tag, in_dim, hidden_dim, n_classes = struct.unpack(">BIII", f.read(13))
        base = MlpClassifier(_read_param(f), _read_param(f), _read_param(f),
                             _read_param(f), in_dim, hidden_dim, n_classes)
        if tag == 0:
            head: Head = IdentityHead()
        elif tag == 1:
            head = TemperatureHead()
            head.T = _read_param(f)
        elif tag in (2, 3):
            head = AffineHead(n_classes, diagonal_only=(tag == 3))
            head.W = _read_param(f)
            head.b = _read_param(f)
        else:
            raise UsageError(f"unknown head tag {tag}")
    return CalibratedModel(base, head)
