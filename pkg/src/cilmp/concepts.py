"""Frozen per-class concept banks and layer-similarity analysis.

A :class:`ConceptBank` holds, for every class, a sequence of layer-wise
representation vectors. Banks are either generated synthetically from class
prototypes (a deterministic drift-walk generator) or loaded from disk, and
are immutable once built: nothing downstream ever writes to them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, FormatError

BANK_MAGIC = b"CILMPBANK1"
BANK_VERSION = 1


@dataclass
class ConceptBank:
    """Per-class sequences of frozen layer representations.

    ``data`` has shape (num_classes, seq_len, width), class-major then
    layer-major, and never receives gradients.
    """

    num_classes: int
    seq_len: int
    width: int
    data: np.ndarray
    class_names: list[str]
    provenance: str
    _class_tensors: dict[int, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.num_classes, self.seq_len, self.width):
            raise ConfigError(
                f"bank data shape {self.data.shape} does not match "
                f"({self.num_classes}, {self.seq_len}, {self.width})"
            )
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("bank data contains non-finite values")
        if len(self.class_names) != self.num_classes:
            raise ConfigError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        self.data.setflags(write=False)

    def class_sequence(self, class_index: int) -> Tensor:
        """Frozen 2-D tensor (seq_len, width) for one class; cached."""
        if not 0 <= class_index < self.num_classes:
            raise IndexError(f"class index {class_index} out of range [0, {self.num_classes})")
        cached = self._class_tensors.get(class_index)
        if cached is None:
            cached = Tensor(self.data[class_index])
            cached.frozen = True
            self._class_tensors[class_index] = cached
        return cached

    def checksum(self) -> int:
        digest = hashlib.sha256(np.ascontiguousarray(self.data, dtype="<f8").tobytes()).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass
class CkaMatrix:
    """Pairwise layer-similarity matrix; symmetric with unit diagonal."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)


def generate_bank(
    seed: int,
    num_classes: int,
    seq_len: int,
    width: int,
    class_prototypes: np.ndarray,
    layer_drift: float,
    noise_std: float = 0.1,
    class_names: list[str] | None = None,
) -> ConceptBank:
    """Build a synthetic bank from class prototypes.

    Each class row l is ``normalize(prototype(l) + walk(l) + noise)`` where
    ``walk`` is a per-class random walk whose per-layer step has norm about
    ``layer_drift`` and the noise vector has norm about ``noise_std``.
    Prototypes may be one row per class, shared by all layers, or
    layer-resolved with shape (num_classes, seq_len, width). They are
    normalized internally so the two knobs are comparable. Deterministic in
    (seed, arguments); nearer prototypes yield nearer representations.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    protos = np.asarray(class_prototypes, dtype=np.float64)
    if protos.shape == (num_classes, width):
        protos = np.repeat(protos[:, None, :], seq_len, axis=1)
    if protos.shape != (num_classes, seq_len, width):
        raise ConfigError(
            f"prototypes shape {protos.shape}, expected ({num_classes}, {width}) "
            f"or ({num_classes}, {seq_len}, {width})"
        )
    if not 0.0 <= layer_drift <= 1.0:
        raise ConfigError(f"layer_drift {layer_drift} outside [0, 1]")
    norms = np.linalg.norm(protos, axis=2, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DegenerateInputError("a class prototype has near-zero norm")
    protos = protos / norms

    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(width)
    data = np.empty((num_classes, seq_len, width))
    for c in range(num_classes):
        steps = rng.normal(size=(seq_len, width)) * (layer_drift * scale)
        steps[0] = 0.0
        walk = np.cumsum(steps, axis=0)
        noise = rng.normal(size=(seq_len, width)) * (noise_std * scale)
        raw = protos[c] + walk + noise
        data[c] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    names = class_names if class_names is not None else [f"class_{c}" for c in range(num_classes)]
    return ConceptBank(
        num_classes=num_classes,
        seq_len=seq_len,
        width=width,
        data=data,
        class_names=list(names),
        provenance=f"generated(seed={seed}, drift={layer_drift}, noise={noise_std})",
    )


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two sample matrices.

    Rows are samples of the same population; columns are features and are
    centered internally. Invariant to orthogonal transforms and isotropic
    scaling of either argument; 1 for identical representations.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DegenerateInputError(f"cka: sample counts differ or inputs not matrices: {x.shape}, {y.shape}")
    if x.shape[0] < 2:
        raise DegenerateInputError("cka: need at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx <= 0.0 or ny <= 0.0:
        raise DegenerateInputError("cka: an input has zero variance (all rows identical)")
    return float(cross / (nx * ny))


def cka_heatmap(bank: ConceptBank, class_index: int) -> CkaMatrix:
    """Pairwise CKA over the bank's layers, sampled across classes.

    Layer l is represented by the (num_classes, width) matrix of that
    layer's vector in every class, so similarity is estimated over the
    class population. ``class_index`` selects the anchor class a caller is
    inspecting and is validated, but the population estimate is shared.
    """
    if not 0 <= class_index < bank.num_classes:
        raise IndexError(f"class index {class_index} out of range [0, {bank.num_classes})")
    n = bank.seq_len
    layers = [bank.data[:, l, :] for l in range(n)]
    values = np.ones((n, n))
    for i in range(n):
        for j in range(i, n):
            v = cka(layers[i], layers[j])
            values[i, j] = v
            values[j, i] = v
    return CkaMatrix(values=values)


def adjacency_margin(matrix: CkaMatrix) -> float:
    """Mean superdiagonal CKA minus the last row's off-diagonal mean.

    Positive for banks whose adjacent layers are more alike than distant
    ones; used as the scalar summary of the heatmap's layer structure.
    """
    v = matrix.values
    n = v.shape[0]
    if n < 3:
        raise DegenerateInputError("adjacency margin needs at least 3 layers")
    superdiag = np.mean([v[l, l + 1] for l in range(n - 1)])
    last_row = np.mean(v[n - 1, : n - 1])
    return float(superdiag - last_row)


def save_bank(bank: ConceptBank, path: str) -> None:
    names_blob = "\n".join(bank.class_names).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<IIII", BANK_VERSION, bank.num_classes, bank.seq_len, bank.width))
        fh.write(np.ascontiguousarray(bank.data, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(names_blob)))
        fh.write(names_blob)


def load_bank(path: str) -> ConceptBank:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(BANK_MAGIC) or raw[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise FormatError("bad bank magic", byte_offset=0)
    off = len(BANK_MAGIC)
    if len(raw) < off + 16:
        raise FormatError("truncated bank header", byte_offset=len(raw))
    version, c, l_h, d_h = struct.unpack_from("<IIII", raw, off)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}", byte_offset=off)
    off += 16
    payload = c * l_h * d_h * 8
    if c < 1 or l_h < 1 or d_h < 1 or payload > len(raw) - off:
        raise FormatError(
            f"header dimensions ({c}, {l_h}, {d_h}) exceed file payload",
            byte_offset=off,
        )
    data = np.frombuffer(raw, dtype="<f8", count=c * l_h * d_h, offset=off).reshape(c, l_h, d_h).copy()
    off += payload
    if len(raw) < off + 4:
        raise FormatError("missing class-name block", byte_offset=off)
    (name_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + name_len:
        raise FormatError(
            f"class-name block length {name_len} does not match file size",
            byte_offset=off,
        )
    names = raw[off : off + name_len].decode("utf-8").split("\n") if name_len else []
    if len(names) != c:
        raise FormatError(f"{len(names)} class names for {c} classes", byte_offset=off)
    return ConceptBank(
        num_classes=c,
        seq_len=l_h,
        width=d_h,
        data=data,
        class_names=names,
        provenance=f"file:{path}",
    )
