"""Residual affine adapter f(x) = x + W x + b over cached embeddings.

W = 0, b = 0 is the identity map and serves as the frozen starting point;
per-row drift ||f(x) - x|| is the quantity the regularizer penalizes. The
trainable source-kernel parameters (log_gamma, coef0) ride along in
AdapterParams because they are optimized jointly with W and b.

Serialization (KADP v1, little-endian):
    magic "KADP" | version u32 = 1 | d u64 | W row-major f64 | b f64
    | log_gamma f64 | coef0 f64 | CRC32 u32 over everything after the
    version field.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"KADP"
VERSION = 1


class AdapterError(ValueError):
    """Invalid adapter parameters or serialized adapter file."""


@dataclass
class AdapterParams:
    W: np.ndarray
    b: np.ndarray
    log_gamma: float
    coef0: float

    def __post_init__(self) -> None:
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise AdapterError(f"W must be square, got shape {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise AdapterError(
                f"b shape {self.b.shape} does not match W {self.W.shape}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()
                and np.isfinite(self.log_gamma) and np.isfinite(self.coef0)):
            raise AdapterError("non-finite adapter parameter")
        if self.coef0 < 0:
            raise AdapterError(f"coef0 must be >= 0, got {self.coef0}")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.W.copy(), self.b.copy(),
                             float(self.log_gamma), float(self.coef0))


def identity_params(d: int, log_gamma: float = 0.0, coef0: float = 1.0) -> AdapterParams:
    """Identity-map initialization (W = 0, b = 0)."""
    return AdapterParams(np.zeros((d, d)), np.zeros(d), log_gamma, coef0)


def _residual(params: AdapterParams, X: np.ndarray) -> np.ndarray:
    # einsum keeps one fixed per-row reduction order, so batch results are
    # bit-identical to single-row calls and independent of BLAS threading
    return np.einsum("ij,kj->ki", params.W, X) + params.b


def forward(params: AdapterParams, x: np.ndarray) -> np.ndarray:
    """x + W x + b for a single vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d,):
        raise AdapterError(f"input shape {x.shape} does not match d={params.d}")
    return x + _residual(params, x[None, :])[0]


def forward_batch(params: AdapterParams, X: np.ndarray) -> np.ndarray:
    """Row-wise forward; rows agree exactly with per-row forward calls."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise AdapterError(f"input shape {X.shape} does not match d={params.d}")
    return X + _residual(params, X)


def drift(params: AdapterParams, X: np.ndarray) -> np.ndarray:
    """||forward(x_i) - x_i||_2 per row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise AdapterError(f"input shape {X.shape} does not match d={params.d}")
    return np.linalg.norm(_residual(params, X), axis=1)


def save_adapter(path, params: AdapterParams) -> None:
    body = bytearray()
    body += struct.pack("<Q", params.d)
    body += params.W.astype("<f8").tobytes()
    body += params.b.astype("<f8").tobytes()
    body += struct.pack("<dd", params.log_gamma, params.coef0)
    blob = MAGIC + struct.pack("<I", VERSION) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_adapter(path) -> AdapterParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise AdapterError("not an adapter file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise AdapterError(f"unsupported adapter version {version}")
    body, tail = buf[8:-4], buf[-4:]
    if len(body) < 8:
        raise AdapterError("truncated adapter file")
    (d,) = struct.unpack_from("<Q", body, 0)
    need = 8 + 8 * (d * d + d + 2)
    if len(body) != need:
        raise AdapterError("truncated adapter file")
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise AdapterError("adapter checksum mismatch")
    off = 8
    W = np.frombuffer(body, dtype="<f8", count=d * d, offset=off).reshape(d, d)
    off += 8 * d * d
    b = np.frombuffer(body, dtype="<f8", count=d, offset=off)
    off += 8 * d
    log_gamma, coef0 = struct.unpack_from("<dd", body, off)
    return AdapterParams(W.copy(), b.copy(), log_gamma, coef0)
