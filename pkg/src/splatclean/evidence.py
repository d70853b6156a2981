"""Per-Gaussian running statistics that drive pruning decisions.

The ledger tracks, aligned with the Gaussian list at all times:
  - visibility: count of training iterations with a non-trivial render hit,
  - grad_ema: exponential moving average of the center-gradient norm,
  - age: steps since the Gaussian was created.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"SPLEVLG1"


@dataclass
class EvidenceLedger:
    visibility: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    grad_ema: np.ndarray = field(default_factory=lambda: np.zeros(0))
    age: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ema_decay: float = 0.99

    def __post_init__(self):
        self.visibility = np.asarray(self.visibility, dtype=np.int64)
        self.grad_ema = np.asarray(self.grad_ema, dtype=np.float64)
        self.age = np.asarray(self.age, dtype=np.int64)
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if not (len(self.visibility) == len(self.grad_ema) == len(self.age)):
            raise ValueError("ledger arrays must have equal length")

    @classmethod
    def zeros(cls, count: int, ema_decay: float = 0.99) -> "EvidenceLedger":
        return cls(
            visibility=np.zeros(count, dtype=np.int64),
            grad_ema=np.zeros(count),
            age=np.zeros(count, dtype=np.int64),
            ema_decay=ema_decay,
        )

    def __len__(self) -> int:
        return len(self.visibility)

    def update(self, hits: np.ndarray, grad_norms: np.ndarray) -> None:
        """One training iteration: bump hit counters, decay the gradient EMA,
        and age every entry."""
        hits = np.asarray(hits, dtype=bool)
        grad_norms = np.asarray(grad_norms, dtype=np.float64)
        if hits.shape != (len(self),) or grad_norms.shape != (len(self),):
            raise ValueError(
                f"update arrays of shape {hits.shape}/{grad_norms.shape} do not match "
                f"ledger length {len(self)}"
            )
        self.visibility[hits] += 1
        self.grad_ema = self.ema_decay * self.grad_ema + (1.0 - self.ema_decay) * grad_norms
        self.age += 1

    def spawn(self, count: int) -> None:
        """Append `count` fresh entries (zero visibility, EMA, and age)."""
        if count < 0:
            raise ValueError("spawn count must be non-negative")
        self.visibility = np.concatenate([self.visibility, np.zeros(count, dtype=np.int64)])
        self.grad_ema = np.concatenate([self.grad_ema, np.zeros(count)])
        self.age = np.concatenate([self.age, np.zeros(count, dtype=np.int64)])

    def remove(self, indices) -> None:
        """Drop entries; survivors compact in order (same index map as the
        Gaussian list must use)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise IndexError(f"remove index out of range for ledger of {len(self)}")
        keep = np.ones(len(self), dtype=bool)
        keep[idx] = False
        self.visibility = self.visibility[keep]
        self.grad_ema = self.grad_ema[keep]
        self.age = self.age[keep]

    def stabilization_gate(self, min_age: int = 500) -> np.ndarray:
        """True where a Gaussian has existed long enough to be pruning-eligible."""
        return self.age >= min_age

    def save(self, path) -> None:
        header = _MAGIC + struct.pack("<QQd", 1, len(self), self.ema_decay)
        records = np.empty(len(self), dtype=[("v", "<i8"), ("age", "<i8"), ("g", "<f8")])
        records["v"] = self.visibility
        records["age"] = self.age
        records["g"] = self.grad_ema
        with open(path, "wb") as f:
            f.write(header)
            f.write(records.tobytes())

    @classmethod
    def load(cls, path) -> "EvidenceLedger":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:8] != _MAGIC:
            raise ValueError(f"{path}: not an evidence ledger sidecar")
        version, count, decay = struct.unpack("<QQd", raw[8:32])
        if version != 1:
            raise ValueError(f"{path}: unsupported ledger version {version}")
        records = np.frombuffer(raw[32:], dtype=[("v", "<i8"), ("age", "<i8"), ("g", "<f8")])
        if records.size != count:
            raise ValueError(f"{path}: ledger payload holds {records.size} records, header says {count}")
        return cls(
            visibility=records["v"].copy(),
            grad_ema=records["g"].copy(),
            age=records["age"].copy(),
            ema_decay=decay,
        )
