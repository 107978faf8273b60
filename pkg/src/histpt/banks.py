"""Historical knowledge banks: local FIFO, hard-sample FIFO and global prototype.

Per-sample update order (see :meth:`KnowledgeBanks.update`):

1. enqueue the newest snapshot into the local bank;
2. average the K highest-entropy local entries and enqueue the result into
   the hard-sample bank;
3. whatever the two FIFOs evicted is averaged and folded into the global
   prototype with momentum.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import prediction_entropy
from .errors import ConfigurationError, UsageError

__all__ = [
    "BankEntry",
    "LocalBank",
    "HardBank",
    "GlobalBank",
    "KnowledgeBanks",
    "select_hard",
    "compact_evicted",
    "bank_prototypes",
    "SOURCES",
]

SOURCES = ("local", "hard", "global")


@dataclass(frozen=True)
class BankEntry:
    """Text features (C x D) of one past sample and its class prediction."""

    text_features: np.ndarray
    prediction: np.ndarray
    entropy: float

    @classmethod
    def from_prediction(cls, text_features, prediction):
        text_features = np.asarray(text_features, dtype=np.float64)
        prediction = np.asarray(prediction, dtype=np.float64)
        if text_features.ndim != 2 or text_features.shape[0] != prediction.shape[0]:
            raise UsageError(
                f"text features {text_features.shape} do not match "
                f"{prediction.shape[0]} class probabilities"
            )
        return cls(text_features, prediction, prediction_entropy(prediction))


class _Ring:
    """Fixed-capacity FIFO over a preallocated (capacity, C, D) array."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.size = 0
        self._head = 0  # next slot to write
        self._buf = None

    def __len__(self):
        return self.size

    def _slots(self):
        """Buffer slots in insertion order, oldest first."""
        return (self._head - self.size + np.arange(self.size)) % self.capacity

    def _write(self, features):
        if self._buf is None:
            self._buf = np.empty((self.capacity,) + features.shape)
        elif features.shape != self._buf.shape[1:]:
            raise UsageError(f"expected features of shape {self._buf.shape[1:]}, got {features.shape}")
        slot = self._head
        evicted = self._buf[slot].copy() if self.size == self.capacity else None
        self._buf[slot] = features
        self._head = (slot + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot, evicted

    def features(self):
        """Stacked features of all residents, oldest first (n x C x D)."""
        if not self.size:
            return np.empty((0,) + (self._buf.shape[1:] if self._buf is not None else (0, 0)))
        return self._buf[self._slots()]

    def snapshot(self, prefix):
        """Raw buffer state as named arrays; restoring it reproduces later prototypes bit-exactly."""
        if self._buf is None:
            return {}
        return {f"{prefix}_buf": self._buf.copy(),
                f"{prefix}_cursor": np.array([self._head, self.size], dtype=np.int64)}

    def restore(self, prefix, arrays):
        if f"{prefix}_buf" not in arrays:
            return
        buf = np.array(arrays[f"{prefix}_buf"], dtype=np.float64)
        if buf.shape[0] != self.capacity:
            raise ConfigurationError(f"snapshot holds {buf.shape[0]} slots, bank has {self.capacity}")
        self._buf = buf
        self._head, self.size = (int(x) for x in arrays[f"{prefix}_cursor"])

    def prototype(self):
        """Category-wise mean of resident features, or None when empty."""
        if not self.size:
            return None
        # Slots 0..size-1 are exactly the residents until the ring first wraps.
        return self._buf[:self.size].sum(axis=0) / self.size


class LocalBank(_Ring):
    """FIFO of the most recent :class:`BankEntry` snapshots."""

    def __init__(self, capacity: int):
        super().__init__(capacity)
        self._pred = None
        self._ent = np.empty(self.capacity)

    def enqueue(self, entry: BankEntry) -> Optional[BankEntry]:
        """Append ``entry``; return the evicted oldest entry once over capacity."""
        if self._pred is None:
            self._pred = np.empty((self.capacity,) + entry.prediction.shape)
        old_pred, old_ent = self._pred[self._head].copy(), self._ent[self._head]
        slot, evicted = self._write(entry.text_features)
        self._pred[slot] = entry.prediction
        self._ent[slot] = entry.entropy
        if evicted is None:
            return None
        return BankEntry(evicted, old_pred, float(old_ent))

    def snapshot(self, prefix):
        out = super().snapshot(prefix)
        if out:
            out[f"{prefix}_pred"] = self._pred.copy()
            out[f"{prefix}_ent"] = self._ent.copy()
        return out

    def restore(self, prefix, arrays):
        super().restore(prefix, arrays)
        if f"{prefix}_pred" in arrays:
            self._pred = np.array(arrays[f"{prefix}_pred"], dtype=np.float64)
            self._ent = np.array(arrays[f"{prefix}_ent"], dtype=np.float64)

    @property
    def entries(self):
        return [BankEntry(self._buf[i].copy(), self._pred[i].copy(), float(self._ent[i]))
                for i in self._slots()]

    def __iter__(self):
        return iter(self.entries)

    def entropies(self):
        return self._ent[self._slots()]

    def _top_entropy_mean(self, k):
        slots = self._slots()
        # Stable sort on negated entropy keeps insertion order among ties.
        order = np.argsort(-self._ent[slots], kind="stable")[:k]
        return self._buf[slots[order]].sum(axis=0) / len(order)


class HardBank(_Ring):
    """FIFO of compacted hard-sample feature matrices (C x D each)."""

    def enqueue(self, record) -> Optional[np.ndarray]:
        return self._write(np.asarray(record, dtype=np.float64))[1]

    @property
    def entries(self):
        return list(self.features())

    def __iter__(self):
        return iter(self.entries)


def select_hard(bank: LocalBank, k: int) -> Optional[np.ndarray]:
    """Mean text features of the ``k`` highest-entropy local entries.

    Ties in entropy go to the older entry. Returns None for an empty bank, in
    which case the hard bank is left alone this step.
    """
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    if not len(bank):
        return None
    return bank._top_entropy_mean(k)


def compact_evicted(local=None, hard=None):
    """Average of the features evicted from the local and hard banks this step.

    Falls back to whichever one is present; returns None if neither is.
    """
    if local is None:
        return hard
    if hard is None:
        return local
    local = np.asarray(local, dtype=np.float64)
    hard = np.asarray(hard, dtype=np.float64)
    if local.shape != hard.shape:
        raise UsageError(f"evicted shapes differ: {local.shape} vs {hard.shape}")
    return 0.5 * (local + hard)


@dataclass
class GlobalBank:
    """Momentum-accumulated category-wise prototype.

    On update the stored prototype becomes ``(1 - gamma) * fresh + gamma * old``;
    with gamma close to 1 the bank changes slowly.
    """

    gamma: float = 0.99
    prototype: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def initialized(self) -> bool:
        return self.prototype is not None

    def update(self, fresh):
        fresh = np.asarray(fresh, dtype=np.float64)
        if not np.all(np.isfinite(fresh)):
            raise UsageError("global bank update with non-finite features")
        if self.prototype is None:
            # Seeding with zeros would leave zero-norm rows for cosine.
            self.prototype = fresh.copy()
            return
        if fresh.shape != self.prototype.shape:
            raise UsageError(f"expected {self.prototype.shape}, got {fresh.shape}")
        self.prototype = (1.0 - self.gamma) * fresh + self.gamma * self.prototype


def bank_prototypes(local: LocalBank, hard: HardBank, global_: GlobalBank,
                    sources=SOURCES) -> dict:
    """Per-source category-wise prototypes; a source is omitted while it is empty."""
    out = {}
    if "local" in sources and len(local):
        out["local"] = local.prototype()
    if "hard" in sources and len(hard):
        out["hard"] = hard.prototype()
    if "global" in sources and global_.initialized:
        out["global"] = global_.prototype
    return out


@dataclass
class KnowledgeBanks:
    """The three banks of one tuning run plus the hard-sample selection size."""

    local: LocalBank
    hard: HardBank
    global_: GlobalBank
    k: int = 16

    @classmethod
    def create(cls, local_size=32, hard_size=32, k=16, gamma=0.99):
        if k < 1:
            raise ConfigurationError(f"K must be >= 1, got {k}")
        return cls(LocalBank(local_size), HardBank(hard_size), GlobalBank(gamma), k)

    def update(self, entry: BankEntry):
        """Run one sample's worth of bank maintenance; returns the evicted pair."""
        evicted_local = self.local.enqueue(entry)
        record = select_hard(self.local, self.k)
        evicted_hard = self.hard.enqueue(record) if record is not None else None
        fresh = compact_evicted(
            None if evicted_local is None else evicted_local.text_features,
            evicted_hard,
        )
        if fresh is not None:
            self.global_.update(fresh)
        return evicted_local, evicted_hard

    def prototypes(self, sources=SOURCES) -> dict:
        return bank_prototypes(self.local, self.hard, self.global_, sources)
