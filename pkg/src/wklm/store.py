"""Entity embedding store with sparse, concurrent row reads and updates.

Rows live in one table guarded by a fixed set of shard locks (row ``i`` is
guarded by lock ``i % n_shards``). A read copies rows under their shard
locks and an update replaces whole rows under the same locks, so readers
never see a partially written row while writers to rows in other shards
proceed independently. Each row keeps its own AdamW moments and step count.
"""

import struct
import threading

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch, UnknownEntity, VersionMismatch
from .optim import adamw_update

STORE_MAGIC = b"WKES"
STORE_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class EmbeddingStore:
    def __init__(self, n_rows, dim, dtype="float32", rng=None, init_std=0.02, n_shards=16):
        self.dim = int(dim)
        self.dtype = np.dtype(dtype)
        if rng is None:
            self.table = np.zeros((n_rows, dim), dtype=self.dtype)
        else:
            self.table = (rng.standard_normal((n_rows, dim)) * init_std).astype(self.dtype)
        self.m = np.zeros_like(self.table)
        self.v = np.zeros_like(self.table)
        self.steps = np.zeros(n_rows, dtype=np.int64)
        self.versions = np.zeros(n_rows, dtype=np.int64)
        self._locks = [threading.Lock() for _ in range(n_shards)]

    def __len__(self):
        return self.table.shape[0]

    def _check_ids(self, ids):
        ids = np.asarray(ids, dtype=np.int64).ravel()
        bad = ids[(ids < 0) | (ids >= len(self))]
        if bad.size:
            raise UnknownEntity(int(bad[0]))
        return ids

    def _by_shard(self, ids):
        shard = ids % len(self._locks)
        for s in np.unique(shard):
            yield self._locks[s], np.flatnonzero(shard == s)

    def read_rows(self, ids):
        """Copy the requested rows; returns ``(matrix, versions)``."""
        ids = self._check_ids(ids)
        out = np.empty((ids.size, self.dim), dtype=self.dtype)
        ver = np.empty(ids.size, dtype=np.int64)
        for lock, sel in self._by_shard(ids):
            with lock:
                out[sel] = self.table[ids[sel]]
                ver[sel] = self.versions[ids[sel]]
        return out, ver

    def apply_sparse_grads(self, ids, grads, hp):
        """Per-row AdamW; duplicate ids have their gradients summed first."""
        ids = self._check_ids(ids)
        grads = np.asarray(grads)
        if grads.shape != (ids.size, self.dim):
            raise ShapeMismatch(f"gradient shape {grads.shape}, expected {(ids.size, self.dim)}")
        if not np.all(np.isfinite(grads)):
            raise NonFiniteGradient("entity gradient contains non-finite values")
        uniq, inv = np.unique(ids, return_inverse=True)
        summed = np.zeros((uniq.size, self.dim), dtype=self.dtype)
        np.add.at(summed, inv, grads.astype(self.dtype, copy=False))
        for lock, sel in self._by_shard(uniq):
            rows = uniq[sel]
            with lock:
                p = self.table[rows]
                m = self.m[rows]
                v = self.v[rows]
                t = self.steps[rows] + 1
                adamw_update(p, summed[sel], m, v, t[:, None], hp)
                self.table[rows] = p
                self.m[rows] = m
                self.v[rows] = v
                self.steps[rows] = t
                self.versions[rows] += 1

    def snapshot(self, path):
        """Binary dump: header, rows in id order, then optimizer state."""
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<HBQI", STORE_VERSION, self.dtype.itemsize, len(self), self.dim))
            for arr in (self.table, self.m, self.v):
                fh.write(np.ascontiguousarray(arr, dtype=self.dtype.newbyteorder("<")).tobytes())
            for arr in (self.steps, self.versions):
                fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    @classmethod
    def restore(cls, path, dim=None, n_rows=None):
        with open(path, "rb") as fh:
            if fh.read(4) != STORE_MAGIC:
                raise VersionMismatch(f"{path} is not an embedding store snapshot")
            version, itemsize, rows, d = struct.unpack("<HBQI", fh.read(15))
            if version != STORE_VERSION:
                raise VersionMismatch(f"store snapshot version {version}, expected {STORE_VERSION}")
            if dim is not None and d != dim:
                raise VersionMismatch(f"store dimension {d}, expected {dim}")
            if n_rows is not None and rows != n_rows:
                raise VersionMismatch(f"store has {rows} rows, expected {n_rows}")
            if itemsize not in _DTYPES:
                raise VersionMismatch(f"unsupported element size {itemsize}")
            dt = _DTYPES[itemsize]
            store = cls(rows, d, dtype=dt.newbyteorder("="))
            for name in ("table", "m", "v"):
                data = np.frombuffer(fh.read(rows * d * itemsize), dtype=dt).reshape(rows, d)
                setattr(store, name, data.astype(store.dtype))
            for name in ("steps", "versions"):
                setattr(store, name, np.frombuffer(fh.read(rows * 8), dtype="<i8").astype(np.int64))
        return store
