"""Merging t-digest with the arcsine (k1) scale function.

Centroids are formed greedily over sorted data so that each one spans at most
one unit of ``k(q) = delta / (2*pi) * asin(2q - 1)``; tails keep tiny
centroids, which is what makes the 1st/99th percentile cutoffs accurate.

``merge`` is a lazy union of centroid lists kept in canonical (mean, weight)
order. Union is associative and commutative, so any merge order over the same
insertion partitioning yields bit-identical queries; compression happens only
when a query or an insert needs it.
"""

from __future__ import annotations

import math
from typing import Iterable, List, Optional, Tuple

import numpy as np


class EmptyDigestError(ValueError):
    pass


class TDigest:
    def __init__(self, delta: float = 100.0, buffer_factor: int = 20):
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.delta = float(delta)
        self.buffer_factor = buffer_factor
        self._means: List[float] = []
        self._weights: List[float] = []
        self._buf: List[float] = []
        self._buf_w: List[float] = []
        self._unmerged = False  # centroid list is a union awaiting compression
        self.min = math.inf
        self.max = -math.inf
        self.total_weight = 0.0

    def __len__(self):
        return len(self._means) + len(self._buf)

    def __repr__(self):
        return f"TDigest(delta={self.delta:g}, n={self.total_weight:g}, centroids={len(self._means)})"

    # ------------------------------------------------------------ inserts
    def add(self, value: float, weight: float = 1.0) -> "TDigest":
        value = float(value)
        if value != value:
            raise ValueError("cannot insert NaN")
        if weight <= 0:
            raise ValueError("weight must be positive")
        if value < self.min:
            self.min = value
        if value > self.max:
            self.max = value
        self._buf.append(value)
        self._buf_w.append(float(weight))
        self.total_weight += weight
        if len(self._buf) >= self.buffer_factor * self.delta:
            self._flush()
        return self

    def update(self, values: Iterable[float]) -> "TDigest":
        """Insert many unit-weight values at once."""
        if not hasattr(values, "__len__"):
            values = list(values)
        arr = np.asarray(values, dtype=float).ravel()
        if arr.size == 0:
            return self
        if np.isnan(arr).any():
            raise ValueError("cannot insert NaN")
        self.min = min(self.min, float(arr.min()))
        self.max = max(self.max, float(arr.max()))
        self.total_weight += float(arr.size)
        self._buf.extend(arr.tolist())
        self._buf_w.extend([1.0] * arr.size)
        if len(self._buf) >= self.buffer_factor * self.delta:
            self._flush()
        return self

    # ---------------------------------------------------------- compression
    def _compressed(self, means, weights) -> Tuple[List[float], List[float]]:
        if not means:
            return [], []
        m = np.asarray(means, dtype=float)
        w = np.asarray(weights, dtype=float)
        order = np.lexsort((w, m))
        ml = m[order].tolist()
        wl = w[order].tolist()
        total = float(w.sum())
        c = self.delta / (2 * math.pi)
        asin = math.asin
        out_m: List[float] = []
        out_w: List[float] = []
        cm, cw = ml[0], wl[0]
        so_far = 0.0
        k_left = c * asin(-1.0)
        for x, wx in zip(ml[1:], wl[1:]):
            q_right = (so_far + cw + wx) / total
            if q_right > 1.0:
                q_right = 1.0
            if c * asin(2 * q_right - 1) - k_left <= 1.0:
                cw += wx
                cm += (x - cm) * wx / cw
            else:
                out_m.append(cm)
                out_w.append(cw)
                so_far += cw
                q_left = so_far / total
                k_left = c * asin(2 * (q_left if q_left < 1.0 else 1.0) - 1)
                cm, cw = x, wx
        out_m.append(cm)
        out_w.append(cw)
        return out_m, out_w

    def _flush(self) -> None:
        if not self._buf:
            return
        self._means, self._weights = self._compressed(self._means + self._buf,
                                                      self._weights + self._buf_w)
        self._buf, self._buf_w = [], []
        self._unmerged = False

    def compress(self) -> "TDigest":
        if self._buf or self._unmerged:
            self._means, self._weights = self._compressed(self._means + self._buf,
                                                          self._weights + self._buf_w)
            self._buf, self._buf_w = [], []
            self._unmerged = False
        return self

    @property
    def centroids(self) -> List[Tuple[float, float]]:
        m, w = self._view()
        return list(zip(m, w))

    def _view(self) -> Tuple[List[float], List[float]]:
        if self._buf or self._unmerged:
            return self._compressed(self._means + self._buf, self._weights + self._buf_w)
        return self._means, self._weights

    # -------------------------------------------------------------- merge
    def merge(self, other: "TDigest") -> "TDigest":
        """New digest holding the union of both digests' centroids."""
        a = self.copy()
        b = other.copy()
        a._flush()
        b._flush()
        out = TDigest(self.delta, self.buffer_factor)
        pairs = sorted(zip(a._means + b._means, a._weights + b._weights))
        out._means = [p[0] for p in pairs]
        out._weights = [p[1] for p in pairs]
        out._unmerged = True
        out.min = min(a.min, b.min)
        out.max = max(a.max, b.max)
        out.total_weight = a.total_weight + b.total_weight
        # keep unions bounded; past this size merge order can matter in the last bits
        if len(out._means) > 50 * self.delta:
            out.compress()
        return out

    def copy(self) -> "TDigest":
        d = TDigest(self.delta, self.buffer_factor)
        d._means = list(self._means)
        d._weights = list(self._weights)
        d._buf = list(self._buf)
        d._buf_w = list(self._buf_w)
        d._unmerged = self._unmerged
        d.min, d.max, d.total_weight = self.min, self.max, self.total_weight
        return d

    # -------------------------------------------------------------- queries
    def quantile(self, q: float) -> float:
        if not 0.0 <= q <= 1.0:
            raise ValueError("q must be in [0, 1]")
        if self.total_weight == 0:
            raise EmptyDigestError("quantile of an empty digest")
        if q == 0.0:
            return self.min
        if q == 1.0:
            return self.max
        m, w = self._view()
        n = len(m)
        if n == 1:
            return m[0]
        total = self.total_weight
        index = q * total
        if index < 1:
            return self.min
        if w[0] > 1 and index < w[0] / 2:
            return self.min + (index - 1) / (w[0] / 2 - 1) * (m[0] - self.min)
        if index > total - 1:
            return self.max
        if w[-1] > 1 and total - index <= w[-1] / 2:
            return self.max - (total - index - 1) / (w[-1] / 2 - 1) * (self.max - m[-1])
        so_far = w[0] / 2
        for i in range(n - 1):
            dw = (w[i] + w[i + 1]) / 2
            if so_far + dw > index:
                left_unit = 0.0
                if w[i] == 1:
                    if index - so_far < 0.5:
                        return m[i]
                    left_unit = 0.5
                right_unit = 0.0
                if w[i + 1] == 1:
                    if so_far + dw - index <= 0.5:
                        return m[i + 1]
                    right_unit = 0.5
                z1 = index - so_far - left_unit
                z2 = so_far + dw - index - right_unit
                return (m[i] * z2 + m[i + 1] * z1) / (z1 + z2)
            so_far += dw
        return m[-1]

    def cdf(self, x: float) -> float:
        """Approximate fraction of inserted weight <= x."""
        if self.total_weight == 0:
            raise EmptyDigestError("cdf of an empty digest")
        if x < self.min:
            return 0.0
        if x >= self.max:
            return 1.0
        m, w = self._view()
        total = self.total_weight
        so_far = 0.0
        prev_m, prev_c = self.min, 0.0
        for mi, wi in zip(m, w):
            center = so_far + wi / 2
            if x < mi:
                if mi == prev_m:
                    return prev_c / total
                return (prev_c + (center - prev_c) * (x - prev_m) / (mi - prev_m)) / total
            prev_m, prev_c = mi, center
            so_far += wi
        return (prev_c + (total - prev_c) * (x - prev_m) / (self.max - prev_m)) / total

    # -------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        m, w = self._view()
        return {"delta": self.delta, "min": self.min, "max": self.max,
                "total_weight": self.total_weight, "means": list(m), "weights": list(w)}

    @classmethod
    def from_dict(cls, d: dict) -> "TDigest":
        t = cls(d["delta"])
        t._means = list(d["means"])
        t._weights = list(d["weights"])
        t.min, t.max, t.total_weight = d["min"], d["max"], d["total_weight"]
        return t


def merge_all(digests: Iterable[TDigest], delta: Optional[float] = None) -> TDigest:
    out: Optional[TDigest] = None
    for d in digests:
        out = d.copy() if out is None else out.merge(d)
    return out if out is not None else TDigest(delta or 100.0)
