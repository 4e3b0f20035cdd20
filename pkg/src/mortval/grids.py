"""Spatial grids, time meshes and discrete solution surfaces.

The hazard dimension is discretized in the transformed coordinate
``y = ln(lam - lam_floor)``: the proportional SDE coefficients become
constant in space there and the floor maps to ``y -> -inf``, so simulated
and discretized hazards can never cross it.  Surfaces store one or more
time slices of a solved quantity together with the grids that define it,
and serialize to a columnar CSV or a checksummed binary cache.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = ["HazardGrid", "RateGrid", "TimeMesh", "SolverConfig", "Surface"]

# Default truncation of the y-domain relative to the reference gap
# lam_ref - lam_floor.
LO_MULT = 1e-5
HI_MULT = 50.0


def _anchored_nodes(lo: float, hi: float, n: int, anchor: float | None):
    """Uniform nodes on [lo, hi], shifted minimally so anchor is a node."""
    if n < 3:
        raise DomainError("grids need at least 3 nodes")
    nodes = np.linspace(lo, hi, n)
    if anchor is not None and lo < anchor < hi:
        step = nodes[1] - nodes[0]
        shift = (anchor - lo) % step
        if shift > step / 2:
            shift -= step
        nodes = nodes + shift
    return nodes


@dataclass(frozen=True)
class HazardGrid:
    """Uniform grid in ``y = ln(lam - lam_floor)``."""

    y: np.ndarray
    lam_floor: float

    def __post_init__(self):
        if len(self.y) < 3:
            raise DomainError("hazard grid needs at least 3 nodes")
        if not np.all(np.diff(self.y) > 0):
            raise DomainError("hazard grid nodes must be strictly increasing")
        self.y.setflags(write=False)

    @classmethod
    def from_reference(cls, lam_floor: float, lam_ref: float, n: int,
                       lo_mult: float = LO_MULT, hi_mult: float = HI_MULT,
                       anchor_lam: float | None = None) -> "HazardGrid":
        """Build a grid spanning ``[lo_mult, hi_mult] * (lam_ref - floor)``.

        When ``anchor_lam`` is given the grid is shifted so that hazard
        value lies exactly on a node (probes there avoid interpolation
        bias).  A degenerate reference at the floor falls back to lam_ref
        itself as the scale.
        """
        gap = lam_ref - lam_floor
        if gap <= 0:
            gap = max(lam_ref, 1e-3)
        lo, hi = math.log(lo_mult * gap), math.log(hi_mult * gap)
        anchor = None
        if anchor_lam is not None and anchor_lam > lam_floor:
            anchor = math.log(anchor_lam - lam_floor)
        return cls(y=_anchored_nodes(lo, hi, n, anchor), lam_floor=lam_floor)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def lam(self) -> np.ndarray:
        return self.lam_floor + np.exp(self.y)

    def y_of(self, lam: float) -> float:
        """Transformed coordinate of a hazard value, clamped to the grid."""
        if lam < self.lam_floor:
            raise DomainError(f"hazard {lam} below floor {self.lam_floor}")
        if lam == self.lam_floor:
            return float(self.y[0])
        return float(min(max(math.log(lam - self.lam_floor), self.y[0]), self.y[-1]))


@dataclass(frozen=True)
class RateGrid:
    """Uniform grid in the short rate with ``r_min > 0``."""

    r: np.ndarray

    def __post_init__(self):
        if len(self.r) < 3:
            raise DomainError("rate grid needs at least 3 nodes")
        if self.r[0] <= 0:
            raise DomainError("rate grid must have r_min > 0")
        if not np.all(np.diff(self.r) > 0):
            raise DomainError("rate grid nodes must be strictly increasing")
        self.r.setflags(write=False)

    @classmethod
    def from_bounds(cls, r_min: float, r_max: float, n: int,
                    anchor_r: float | None = None) -> "RateGrid":
        nodes = _anchored_nodes(r_min, r_max, n, anchor_r)
        if nodes[0] <= 0:
            nodes = nodes - nodes[0] + max(r_min, 1e-6)
        return cls(r=nodes)

    @property
    def n(self) -> int:
        return len(self.r)

    @property
    def dr(self) -> float:
        return float(self.r[1] - self.r[0])


@dataclass(frozen=True)
class TimeMesh:
    """Uniform backward-marching mesh on [0, horizon]."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise DomainError("time mesh needs at least 1 step")
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping and fixed-point iteration controls.

    ``theta`` weights the implicit side of the one-dimensional scheme
    (0.5 = Crank-Nicolson).  The square-root nonlinearity is handled by
    Picard iteration; convergence is declared when the sup-norm change is
    below ``picard_tol`` relative to ``max(1, sup|v|)`` so that rescaled
    problems iterate identically.
    """

    theta: float = 0.5
    picard_tol: float = 1e-10
    max_picard: int = 50
    boundary: str = "extrapolate"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise DomainError("theta must be in [0, 1]")
        if self.picard_tol <= 0:
            raise DomainError("picard_tol must be positive")
        if self.max_picard < 1:
            raise DomainError("max_picard must be >= 1")
        if self.boundary != "extrapolate":
            raise DomainError("only 'extrapolate' boundaries are supported")


_CACHE_MAGIC = b"MVSURF01"


@dataclass
class Surface:
    """Discrete values of a solved quantity on (rate x hazard x time).

    ``values[k]`` is the slice at ``times[k]`` with shape ``(n_r, n_y)``
    in two-factor mode or ``(n_y,)`` in hazard-only/deterministic-rate
    mode.  ``meta`` records how the surface was produced (equation id,
    level, alpha, fixed rate, ...).
    """

    label: str
    values: np.ndarray
    times: np.ndarray
    hazard_grid: HazardGrid
    rate_grid: RateGrid | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != self.values.shape[0]:
            raise DomainError("one stored slice per stored time required")
        if not np.all(np.isfinite(self.values)):
            raise DomainError(f"surface {self.label!r} contains non-finite values")

    @property
    def two_factor(self) -> bool:
        return self.rate_grid is not None

    def slice_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"time {t} not stored for surface {self.label!r}")
        return self.values[k]

    def value_at(self, lam: float, t: float, r: float | None = None) -> float:
        """Multilinear interpolation at a probe point (nodes are exact)."""
        rq = None if r is None else np.asarray([float(r)])
        return float(self.eval_many(np.asarray([float(lam)]), t, r=rq)[0])

    def eval_many(self, lam: np.ndarray, t: float, r: np.ndarray | None = None) -> np.ndarray:
        """Vectorized lookup at one time for arrays of hazard (and rate) states."""
        lam = np.asarray(lam, dtype=float)
        gap = lam - self.hazard_grid.lam_floor
        if np.any(gap < 0):
            raise DomainError("hazard below the floor in surface lookup")
        y = self.hazard_grid.y
        yq = np.where(gap > 0, np.log(np.maximum(gap, 1e-300)), y[0])
        yq = np.clip(yq, y[0], y[-1])
        ts = self.times
        if len(ts) == 1:
            k0, k1, wt = 0, 0, 0.0
        else:
            k0 = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
            k1 = k0 + 1
            wt = min(max((t - ts[k0]) / (ts[k1] - ts[k0]), 0.0), 1.0)

        def interp_slice(sl):
            if self.two_factor:
                if r is None:
                    raise DomainError("two-factor surface probe requires r")
                return _bilinear_vec(self.rate_grid.r, y, sl, np.asarray(r, dtype=float), yq)
            return np.interp(yq, y, sl)

        v = (1 - wt) * interp_slice(self.values[k0])
        if k1 != k0 and wt > 0.0:
            v = v + wt * interp_slice(self.values[k1])
        return v

    # -- serialization ----------------------------------------------------

    def to_csv(self, fh) -> None:
        """Write rows ``r, lambda, t, value, label`` (r empty if absent)."""
        owns = isinstance(fh, str)
        out = open(fh, "w", newline="") if owns else fh
        try:
            out.write("r,lambda,t,value,label\n")
            lam = self.hazard_grid.lam
            fixed_r = self.meta.get("r_fixed")
            for k, t in enumerate(self.times):
                sl = self.values[k]
                if self.two_factor:
                    for i, rv in enumerate(self.rate_grid.r):
                        for j in range(self.hazard_grid.n):
                            out.write(f"{rv!r},{lam[j]!r},{t!r},{sl[i, j]!r},{self.label}\n")
                else:
                    rs = "" if fixed_r is None else repr(float(fixed_r))
                    for j in range(self.hazard_grid.n):
                        out.write(f"{rs},{lam[j]!r},{t!r},{sl[j]!r},{self.label}\n")
        finally:
            if owns:
                out.close()

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()

    def save_cache(self, path: str) -> None:
        """Compact binary cache: magic, JSON header, raw float64 payload."""
        payload = np.ascontiguousarray(self.values).tobytes()
        header = {
            "label": self.label,
            "shape": list(self.values.shape),
            "times": self.times.tolist(),
            "hazard_y": self.hazard_grid.y.tolist(),
            "lam_floor": self.hazard_grid.lam_floor,
            "rate_r": None if self.rate_grid is None else self.rate_grid.r.tolist(),
            "meta": _jsonable(self.meta),
            "checksum": hashlib.sha256(payload).hexdigest(),
        }
        blob = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            fh.write(payload)

    @classmethod
    def load_cache(cls, path: str) -> "Surface":
        with open(path, "rb") as fh:
            if fh.read(len(_CACHE_MAGIC)) != _CACHE_MAGIC:
                raise DomainError(f"{path} is not a surface cache")
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n).decode())
            payload = fh.read()
        if hashlib.sha256(payload).hexdigest() != header["checksum"]:
            raise DomainError(f"{path}: corrupt cache (checksum mismatch)")
        values = np.frombuffer(payload, dtype=float).reshape(header["shape"]).copy()
        hg = HazardGrid(y=np.array(header["hazard_y"]), lam_floor=header["lam_floor"])
        rg = None if header["rate_r"] is None else RateGrid(r=np.array(header["rate_r"]))
        return cls(label=header["label"], values=values,
                   times=np.array(header["times"]), hazard_grid=hg, rate_grid=rg,
                   meta=header.get("meta", {}))


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (str, int, float, bool)) or v is None:
            out[k] = v
        elif isinstance(v, np.generic):
            out[k] = v.item()
    return out


def _bilinear_vec(xs: np.ndarray, ys: np.ndarray, z: np.ndarray,
                  xq: np.ndarray, yq: np.ndarray) -> np.ndarray:
    xq = np.clip(xq, xs[0], xs[-1])
    yq = np.clip(yq, ys[0], ys[-1])
    i = np.clip(np.searchsorted(xs, xq) - 1, 0, len(xs) - 2)
    j = np.clip(np.searchsorted(ys, yq) - 1, 0, len(ys) - 2)
    wx = (xq - xs[i]) / (xs[i + 1] - xs[i])
    wy = (yq - ys[j]) / (ys[j + 1] - ys[j])
    return ((1 - wx) * (1 - wy) * z[i, j] + wx * (1 - wy) * z[i + 1, j]
            + (1 - wx) * wy * z[i, j + 1] + wx * wy * z[i + 1, j + 1])
