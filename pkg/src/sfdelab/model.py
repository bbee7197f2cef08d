"""Delay models, segment grids and the built-in coefficient families.

A model is the tuple ``(d, m, r, f, g, h, L)`` for

    dx(t) = (f(x(t)) + g(x_t)) dt + h(x_t) dB(t),

where ``x_t(θ) = x(t + θ)`` for ``θ ∈ [-r, 0]``.  Segments are stored on a
uniform grid.  All coefficient maps are batched: ``f`` takes an ``(N, d)``
array, ``g`` and ``h`` take a segment view with ``.grid``, ``.node(i)`` and
``.values`` and return ``(N, d)`` and ``(N, d, m)`` arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

__all__ = [
    "AffineDiffusion",
    "ConfigError",
    "DelayModel",
    "DistributedDelay",
    "H0Failure",
    "LinearDrift",
    "ModelError",
    "PointDelay",
    "PolyDissipativeDrift",
    "Segment",
    "SegmentBatch",
    "SegmentGrid",
    "ZeroFunctional",
    "check_h2",
    "evaluate_coefficients",
    "load_model",
    "model_from_config",
    "preset",
    "sup_norm",
    "sup_norms",
    "trace_norm",
    "verify_h0",
]


class ConfigError(ValueError):
    """Invalid configuration.  ``key_path`` names the offending entry."""

    def __init__(self, message: str, key_path: str | None = None):
        self.message = message
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class ModelError(ValueError):
    """A coefficient produced a non-finite value."""

    def __init__(self, message: str, node: int | None = None):
        self.node = node
        super().__init__(message if node is None else f"{message} (node {node})")


class H0Failure(ModelError):
    """The drift does not detectably satisfy the dissipativity hypothesis."""


# ---------------------------------------------------------------------------
# grid and segments


@dataclass(frozen=True)
class SegmentGrid:
    """Uniform grid ``θ_i = -r + i·dt`` on ``[-r, 0]`` with ``n·dt = r``."""

    r: float
    dt: float
    n: int = field(init=False)

    def __post_init__(self):
        if not (self.r > 0 and self.dt > 0):
            raise ConfigError("r and dt must be positive", "grid")
        n = int(round(self.r / self.dt))
        if n < 1 or abs(n * self.dt - self.r) > math.ulp(self.r):
            raise ConfigError(f"dt={self.dt!r} does not divide r={self.r!r}", "grid.dt")
        object.__setattr__(self, "n", n)

    @property
    def nodes(self) -> np.ndarray:
        theta = (np.arange(self.n + 1) - self.n) * self.dt
        theta[0] = -self.r
        return theta

    def index_of(self, theta: float) -> int:
        """Node index of a grid-aligned offset ``theta ∈ [-r, 0]``."""
        if not -self.r - 1e-12 * self.r <= theta <= 1e-12 * self.r:
            raise ConfigError(f"offset {theta!r} outside [-r, 0]", "theta")
        k = (theta + self.r) / self.dt
        i = int(round(k))
        if abs(k - i) > 1e-9:
            raise ConfigError(f"offset {theta!r} is not on the grid (dt={self.dt!r})", "theta")
        return i


class SegmentBatch:
    """A batch of ``N`` segments on a common grid, values shaped ``(N, n+1, d)``."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: SegmentGrid, values: np.ndarray):
        self.grid = grid
        self.values = values

    def node(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Segment:
    """One discretized function on ``[-r, 0]``; ``values[i]`` is the value at ``θ_i``."""

    grid: SegmentGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n + 1:
            raise ConfigError(
                f"segment needs {self.grid.n + 1} node values, got shape {v.shape}", "phi"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: SegmentGrid, value) -> "Segment":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (grid.n + 1, value.size)))

    @classmethod
    def from_function(cls, grid: SegmentGrid, fn: Callable[[float], Any]) -> "Segment":
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid.nodes], dtype=float))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def node(self, i: int) -> np.ndarray:
        return self.values[i]

    def batch(self) -> SegmentBatch:
        return SegmentBatch(self.grid, self.values[None])

    def shifted(self, offset) -> "Segment":
        return Segment(self.grid, self.values + np.asarray(offset, dtype=float))


def sup_norms(values: np.ndarray) -> np.ndarray:
    """Max over nodes of the Euclidean node norm for arrays shaped ``(..., n+1, d)``."""
    return np.sqrt(np.max(np.sum(values * values, axis=-1), axis=-1))


def sup_norm(seg: Segment) -> float:
    return float(sup_norms(seg.values))


def trace_norm(M) -> float:
    """``(Tr M M*)^{1/2}``, i.e. the Frobenius norm."""
    M = np.asarray(M, dtype=float)
    return float(np.sqrt(np.sum(M * M)))


def _opnorm(M: np.ndarray) -> float:
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def _matrix(value, shape: tuple[int, int], key: str) -> np.ndarray:
    try:
        M = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric matrix", key) from None
    if M.ndim == 0 and shape == (1, 1):
        M = M.reshape(1, 1)
    if M.shape != shape:
        raise ConfigError(f"expected shape {shape}, got {M.shape}", key)
    if not np.all(np.isfinite(M)):
        raise ConfigError("non-finite entry", key)
    return M


# ---------------------------------------------------------------------------
# pointwise drift families


class PolyDissipativeDrift:
    """``f(x) = a·x - x·|x|^s``; with ``a = 0`` the benchmark superlinear drift."""

    dissipative = True

    def __init__(self, s: float, a=None, d: int = 1):
        if not s > 0:
            raise ConfigError("superlinearity exponent s must be > 0", "drift.s")
        self.s = float(s)
        self.a = None if a is None else _matrix(a, (d, d), "drift.a")
        if self.a is not None and not np.any(self.a):
            self.a = None
        self.d = d

    def __call__(self, x: np.ndarray) -> np.ndarray:
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        out = -x * r2 ** (0.5 * self.s)
        if self.a is not None:
            out = out + x @ self.a.T
        return out

    @property
    def one_sided(self) -> float:
        # the -x|x|^s part is monotone, only the linear part can push apart
        if self.a is None:
            return 0.0
        return float(np.max(np.linalg.eigvalsh(0.5 * (self.a + self.a.T))))

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        s = self.s
        r2 = np.sum(x * x, axis=-1)
        eye = np.eye(x.shape[-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(r2 > 0, s * r2 ** (0.5 * s - 1.0), 0.0)
        J = -(r2 ** (0.5 * s))[:, None, None] * eye - radial[:, None, None] * (
            x[:, :, None] * x[:, None, :]
        )
        if self.a is not None:
            J = J + self.a
        return J

    def to_config(self) -> dict:
        cfg: dict[str, Any] = {"kind": "poly", "s": self.s}
        if self.a is not None:
            cfg["a"] = self.a.tolist()
        return cfg


class LinearDrift:
    """``f(x) = A·x``.  Fails the dissipativity hypothesis; used for analytic oracles."""

    dissipative = False

    def __init__(self, A, d: int = 1):
        self.A = _matrix(A, (d, d), "drift.A")
        self.d = d
        self._solve_cache: dict[float, np.ndarray] = {}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.A.T

    @property
    def one_sided(self) -> float:
        return float(np.max(np.linalg.eigvalsh(0.5 * (self.A + self.A.T))))

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.A, (x.shape[0],) + self.A.shape)

    def implicit_inverse(self, dt: float) -> np.ndarray:
        """``(I - dt·A)^{-1}``, transposed for row-vector application."""
        M = self._solve_cache.get(dt)
        if M is None:
            M = np.linalg.inv(np.eye(self.d) - dt * self.A).T
            self._solve_cache[dt] = M
        return M

    def to_config(self) -> dict:
        if not np.any(self.A):
            return {"kind": "zero"}
        return {"kind": "linear", "A": self.A.tolist()}


# ---------------------------------------------------------------------------
# functional drift / diffusion families


class ZeroFunctional:
    """``g ≡ 0``."""

    lipschitz = 0.0

    def __init__(self, d: int = 1):
        self.d = d

    def __call__(self, seg) -> np.ndarray:
        return np.zeros((len(seg), self.d))

    def to_config(self) -> dict:
        return {"kind": "zero"}


class PointDelay:
    """``g(ζ) = G·ζ(θ)``; ``θ`` defaults to ``-r``."""

    def __init__(self, G, d: int = 1, theta: float | None = None):
        self.G = _matrix(G, (d, d), "g.G")
        self.GT = self.G.T.copy()
        self.theta = theta
        self.d = d

    @property
    def lipschitz(self) -> float:
        return _opnorm(self.G)

    def __call__(self, seg) -> np.ndarray:
        grid = seg.grid
        i = 0 if self.theta is None else grid.index_of(self.theta)
        return seg.node(i) @ self.GT

    def to_config(self) -> dict:
        cfg: dict[str, Any] = {"kind": "point_delay", "G": self.G.tolist()}
        if self.theta is not None:
            cfg["theta"] = self.theta
        return cfg


class DistributedDelay:
    """``g(ζ) = K·Σ_i w_i ζ(θ_i)·dt`` with trapezoid weights."""

    def __init__(self, K, d: int = 1, r: float = 1.0):
        self.K = _matrix(K, (d, d), "g.K")
        self.d = d
        self.r = r

    @property
    def lipschitz(self) -> float:
        return _opnorm(self.K) * self.r

    def __call__(self, seg) -> np.ndarray:
        v = seg.values
        integral = (v.sum(axis=1) - 0.5 * (v[:, 0] + v[:, -1])) * seg.grid.dt
        return integral @ self.K.T

    def to_config(self) -> dict:
        return {"kind": "distributed_delay", "K": self.K.tolist()}


class AffineDiffusion:
    """``h(ζ) = H0 + H1·ζ(0) + H2·ζ(-r)``; ``H1``, ``H2`` are ``(d, m, d)`` tensors."""

    def __init__(self, H0=None, H1=None, H2=None, d: int = 1, m: int = 1):
        self.d, self.m = d, m
        self.H0 = np.zeros((d, m)) if H0 is None else _matrix(H0, (d, m), "h.H0")
        self.H1 = None if H1 is None else self._tensor(H1, "h.H1")
        self.H2 = None if H2 is None else self._tensor(H2, "h.H2")

    def _tensor(self, value, key: str) -> np.ndarray | None:
        T = np.asarray(value, dtype=float)
        d, m = self.d, self.m
        if T.ndim == 0 and d == m == 1:
            T = T.reshape(1, 1, 1)
        elif T.ndim == 2 and d == 1 and T.shape == (1, m):
            T = T.reshape(1, m, 1)
        if T.shape != (d, m, d):
            raise ConfigError(f"expected shape {(d, m, d)}, got {T.shape}", key)
        if not np.all(np.isfinite(T)):
            raise ConfigError("non-finite entry", key)
        return T if np.any(T) else None

    @property
    def is_constant(self) -> bool:
        return self.H1 is None and self.H2 is None

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant from the sup norm into the trace norm."""
        c = 0.0
        for T in (self.H1, self.H2):
            if T is not None:
                c += _opnorm(T.reshape(self.d * self.m, self.d))
        return c

    def __call__(self, seg) -> np.ndarray:
        N = len(seg)
        out = np.broadcast_to(self.H0, (N, self.d, self.m))
        if self.H1 is not None:
            out = out + np.einsum("ijk,nk->nij", self.H1, seg.node(seg.grid.n))
        if self.H2 is not None:
            out = out + np.einsum("ijk,nk->nij", self.H2, seg.node(0))
        return out

    def to_config(self) -> dict:
        cfg: dict[str, Any] = {"kind": "affine", "H0": self.H0.tolist()}
        if self.H1 is not None:
            cfg["H1"] = self.H1.tolist()
        if self.H2 is not None:
            cfg["H2"] = self.H2.tolist()
        return cfg


# ---------------------------------------------------------------------------
# the model


@dataclass(eq=False)
class DelayModel:
    """The SFDE ``dx = (f(x(t)) + g(x_t))dt + h(x_t)dB``.

    ``L`` is the constant of the joint one-sided Lipschitz condition on
    ``(f, g, h)``.  It is computed for built-in families and must be declared
    for user-supplied maps.
    """

    d: int
    m: int
    r: float
    f: Any
    g: Any
    h: Any
    L: float | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ConfigError("d and m must be >= 1", "model")
        if not self.r > 0:
            raise ConfigError("delay r must be positive", "model.r")
        if self.L is None:
            self.L = self.computed_lipschitz()
        if self.L is None:
            raise ConfigError("L must be declared for user-supplied coefficients", "model.L")
        if self.L < 0:
            raise ConfigError("L must be nonnegative", "model.L")

    def computed_lipschitz(self) -> float | None:
        try:
            mu = self.f.one_sided
            lg = self.g.lipschitz
            lh = self.h.lipschitz
        except AttributeError:
            return None
        return 2.0 * max(mu, 0.0) + 2.0 * lg + lh * lh

    @property
    def dissipative(self) -> bool | None:
        return getattr(self.f, "dissipative", None)

    def zero_coefficients(self, grid: SegmentGrid) -> tuple[np.ndarray, np.ndarray]:
        """``(g(0), h(0))`` on the zero segment."""
        zero = Segment.constant(grid, np.zeros(self.d))
        g0 = np.asarray(self.g(zero.batch()))[0]
        h0 = np.asarray(self.h(zero.batch()))[0]
        if not (np.all(np.isfinite(g0)) and np.all(np.isfinite(h0))):
            raise ModelError("g(0) or h(0) is not finite")
        return g0, h0

    def D(self, grid: SegmentGrid) -> float:
        """``|g(0)|²/L + 2‖h(0)‖²``."""
        g0, h0 = self.zero_coefficients(grid)
        g2 = float(g0 @ g0)
        if g2 > 0 and self.L <= 0:
            raise ModelError("D is undefined for L = 0 with g(0) != 0")
        return (g2 / self.L if g2 > 0 else 0.0) + 2.0 * trace_norm(h0) ** 2

    def to_config(self) -> dict:
        def cfg(obj):
            if hasattr(obj, "to_config"):
                return obj.to_config()
            return {"kind": "callable", "repr": repr(obj)}

        return {
            "d": self.d,
            "m": self.m,
            "r": self.r,
            "drift": cfg(self.f),
            "g": cfg(self.g),
            "h": cfg(self.h),
            "L": self.L,
        }


def evaluate_coefficients(model: DelayModel, seg: Segment) -> tuple[np.ndarray, np.ndarray]:
    """``(f(ζ(0)) + g(ζ), h(ζ))`` for a single segment."""
    if not math.isclose(seg.grid.r, model.r, rel_tol=1e-12):
        raise ConfigError(f"segment delay {seg.grid.r} != model delay {model.r}", "phi")
    bad = np.flatnonzero(~np.all(np.isfinite(seg.values), axis=1))
    if bad.size:
        raise ModelError("non-finite segment value", int(bad[0]))
    b = seg.batch()
    x0 = seg.values[-1][None]
    drift = (np.asarray(model.f(x0)) + np.asarray(model.g(b)))[0]
    diffusion = np.asarray(model.h(b))[0].reshape(model.d, model.m)
    if not np.all(np.isfinite(drift)):
        raise ModelError("non-finite drift", seg.grid.n)
    if not np.all(np.isfinite(diffusion)):
        raise ModelError("non-finite diffusion", seg.grid.n)
    return drift, diffusion


DEFAULT_RADII = tuple(2.0**k for k in range(21))


def verify_h0(f, lam: float, d: int = 1, radii=DEFAULT_RADII, seed: int = 0) -> float:
    """Smallest probe radius from which ``<f(v),v>/|v|² <= -lam`` on every probe.

    ``f`` may be a drift family or a :class:`DelayModel`.  Directions are ``2d``
    random unit vectors per radius (``±1`` for ``d = 1``).  Raises
    :class:`H0Failure` when even the largest radius violates the bound.
    """
    if isinstance(f, DelayModel):
        d, f = f.d, f.f
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or radii.size == 0 or np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ConfigError("radii must be positive and increasing", "radii")
    if d == 1:
        u = np.array([[1.0], [-1.0]])
    else:
        u = np.random.default_rng(seed).standard_normal((2 * d, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    ok = np.empty(radii.size, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for j, rho in enumerate(radii):
            v = rho * u
            ratio = np.sum(f(v) * v, axis=1) / np.sum(v * v, axis=1)
            # relative slack absorbs rounding in |v|² for non-axis directions
            ok[j] = bool(np.all(ratio <= -lam * (1.0 - 1e-12)))
    if not ok[-1]:
        raise H0Failure(f"<f(v),v>/|v|^2 <= -{lam} fails at the largest probe radius {radii[-1]}")
    bad = np.flatnonzero(~ok)
    return float(radii[0] if bad.size == 0 else radii[bad[-1] + 1])


def check_h2(model: DelayModel, grid: SegmentGrid, n_pairs: int = 1000, seed: int = 0) -> float:
    """Largest observed ratio ``LHS / (L‖x-y‖²)`` of the one-sided Lipschitz condition.

    Segment pairs are Gaussian with log-uniform scales in ``[1e-2, 1e2]``.  A
    declared ``L`` is consistent with the sample when the result is ``<= 1``.
    """
    rng = np.random.default_rng(seed)
    shape = (n_pairs, grid.n + 1, model.d)
    sx = 10.0 ** rng.uniform(-2, 2, size=(n_pairs, 1, 1))
    x = rng.standard_normal(shape) * sx
    y = x + rng.standard_normal(shape) * sx * 10.0 ** rng.uniform(-3, 0, size=(n_pairs, 1, 1))
    bx, by = SegmentBatch(grid, x), SegmentBatch(grid, y)
    dx0 = x[:, -1] - y[:, -1]
    tf = 2.0 * np.sum((model.f(x[:, -1]) - model.f(y[:, -1])) * dx0, axis=1)
    tg = 2.0 * np.sum((model.g(bx) - model.g(by)) * dx0, axis=1)
    dh = np.asarray(model.h(bx)) - np.asarray(model.h(by))
    th = np.sum(dh * dh, axis=(1, 2))
    lhs = np.maximum(tf, 0.0) + np.maximum(tg, 0.0) + th
    rhs = model.L * sup_norms(x - y) ** 2
    if model.L == 0:
        return 0.0 if np.all(lhs <= 1e-300) else math.inf
    return float(np.max(lhs / rhs))


# ---------------------------------------------------------------------------
# configuration


def _kind(block: Any, key: str, allowed: tuple[str, ...]) -> str:
    if not isinstance(block, dict):
        raise ConfigError("expected an object", key)
    kind = block.get("kind")
    if kind not in allowed:
        raise ConfigError(f"unknown kind {kind!r} (expected one of {', '.join(allowed)})", f"{key}.kind")
    return kind


def _known_keys(block: dict, key: str, allowed: set[str]):
    extra = sorted(set(block) - allowed)
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r}", f"{key}.{extra[0]}")


def model_from_config(cfg: dict) -> DelayModel:
    """Build a :class:`DelayModel` from its JSON document."""
    try:
        return _model_from_config(cfg)
    except ConfigError as e:
        if e.key_path and not e.key_path.startswith("model"):
            raise ConfigError(e.message, f"model.{e.key_path}") from None
        raise


def _model_from_config(cfg: dict) -> DelayModel:
    if not isinstance(cfg, dict):
        raise ConfigError("model document must be an object", "model")
    _known_keys(cfg, "model", {"d", "m", "r", "drift", "g", "h", "L", "name"})
    try:
        d = int(cfg["d"])
        m = int(cfg.get("m", d))
        r = float(cfg["r"])
    except KeyError as e:
        raise ConfigError("missing required key", f"model.{e.args[0]}") from None
    except (TypeError, ValueError):
        raise ConfigError("d, m must be integers and r a number", "model") from None

    drift = cfg.get("drift", {"kind": "zero"})
    kind = _kind(drift, "model.drift", ("poly", "linear", "zero"))
    if kind == "poly":
        _known_keys(drift, "model.drift", {"kind", "s", "a"})
        if "s" not in drift:
            raise ConfigError("missing required key", "model.drift.s")
        f = PolyDissipativeDrift(drift["s"], drift.get("a"), d=d)
    elif kind == "linear":
        _known_keys(drift, "model.drift", {"kind", "A"})
        f = LinearDrift(drift.get("A"), d=d)
    else:
        _known_keys(drift, "model.drift", {"kind"})
        f = LinearDrift(np.zeros((d, d)), d=d)

    gcfg = cfg.get("g", {"kind": "zero"})
    kind = _kind(gcfg, "model.g", ("zero", "point_delay", "distributed_delay"))
    if kind == "point_delay":
        _known_keys(gcfg, "model.g", {"kind", "G", "theta"})
        theta = gcfg.get("theta")
        g = PointDelay(gcfg.get("G"), d=d, theta=None if theta is None else float(theta))
    elif kind == "distributed_delay":
        _known_keys(gcfg, "model.g", {"kind", "K"})
        g = DistributedDelay(gcfg.get("K"), d=d, r=r)
    else:
        _known_keys(gcfg, "model.g", {"kind"})
        g = ZeroFunctional(d)

    hcfg = cfg.get("h", {"kind": "zero"})
    kind = _kind(hcfg, "model.h", ("zero", "affine"))
    if kind == "affine":
        _known_keys(hcfg, "model.h", {"kind", "H0", "H1", "H2"})
        h = AffineDiffusion(hcfg.get("H0"), hcfg.get("H1"), hcfg.get("H2"), d=d, m=m)
    else:
        _known_keys(hcfg, "model.h", {"kind"})
        h = AffineDiffusion(d=d, m=m)

    L = cfg.get("L")
    if L is not None:
        try:
            L = float(L)
        except (TypeError, ValueError):
            raise ConfigError("L must be a number", "model.L") from None
    return DelayModel(d, m, r, f, g, h, L=L, name=str(cfg.get("name", "custom")))


def load_model(path: str | Path) -> DelayModel:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(str(e), "model") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", "model") from None
    return model_from_config(cfg)


PRESETS = {
    # superlinear benchmark with s=2, point-delay feedback and affine noise
    "paper-eq11": {
        "name": "paper-eq11",
        "d": 1,
        "m": 1,
        "r": 1.0,
        "drift": {"kind": "poly", "s": 2.0},
        "g": {"kind": "point_delay", "G": [[0.5]]},
        "h": {"kind": "affine", "H0": [[0.5]], "H2": [[[0.5]]]},
    },
}


def preset(name: str) -> DelayModel:
    try:
        return model_from_config(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}", "preset") from None
