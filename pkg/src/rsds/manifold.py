"""Closed-form geometry for spheres, Euclidean spaces and their products.

Points and tangent vectors are float64 torch tensors in ambient coordinates
with shape ``(..., ambient_dim)``; every operation broadcasts over leading
dimensions. Linear maps are ``(..., ambient_dim, ambient_dim)`` matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import (
    CutLocusError,
    DegenerateProjectionError,
    InjectivityRadiusError,
    ManifoldError,
)

DTYPE = torch.float64

CUT_LOCUS_MARGIN = 1e-6
LOG_ZERO_DIST = 1e-12
_SERIES_CUT = 0.1
_TINY = 1e-300


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = np.ascontiguousarray(x)
    return torch.as_tensor(x, dtype=DTYPE)


def _even_series(x, coeffs):
    x2 = x * x
    out = torch.full_like(x, coeffs[-1])
    for c in reversed(coeffs[:-1]):
        out = out * x2 + c
    return out


def _guarded(x, series, direct):
    # double-where keeps gradients finite in the branch that is not selected
    small = x < _SERIES_CUT
    xs = torch.where(small, torch.ones_like(x), x)
    return torch.where(small, _even_series(x, series), direct(xs))


def _sinc(n):
    return _guarded(n, [1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880], lambda m: torch.sin(m) / m)


def _exp_b(n):
    # (n cos n - sin n) / n^3
    return _guarded(
        n,
        [-1 / 3, 1 / 30, -1 / 840, 1 / 45360, -1 / 3991680],
        lambda m: (m * torch.cos(m) - torch.sin(m)) / m**3,
    )


def _exp_b1(n):
    # derivative of _exp_b divided by n
    return _guarded(
        n,
        [1 / 15, -1 / 210, 1 / 7560, -1 / 498960, 1 / 51891840],
        lambda m: (3 * torch.sin(m) - 3 * m * torch.cos(m) - m**2 * torch.sin(m)) / m**5,
    )


def _log_beta(theta, q, r):
    # coefficient of v v^T in the differential of Log; series in the angle on the sphere
    def direct(th):
        rs = torch.where(theta < _SERIES_CUT, torch.ones_like(r), r)
        rho2 = rs * rs + q * q
        return (q / rho2 - th / rs) / (rs * rs)

    return _guarded(theta, [-2 / 3, -1 / 5, -17 / 420, -29 / 4200, -1181 / 1108800], direct)


def _safe_norm(v):
    return torch.sqrt(torch.clamp_min((v * v).sum(-1, keepdim=True), _TINY))


def _dot(a, b):
    return (a * b).sum(-1, keepdim=True)


def _outer(a, b):
    return a.unsqueeze(-1) * b.unsqueeze(-2)


def _eye_like(v):
    m = v.shape[-1]
    return torch.eye(m, dtype=v.dtype).expand(*v.shape[:-1], m, m)


# ---------------------------------------------------------------- sphere blocks


def _sph_exp(x, u, check):
    n = _safe_norm(u)
    if check and bool((n >= math.pi).any()):
        raise InjectivityRadiusError(
            f"tangent norm {float(n.max()):.6g} exceeds the injectivity radius pi"
        )
    return torch.cos(n) * x + _sinc(n) * u


def _sph_angle(x, y):
    q = _dot(x, y)
    r = _safe_norm(y - q * x)
    return torch.atan2(r, q), q, r


def _sph_log(x, y, check):
    theta, q, r = _sph_angle(x, y)
    if check and bool((theta >= math.pi - CUT_LOCUS_MARGIN).any()):
        raise CutLocusError("log map requested at (or next to) the antipode of the base point")
    v = y - q * x
    out = (theta / r) * v
    return torch.where(theta < LOG_ZERO_DIST, torch.zeros_like(out), out)


def _sph_dist(x, y):
    # chord form: exactly zero for identical inputs, well conditioned near 0 and pi
    a = torch.linalg.vector_norm(x - y, dim=-1, keepdim=True)
    b = torch.linalg.vector_norm(x + y, dim=-1, keepdim=True)
    return 2.0 * torch.atan2(a, b)


def _sph_transport(x, y, u):
    v = _sph_log(x, y, check=True)
    n = _safe_norm(v)
    vbar = v / n
    coef = _dot(vbar, u)
    return u - (x * torch.sin(n) + vbar * (1.0 - torch.cos(n))) * coef


def _sph_proj(x, v):
    return v - _dot(x, v) * x


def _sph_retract(v):
    n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if bool((n < 1e-12).any()):
        raise DegenerateProjectionError("cannot project a zero vector onto the sphere")
    # leave unit vectors bit-identical
    return torch.where((n - 1.0).abs() <= 4e-16, v, v / n)


def _sph_exp_dw(c, w):
    n = _safe_norm(w)
    s = _sinc(n)
    b = _exp_b(n)
    return s.unsqueeze(-1) * _eye_like(w) + _outer(-s * c + b * w, w)


def _sph_exp_dc(c, w):
    n = _safe_norm(w)
    return torch.cos(n).unsqueeze(-1) * _eye_like(w)


def _sph_log_dy(c, y):
    theta, q, r = _sph_angle(c, y)
    v = y - q * c
    rho2 = r * r + q * q
    phi = theta / r
    beta = _log_beta(theta, q, r)
    pc = _eye_like(c) - _outer(c, c)
    return phi.unsqueeze(-1) * pc + beta.unsqueeze(-1) * _outer(v, v) - _outer(v, c) / rho2.unsqueeze(-1)


def _sph_log_dy_apply(c, y, u):
    theta, q, r = _sph_angle(c, y)
    v = y - q * c
    rho2 = r * r + q * q
    phi = theta / r
    beta = _log_beta(theta, q, r)
    return phi * (u - _dot(c, u) * c) + beta * _dot(v, u) * v - v * _dot(c, u) / rho2


def _sph_chart_terms(c, w, z, g):
    """Second-order pieces of the chart-coordinate field ``g = DLog_c(z) f(z)``.

    Returns ``(k_w, k_c, m_inv)`` such that the differential of ``g`` along
    admissible perturbations is ``m_inv @ (Df dz - k_w dw - k_c dc)``.
    """
    n = _safe_norm(w)
    s = _sinc(n)
    a = -s
    b = _exp_b(n)
    b1 = _exp_b1(n)
    wg = _dot(w, g).unsqueeze(-1)
    eye = _eye_like(w)
    k_w = (
        b.unsqueeze(-1) * _outer(g, w)
        + _outer(a * c + b * w, g)
        + wg * (-b.unsqueeze(-1) * _outer(c, w) + b1.unsqueeze(-1) * _outer(w, w) + b.unsqueeze(-1) * eye)
    )
    k_c = wg * a.unsqueeze(-1) * eye + _outer(z - s * c, g)
    pz = eye - _outer(z, z)
    m_inv = _sph_log_dy(c, z) @ pz + _outer(c, z)
    return k_w, k_c, m_inv


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class Block:
    kind: str
    start: int
    stop: int

    @property
    def size(self):
        return self.stop - self.start

    @property
    def slice(self):
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class ManifoldSpec:
    """Euclidean space, unit sphere, or an ordered product of those."""

    kind: str
    dim: int = 0
    components: tuple = ()

    def __post_init__(self):
        if self.kind == "euclidean":
            if self.dim < 1:
                raise ManifoldError("Euclidean dimension must be >= 1")
        elif self.kind == "sphere":
            if self.dim < 1:
                raise ManifoldError("sphere intrinsic dimension must be >= 1")
        elif self.kind == "product":
            if not self.components:
                raise ManifoldError("product manifold needs at least one component")
        else:
            raise ManifoldError(f"unknown manifold kind {self.kind!r}")

    # constructors
    @classmethod
    def euclidean(cls, n: int) -> "ManifoldSpec":
        return cls("euclidean", n)

    @classmethod
    def sphere(cls, d: int) -> "ManifoldSpec":
        return cls("sphere", d)

    @classmethod
    def product(cls, *specs: "ManifoldSpec") -> "ManifoldSpec":
        return cls("product", 0, tuple(specs))

    @classmethod
    def parse(cls, text: str) -> "ManifoldSpec":
        """Parse ``"S2"``, ``"R3"`` or ``"R3xS3"``."""
        parts = [p.strip() for p in text.replace("×", "x").split("x") if p.strip()]
        specs = []
        for p in parts:
            head, num = p[0].upper(), p[1:]
            if not num.isdigit() or head not in "RS":
                raise ManifoldError(f"cannot parse manifold {text!r}")
            specs.append(cls.euclidean(int(num)) if head == "R" else cls.sphere(int(num)))
        if not specs:
            raise ManifoldError(f"cannot parse manifold {text!r}")
        return specs[0] if len(specs) == 1 else cls.product(*specs)

    def __str__(self):
        if self.kind == "euclidean":
            return f"R{self.dim}"
        if self.kind == "sphere":
            return f"S{self.dim}"
        return "x".join(str(c) for c in self.components)

    def to_dict(self) -> dict:
        if self.kind == "product":
            return {"kind": "product", "components": [c.to_dict() for c in self.components]}
        return {"kind": self.kind, "dim": self.dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldSpec":
        if d["kind"] == "product":
            return cls.product(*(cls.from_dict(c) for c in d["components"]))
        return cls(d["kind"], int(d["dim"]))

    # structure
    @property
    def ambient_dim(self) -> int:
        if self.kind == "euclidean":
            return self.dim
        if self.kind == "sphere":
            return self.dim + 1
        return sum(c.ambient_dim for c in self.components)

    @property
    def intrinsic_dim(self) -> int:
        if self.kind == "product":
            return sum(c.intrinsic_dim for c in self.components)
        return self.dim

    @property
    def blocks(self) -> tuple:
        out, start = [], 0
        for leaf in self._leaves():
            size = leaf.ambient_dim
            out.append(Block(leaf.kind, start, start + size))
            start += size
        return tuple(out)

    def _leaves(self):
        if self.kind != "product":
            return [self]
        return [leaf for c in self.components for leaf in c._leaves()]

    @property
    def has_sphere(self) -> bool:
        return any(b.kind == "sphere" for b in self.blocks)

    @property
    def is_single_sphere(self) -> bool:
        return self.kind == "sphere"

    # block plumbing
    def _map(self, sph, euc, *arrays):
        blocks = self.blocks
        if len(blocks) == 1:
            fn = sph if blocks[0].kind == "sphere" else euc
            return fn(*arrays)
        parts = []
        for b in blocks:
            fn = sph if b.kind == "sphere" else euc
            parts.append(fn(*(a[..., b.slice] for a in arrays)))
        return torch.cat(parts, dim=-1)

    def _map_scalar(self, sph, euc, *arrays):
        """Per-block scalar results stacked along the last axis: ``(..., n_blocks)``."""
        parts = []
        for b in self.blocks:
            fn = sph if b.kind == "sphere" else euc
            parts.append(fn(*(a[..., b.slice] for a in arrays)))
        return torch.cat(parts, dim=-1)

    def _blockdiag(self, sph, euc, *arrays):
        blocks = self.blocks
        if len(blocks) == 1:
            fn = sph if blocks[0].kind == "sphere" else euc
            return fn(*arrays)
        n = self.ambient_dim
        lead = torch.broadcast_shapes(*(a.shape[:-1] for a in arrays))
        out = torch.zeros(*lead, n, n, dtype=DTYPE)
        for b in blocks:
            fn = sph if b.kind == "sphere" else euc
            out[..., b.slice, b.slice] = fn(*(a[..., b.slice] for a in arrays))
        return out

    # validation
    def check_point(self, x, tol: float = 1e-9, what: str = "point") -> torch.Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.ambient_dim:
            raise ManifoldError(f"{what} has ambient dimension {x.shape[-1]}, expected {self.ambient_dim} for {self}")
        if not bool(torch.isfinite(x).all()):
            raise ManifoldError(f"{what} has non-finite coordinates")
        for b in self.blocks:
            if b.kind == "sphere":
                err = (torch.linalg.vector_norm(x[..., b.slice], dim=-1) - 1.0).abs()
                if bool((err > tol).any()):
                    raise ManifoldError(
                        f"{what} is off the manifold {self}: sphere block norm deviates by {float(err.max()):.3g}"
                    )
        return x

    def check_tangent(self, x, v, tol: float = 1e-9) -> torch.Tensor:
        x, v = as_tensor(x), as_tensor(v)
        res = self.tangency_residual(x, v)
        if bool((res > tol).any()):
            raise ManifoldError(f"vector is not tangent: residual {float(res.max()):.3g}")
        return v

    def tangency_residual(self, x, v) -> torch.Tensor:
        """Largest ``|<x_b, v_b>|`` over sphere blocks (zero for Euclidean specs)."""
        x, v = as_tensor(x), as_tensor(v)
        out = torch.zeros(torch.broadcast_shapes(x.shape[:-1], v.shape[:-1]), dtype=DTYPE)
        for b in self.blocks:
            if b.kind == "sphere":
                out = torch.maximum(out, _dot(x[..., b.slice], v[..., b.slice]).squeeze(-1).abs())
        return out

    def on_manifold_residual(self, x) -> torch.Tensor:
        x = as_tensor(x)
        out = torch.zeros(x.shape[:-1], dtype=DTYPE)
        for b in self.blocks:
            if b.kind == "sphere":
                out = torch.maximum(out, (torch.linalg.vector_norm(x[..., b.slice], dim=-1) - 1.0).abs())
        return out

    # core operations
    def exp(self, x, u, check: bool = True) -> torch.Tensor:
        x, u = as_tensor(x), as_tensor(u)
        return self._map(lambda a, b: _sph_exp(a, b, check), lambda a, b: a + b, x, u)

    def log(self, x, y, check: bool = True) -> torch.Tensor:
        x, y = as_tensor(x), as_tensor(y)
        return self._map(lambda a, b: _sph_log(a, b, check), lambda a, b: b - a, x, y)

    def block_dist(self, x, y) -> torch.Tensor:
        x, y = as_tensor(x), as_tensor(y)
        return self._map_scalar(
            _sph_dist, lambda a, b: torch.linalg.vector_norm(b - a, dim=-1, keepdim=True), x, y
        )

    def dist(self, x, y) -> torch.Tensor:
        d = self.block_dist(x, y)
        if d.shape[-1] == 1:
            return d[..., 0]
        return torch.linalg.vector_norm(d, dim=-1)

    def transport(self, x, y, u) -> torch.Tensor:
        x, y, u = as_tensor(x), as_tensor(y), as_tensor(u)
        return self._map(_sph_transport, lambda a, b, c: c, x, y, u)

    def proj(self, x, v) -> torch.Tensor:
        x, v = as_tensor(x), as_tensor(v)
        return self._map(_sph_proj, lambda a, b: b + 0.0 * a, x, v)

    def retract(self, v) -> torch.Tensor:
        v = as_tensor(v)
        return self._map(_sph_retract, lambda a: a, v)

    def norm(self, v) -> torch.Tensor:
        return torch.linalg.vector_norm(as_tensor(v), dim=-1)

    def inner(self, x, u, v) -> torch.Tensor:
        return (as_tensor(u) * as_tensor(v)).sum(-1)

    def zeros(self, *lead) -> torch.Tensor:
        return torch.zeros(*lead, self.ambient_dim, dtype=DTYPE)

    def max_block_norm(self, u) -> torch.Tensor:
        """Largest per-sphere-block tangent norm (zero if there are no sphere blocks)."""
        u = as_tensor(u)
        out = torch.zeros(u.shape[:-1], dtype=DTYPE)
        for b in self.blocks:
            if b.kind == "sphere":
                out = torch.maximum(out, torch.linalg.vector_norm(u[..., b.slice], dim=-1))
        return out

    # linear maps
    def projector(self, x) -> torch.Tensor:
        x = as_tensor(x)
        return self._blockdiag(lambda a: _eye_like(a) - _outer(a, a), _eye_like, x)

    def normal_outer(self, z, c) -> torch.Tensor:
        """Sum over sphere blocks of ``z_b c_b^T`` embedded in ambient coordinates."""
        z, c = as_tensor(z), as_tensor(c)
        return self._blockdiag(_outer, lambda a, b: torch.zeros_like(_outer(a, b)), z, c)

    def exp_dw(self, c, w) -> torch.Tensor:
        """Differential of ``w -> Exp_c(w)`` (ambient formula)."""
        return self._blockdiag(_sph_exp_dw, lambda a, b: _eye_like(b), as_tensor(c), as_tensor(w))

    def exp_dc(self, c, w) -> torch.Tensor:
        """Differential of ``c -> Exp_c(w)`` holding the ambient ``w`` fixed."""
        return self._blockdiag(_sph_exp_dc, lambda a, b: _eye_like(b), as_tensor(c), as_tensor(w))

    def log_dy(self, c, y) -> torch.Tensor:
        """Differential of ``y -> Log_c(y)``; at ``y = c`` this is the tangent projector."""
        return self._blockdiag(_sph_log_dy, lambda a, b: _eye_like(b), as_tensor(c), as_tensor(y))

    def log_dy_apply(self, c, y, u) -> torch.Tensor:
        """``log_dy(c, y) @ u`` without forming the matrix."""
        return self._map(_sph_log_dy_apply, lambda a, b, d: d + 0.0 * a, as_tensor(c), as_tensor(y), as_tensor(u))

    def chart_terms(self, c, w, z, g):
        """Curvature terms used by the chart-wise sensitivity recursion (see odeint)."""
        blocks = self.blocks
        if len(blocks) == 1:
            if blocks[0].kind == "sphere":
                return _sph_chart_terms(c, w, z, g)
            zero = torch.zeros(*g.shape, g.shape[-1], dtype=DTYPE)
            return zero, zero, _eye_like(g)
        n = self.ambient_dim
        lead = g.shape[:-1]
        k_w = torch.zeros(*lead, n, n, dtype=DTYPE)
        k_c = torch.zeros(*lead, n, n, dtype=DTYPE)
        m_inv = torch.zeros(*lead, n, n, dtype=DTYPE)
        for b in blocks:
            s = b.slice
            if b.kind == "sphere":
                kw, kc, mi = _sph_chart_terms(c[..., s], w[..., s], z[..., s], g[..., s])
                k_w[..., s, s] = kw
                k_c[..., s, s] = kc
                m_inv[..., s, s] = mi
            else:
                m_inv[..., s, s] = _eye_like(g[..., s])
        return k_w, k_c, m_inv

    # sampling and statistics
    def sample(self, n: int, rng: np.random.Generator, box=(-1.0, 1.0)) -> torch.Tensor:
        """Uniform samples: normalised Gaussians on spheres, a box on Euclidean factors.

        ``box`` is ``(low, high)``; each entry may be a scalar or an array with
        one value per Euclidean coordinate (in block order).
        """
        low = np.atleast_1d(np.asarray(box[0], dtype=float))
        high = np.atleast_1d(np.asarray(box[1], dtype=float))
        parts, e = [], 0
        for b in self.blocks:
            if b.kind == "sphere":
                g = rng.standard_normal((n, b.size))
                parts.append(g / np.linalg.norm(g, axis=1, keepdims=True))
            else:
                lo = low[e : e + b.size] if low.size > 1 else np.full(b.size, low[0])
                hi = high[e : e + b.size] if high.size > 1 else np.full(b.size, high[0])
                parts.append(rng.uniform(lo, hi, size=(n, b.size)))
                e += b.size
        return as_tensor(np.concatenate(parts, axis=1))

    def karcher_mean(self, points, weights=None, max_iter: int = 100, tol: float = 1e-9) -> torch.Tensor:
        points = as_tensor(points)
        if weights is None:
            weights = torch.full((points.shape[0], 1), 1.0 / points.shape[0], dtype=DTYPE)
        else:
            weights = as_tensor(weights).reshape(-1, 1)
            weights = weights / weights.sum()
        mean = points[0].clone()
        for _ in range(max_iter):
            step = (weights * self.log(mean.expand_as(points), points, check=False)).sum(0)
            mean = self.exp(mean, step, check=False)
            if float(torch.linalg.vector_norm(step)) < tol:
                break
        return mean


def sphere(d: int) -> ManifoldSpec:
    return ManifoldSpec.sphere(d)


def euclidean(n: int) -> ManifoldSpec:
    return ManifoldSpec.euclidean(n)


def product(*specs: ManifoldSpec) -> ManifoldSpec:
    return ManifoldSpec.product(*specs)


def kmeans_manifold(
    spec: ManifoldSpec,
    points,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
) -> torch.Tensor:
    """Lloyd iterations with geodesic assignment and Karcher-mean updates.

    Empty clusters are re-seeded from the point farthest from its current
    center. Returns a ``(k, ambient_dim)`` tensor of centers.
    """
    points = as_tensor(points)
    m = points.shape[0]
    if k > m:
        raise ManifoldError(f"k={k} exceeds the number of points ({m})")
    centers = points[rng.choice(m, size=k, replace=False)].clone()
    assign = None
    for _ in range(max_iter):
        d = spec.dist(points[:, None, :], centers[None, :, :])
        new_assign = torch.argmin(d, dim=1)
        if assign is not None and torch.equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if members.shape[0] == 0:
                far = int(torch.argmax(d[torch.arange(m), assign]))
                centers[j] = points[far]
                assign[far] = j
            else:
                centers[j] = spec.karcher_mean(members)
    return centers


def fibonacci_sphere(n: int) -> torch.Tensor:
    """Spherical Fibonacci lattice with ``n`` points on S^2."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = math.pi * (1.0 + 5**0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return as_tensor(pts)


def tangent_basis(spec: ManifoldSpec, x) -> torch.Tensor:
    """Orthonormal basis of ``T_x`` as rows, shape ``(intrinsic_dim, ambient_dim)``."""
    x = as_tensor(x)
    p = spec.projector(x)
    u, s, _ = torch.linalg.svd(p)
    return u[:, : spec.intrinsic_dim].T.contiguous()


def stack_points(points: Sequence) -> torch.Tensor:
    return torch.stack([as_tensor(p) for p in points])
