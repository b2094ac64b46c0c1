"""Fixed-step integrators for ODEs on manifolds, with exact discrete differentials.

The main scheme is chart-wise Euler: the time interval is split into equal
pieces, each integrated in exponential-map coordinates centered at the state
on entry to that piece. Differentials and the inverse flow are defined with
respect to this very discretization, so they are exact up to round-off rather
than only in the small-step limit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch

from .errors import ChartOverflowError, NumericalError, ValidationError
from .manifold import DTYPE, ManifoldSpec, as_tensor

CHART_MARGIN = 0.1


@dataclass(frozen=True)
class IntegrationConfig:
    step_size: float = 1.0 / 32
    num_charts: int = 4
    t_start: float = 0.0
    t_end: float = 1.0
    solver: str = "euler"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValidationError("step_size must be positive")
        if self.num_charts < 1:
            raise ValidationError("num_charts must be >= 1")
        if not self.t_end > self.t_start:
            raise ValidationError("t_end must exceed t_start")
        if self.solver != "euler":
            raise ValidationError(f"unsupported solver {self.solver!r}")

    @property
    def chart_length(self) -> float:
        return (self.t_end - self.t_start) / self.num_charts

    def schedule(self):
        """``[(t0, m, h), ...]``: start time, step count and step per chart."""
        length = self.chart_length
        m = max(1, int(round(length / self.step_size)))
        h = length / m
        return [(self.t_start + i * length, m, h) for i in range(self.num_charts)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IntegrationConfig":
        return cls(**d)


@dataclass
class PullbackResult:
    endpoint: torch.Tensor
    linmap: torch.Tensor


class FunctionField:
    """Adapter turning plain callables into a time-dependent tangent field.

    ``fn(z, t)`` must return tangent vectors; ``jac(z, t)`` its ambient
    Jacobian. Without ``jac`` the Jacobian is taken with autograd.
    """

    def __init__(self, spec: ManifoldSpec, fn: Callable, jac: Optional[Callable] = None):
        self.spec = spec
        self.fn = fn
        self.jac = jac

    def __call__(self, z, t):
        return self.fn(z, t)

    def jacobian(self, z, t):
        if self.jac is not None:
            return self.jac(z, t)
        flat = z.reshape(-1, z.shape[-1])
        rows = [torch.autograd.functional.jacobian(lambda p: self.fn(p, t), p) for p in flat]
        return torch.stack(rows).reshape(*z.shape, z.shape[-1])


def zero_field(spec: ManifoldSpec) -> FunctionField:
    return FunctionField(
        spec,
        lambda z, t: torch.zeros_like(z),
        lambda z, t: torch.zeros(*z.shape, z.shape[-1], dtype=DTYPE),
    )


# ---------------------------------------------------------------- single chart


def _check_overflow(spec, w):
    worst = float(spec.max_block_norm(w.detach()).max()) if w.numel() else 0.0
    if worst >= math.pi - CHART_MARGIN:
        raise ChartOverflowError(
            f"chart coordinates reached norm {worst:.4f} (limit pi - {CHART_MARGIN}); "
            "increase num_charts"
        )
    if not math.isfinite(worst):
        raise NumericalError("non-finite state during integration")


def _rhs(field, spec, c, w, t):
    z = spec.exp(c, w, check=False)
    return z, spec.log_dy_apply(c, z, field(z, t))


def _rhs_partials(field, spec, c, w, t):
    """Chart-coordinate field ``g`` and its partials ``dg/dw``, ``dg/dc``."""
    z = spec.exp(c, w, check=False)
    if hasattr(field, "value_and_jacobian"):
        f, df = field.value_and_jacobian(z, t)
    else:
        f, df = field(z, t), field.jacobian(z, t)
    g = spec.log_dy_apply(c, z, f)
    k_w, k_c, m_inv = spec.chart_terms(c, w, z, g)
    g_w = m_inv @ (df @ spec.exp_dw(c, w) - k_w)
    g_c = m_inv @ (df @ spec.exp_dc(c, w) - k_c)
    return g, g_w, g_c


def _chart(field, spec, c, t0, m, h, direction=1.0):
    w = torch.zeros_like(c)
    for j in range(m):
        t = t0 + direction * j * h
        _, g = _rhs(field, spec, c, w, t)
        w = w + direction * h * g
        _check_overflow(spec, w)
    return spec.retract(spec.exp(c, w, check=False))


def _chart_with_jacobian(field, spec, c, t0, m, h, record=False):
    """Exit point of one chart and the differential of entry -> exit.

    The Jacobian ``J`` maps tangent perturbations of ``c`` to tangent
    perturbations of the exit point. With ``record`` the per-step partials
    are returned as well (for the reverse sweep).
    """
    n = c.shape[-1]
    pc = spec.projector(c)
    w = torch.zeros_like(c)
    u = torch.zeros(*c.shape, n, dtype=DTYPE)
    steps = []
    for j in range(m):
        g, g_w, g_c = _rhs_partials(field, spec, c, w, t0 + j * h)
        if record:
            steps.append((g_w, g_c))
        u = u + h * (g_w @ u + g_c @ pc)
        w = w + h * g
        _check_overflow(spec, w)
    z = spec.retract(spec.exp(c, w, check=False))
    pz = spec.projector(z)
    e_w = spec.exp_dw(c, w)
    e_c = spec.exp_dc(c, w)
    jac = pz @ (e_c @ pc + e_w @ u)
    if record:
        return z, jac, (pz @ e_w, pz @ e_c, steps, h, pc)
    return z, jac


def inv_tangent(spec: ManifoldSpec, jac, c, z):
    """Inverse of ``jac : T_c -> T_z`` as an ambient matrix ``T_z -> T_c``."""
    aug = jac @ spec.projector(c) + spec.normal_outer(z, c)
    return torch.linalg.solve(aug, spec.projector(z))


# ---------------------------------------------------------------- flows


def flow_chartwise(field, x0, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """Chart-wise Euler flow of ``field`` from ``x0`` over ``[t_start, t_end]``."""
    spec = spec or field.spec
    x = as_tensor(x0)
    for t0, m, h in cfg.schedule():
        x = _chart(field, spec, x, t0, m, h)
    return x


def flow_trajectory(field, x0, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """All intermediate states of the chart-wise flow, stacked on axis 0."""
    spec = spec or field.spec
    c = as_tensor(x0)
    out = [c]
    for t0, m, h in cfg.schedule():
        w = torch.zeros_like(c)
        for j in range(m):
            _, g = _rhs(field, spec, c, w, t0 + j * h)
            w = w + h * g
            _check_overflow(spec, w)
            out.append(spec.exp(c, w, check=False))
        c = spec.retract(out[-1])
        out[-1] = c
    return torch.stack(out)


def flow_projection(field, x0, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """Ambient Euler steps followed by retraction onto the manifold."""
    spec = spec or field.spec
    x = as_tensor(x0)
    span = cfg.t_end - cfg.t_start
    m = max(1, int(round(span / cfg.step_size)))
    h = span / m
    for j in range(m):
        x = spec.retract(x + h * field(x, cfg.t_start + j * h))
    return x


def flow_inverse(field, y, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """Integrate backwards in time from ``t_end`` to ``t_start`` (explicit, O(h) inverse)."""
    spec = spec or field.spec
    x = as_tensor(y)
    for t0, m, h in reversed(cfg.schedule()):
        x = _chart(field, spec, x, t0 + m * h, m, h, direction=-1.0)
    return x


def flow_with_jacobians(field, x0, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """Endpoint plus the list of per-chart ``(entry, exit, J)`` triples."""
    spec = spec or field.spec
    c = as_tensor(x0)
    charts = []
    for t0, m, h in cfg.schedule():
        z, jac = _chart_with_jacobian(field, spec, c, t0, m, h)
        charts.append((c, z, jac))
        c = z
    return c, charts


def flow_with_forward_differential(field, x0, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """Flow forwards while accumulating the pullback ``D_y psi^{-1}``.

    ``linmap`` maps tangent vectors at the endpoint ``y`` to tangent vectors
    at ``x0``.
    """
    spec = spec or field.spec
    y, charts = flow_with_jacobians(field, x0, cfg, spec)
    a = spec.projector(as_tensor(x0))
    for c, z, jac in charts:
        a = a @ inv_tangent(spec, jac, c, z)
    return PullbackResult(y, a)


def apply_pullback(spec: ManifoldSpec, charts, v):
    """Pull a tangent vector at the endpoint back through the recorded charts."""
    for c, z, jac in reversed(charts):
        aug = jac @ spec.projector(c) + spec.normal_outer(z, c)
        v = torch.linalg.solve(aug, spec.proj(z, v).unsqueeze(-1)).squeeze(-1)
    return v


def differential(field, x0, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """``(psi(x0), D_x psi)`` via a reverse sweep over the stored step partials."""
    spec = spec or field.spec
    c = as_tensor(x0)
    records = []
    for t0, m, h in cfg.schedule():
        z, _, rec = _chart_with_jacobian(field, spec, c, t0, m, h, record=True)
        records.append(rec)
        c = z
    n = c.shape[-1]
    a = torch.eye(n, dtype=DTYPE).expand(*c.shape, n).clone()
    for e_w, e_c, steps, h, pc in reversed(records):
        a_w = a @ e_w
        a_c = a @ e_c
        for g_w, g_c in reversed(steps):
            a_c = a_c + h * (a_w @ g_c)
            a_w = a_w + h * (a_w @ g_w)
        a = a_c @ pc
    return c, a


def solve_preimage(
    field,
    y,
    cfg: IntegrationConfig = IntegrationConfig(),
    spec: ManifoldSpec = None,
    tol: float = 1e-13,
    max_iter: int = 30,
):
    """Exact inverse of the discrete forward flow, chart by chart (Newton)."""
    spec = spec or field.spec
    target = as_tensor(y)
    for t0, m, h in reversed(cfg.schedule()):
        c = _chart(field, spec, target, t0 + m * h, m, h, direction=-1.0)
        for _ in range(max_iter):
            z, jac = _chart_with_jacobian(field, spec, c, t0, m, h)
            resid = spec.log(z, target)
            if float(spec.norm(resid).max()) < tol:
                break
            aug = jac @ spec.projector(c) + spec.normal_outer(z, c)
            delta = torch.linalg.solve(aug, resid.unsqueeze(-1)).squeeze(-1)
            c = spec.retract(spec.exp(c, spec.proj(c, delta)))
        else:
            raise NumericalError("preimage Newton iteration did not converge")
        target = c
    return target


def flow_with_backward_differential(field, y_end, cfg: IntegrationConfig = IntegrationConfig(), spec: ManifoldSpec = None):
    """Preimage ``x`` of ``y_end`` and ``D_x psi`` (maps ``T_x`` to ``T_y``)."""
    spec = spec or field.spec
    x = solve_preimage(field, y_end, cfg, spec)
    _, a = differential(field, x, cfg, spec)
    return PullbackResult(x, a)


def chart_map_differentials(spec: ManifoldSpec, base, w):
    """``(D_w Exp_base(w), D_y Log_base(y))`` at ``y = Exp_base(w)``."""
    base, w = as_tensor(base), as_tensor(w)
    y = spec.exp(base, w)
    return spec.exp_dw(base, w), spec.log_dy(base, y)
