"""Demonstration loading, filtering, sphere projection, goal alignment and synthetic tasks."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.interpolate import CubicSpline
from scipy.signal import butter, filtfilt

from .errors import DataError
from .io import atomic_write_text
from .manifold import DTYPE, ManifoldSpec, as_tensor, tangent_basis


@dataclass
class RawTrajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states.reshape(-1, 1)
        if self.states.shape[0] != self.times.shape[0]:
            raise DataError("times and states have different lengths")
        if self.times.size == 0:
            raise DataError("empty trajectory")
        if not np.all(np.isfinite(self.states)) or not np.all(np.isfinite(self.times)):
            raise DataError("trajectory contains non-finite values")
        bad = np.nonzero(np.diff(self.times) <= 0)[0]
        if bad.size:
            raise DataError(f"timestamps not strictly increasing at sample {bad[0] + 1}")

    def __len__(self):
        return self.times.shape[0]


@dataclass
class Demonstration:
    spec: ManifoldSpec
    times: np.ndarray
    points: torch.Tensor
    velocities: torch.Tensor

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.times))) if len(self.times) > 1 else 0.0

    @property
    def goal(self) -> torch.Tensor:
        return self.points[-1]

    def __len__(self):
        return self.points.shape[0]


# ---------------------------------------------------------------- io


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_trajectory_csv(traj: RawTrajectory, path) -> None:
    d = traj.states.shape[1]
    lines = [",".join(["t"] + [f"x{i}" for i in range(d)])]
    for t, s in zip(traj.times, traj.states):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in s]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_csv(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataError(f"{path}: no trajectories")
    header = [h.strip() for h in rows[0]]
    if header[0] != "t" or len(header) < 2:
        raise DataError(f"{path}: header must be 't,x0,x1,...'")
    times, states = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
        try:
            vals = [float(c) for c in r]
        except ValueError:
            raise DataError(f"{path}: row {i} is not numeric") from None
        if times and vals[0] <= times[-1]:
            raise DataError(f"{path}: timestamps not strictly increasing at row {i}")
        times.append(vals[0])
        states.append(vals[1:])
    return [RawTrajectory(np.array(times), np.array(states))]


def load_trajectories(path, fmt: Optional[str] = None) -> list:
    """Read raw trajectories from a CSV file or a JSON ``{"trajectories": [...]}`` file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        return _read_csv(path)
    if fmt != "json":
        raise DataError(f"unknown trajectory format {fmt!r}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise DataError(f"{path}: no trajectories")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if "demos" in obj:
        return [RawTrajectory(d.times, d.points.numpy()) for d in demos_from_dict(obj)]
    items = obj.get("trajectories") or []
    if not items:
        raise DataError(f"{path}: no trajectories")
    out = []
    for k, item in enumerate(items):
        try:
            out.append(RawTrajectory(item["t"], item["states"]))
        except DataError as exc:
            raise DataError(f"{path}: trajectory {k}: {exc}") from None
    return out


def demos_to_dict(demos: Sequence[Demonstration]) -> dict:
    if not demos:
        raise DataError("no demonstrations")
    return {
        "spec": demos[0].spec.to_dict(),
        "dt": float(np.median([d.dt for d in demos])),
        "demos": [
            [
                {"t": float(t), "point": p.tolist(), "velocity": v.tolist()}
                for t, p, v in zip(d.times, d.points, d.velocities)
            ]
            for d in demos
        ],
    }


def demos_from_dict(obj: dict) -> list:
    spec = ManifoldSpec.from_dict(obj["spec"])
    out = []
    for k, rows in enumerate(obj["demos"]):
        if not rows:
            raise DataError(f"demonstration {k} is empty")
        times = np.array([r["t"] for r in rows], dtype=float)
        pts = as_tensor([r["point"] for r in rows])
        vel = as_tensor([r["velocity"] for r in rows])
        RawTrajectory(times, pts.numpy())  # validates timestamps
        spec.check_point(pts, tol=1e-9, what=f"demonstration {k} point")
        spec.check_tangent(pts, vel, tol=1e-9)
        out.append(Demonstration(spec, times, pts, vel))
    return out


def dump_demos(demos) -> str:
    return json.dumps(demos_to_dict(demos), indent=1) + "\n"


def save_demos(demos, path) -> None:
    atomic_write_text(path, dump_demos(demos))


def load_demos(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if "demos" not in obj:
        raise DataError(f"{path}: not a demonstration container")
    return demos_from_dict(obj)


# ---------------------------------------------------------------- preprocessing


def lowpass_filter(traj: RawTrajectory, cutoff: float = 2.0, sphere_blocks: Sequence[slice] = ()) -> RawTrajectory:
    """Zero-phase second-order Butterworth low-pass; sphere blocks are renormalized."""
    n = len(traj)
    if n < 7:
        raise DataError("low-pass filtering needs at least 7 samples")
    fs = 1.0 / float(np.median(np.diff(traj.times)))
    if cutoff >= fs / 2:
        raise DataError(f"cutoff {cutoff} Hz is not below the Nyquist frequency {fs / 2} Hz")
    b, a = butter(2, cutoff / (fs / 2))
    out = filtfilt(b, a, traj.states, axis=0, padlen=min(9, n - 1))
    for s in sphere_blocks:
        out[:, s] /= np.linalg.norm(out[:, s], axis=1, keepdims=True)
    return RawTrajectory(traj.times.copy(), out)


def make_demonstration(spec: ManifoldSpec, times, points) -> Demonstration:
    """Attach forward log-difference velocities (the last one is zero)."""
    times = np.asarray(times, dtype=float)
    pts = spec.check_point(points, what="demonstration point")
    vel = torch.zeros_like(pts)
    if pts.shape[0] > 1:
        dt = as_tensor(np.diff(times)).unsqueeze(-1)
        vel[:-1] = spec.log(pts[:-1], pts[1:]) / dt
    return Demonstration(spec, times, pts, vel)


def project_letters_to_sphere(
    trajs: Sequence[RawTrajectory],
    base=(0.0, 0.0, 1.0),
    scale: float = 0.32,
    center=None,
) -> list:
    """Map planar curves into a tangent disk of radius ``scale * pi/2`` at ``base`` and wrap with Exp.

    All trajectories share one centering and scaling so relative geometry is
    kept. ``center`` defaults to the middle of the joint bounding box.
    """
    spec = ManifoldSpec.sphere(2)
    if not 0 < scale <= 1:
        raise DataError("scale must lie in (0, 1]: larger disks exceed the injectivity radius")
    base = spec.check_point(as_tensor(base), what="base point")
    allpts = np.concatenate([t.states for t in trajs])
    if allpts.shape[1] != 2:
        raise DataError("letters must be planar (two state columns)")
    if center is None:
        center = 0.5 * (allpts.min(0) + allpts.max(0))
    center = np.asarray(center, dtype=float)
    radius = float(np.max(np.linalg.norm(allpts - center, axis=1)))
    factor = scale * (math.pi / 2) / radius if radius > 0 else 0.0
    e = tangent_basis(spec, base)
    out = []
    for t in trajs:
        uv = as_tensor((t.states - center) * factor)
        u = uv @ e
        out.append(make_demonstration(spec, t.times, spec.exp(base.expand_as(u), u)))
    return out


def shift_to_common_goal(demos: Sequence[Demonstration], goal=None) -> list:
    """Move every demonstration so it ends exactly at a shared goal.

    Sphere blocks transport the log-offsets from the old end point along the
    correcting geodesic; Euclidean blocks are translated.
    """
    if not demos:
        raise DataError("no demonstrations")
    spec = demos[0].spec
    ends = torch.stack([d.points[-1] for d in demos])
    goal = spec.karcher_mean(ends) if goal is None else spec.check_point(goal, what="goal")
    out = []
    for d in demos:
        end = d.points[-1]
        bd = spec.block_dist(end, goal)
        for i, b in enumerate(spec.blocks):
            if b.kind == "sphere" and float(bd[i]) > math.pi / 2:
                raise DataError("demonstration goals are more than pi/2 apart; refusing to shift")
        if float(bd.max()) < 1e-12:
            out.append(d)
            continue
        parts = []
        for i, b in enumerate(spec.blocks):
            blk = d.points[:, b.slice]
            e, g = end[b.slice], goal[b.slice]
            if b.kind == "sphere":
                sub = ManifoldSpec.sphere(b.size - 1)
                offs = sub.log(e.expand_as(blk), blk)
                moved = sub.transport(e.expand_as(offs), g.expand_as(offs), offs)
                parts.append(sub.exp(g.expand_as(moved), moved))
            else:
                parts.append(blk + (g - e))
        pts = torch.cat(parts, dim=-1)
        pts[-1] = goal
        out.append(make_demonstration(spec, d.times, pts))
    return out


# ---------------------------------------------------------------- synthetic data

_LETTERS = {
    "S": [(0.9, 1.0), (0.35, 1.1), (0.0, 0.85), (0.15, 0.55), (0.6, 0.45), (0.9, 0.2), (0.7, -0.05), (0.3, -0.1), (0.0, 0.0)],
    "W": [(0.0, 1.0), (0.2, 0.0), (0.45, 0.75), (0.7, 0.0), (0.95, 1.0), (1.05, 0.85)],
    "P": [(0.0, 0.0), (0.0, 0.55), (0.02, 1.1), (0.4, 1.1), (0.58, 0.85), (0.4, 0.6), (0.05, 0.55)],
}
LETTERS = tuple(_LETTERS)


def _speed_profile(n: int) -> np.ndarray:
    tau = np.linspace(0.0, 1.0, n)
    s = 0.6 * tau + 0.4 * (1.0 - np.cos(np.pi * tau)) / np.pi
    return s / s[-1]


def _resample_curve(ctrl: np.ndarray, n: int) -> np.ndarray:
    chord = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))]
    spline = CubicSpline(chord / chord[-1], ctrl, bc_type="natural")
    dense_u = np.linspace(0.0, 1.0, 4000)
    dense = spline(dense_u)
    arc = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))]
    target = _speed_profile(n) * arc[-1]
    u = np.interp(target, arc, dense_u)
    return spline(u)


def generate_synthetic_letters(
    shape_id: str,
    n_demos: int,
    noise: float,
    rng: np.random.Generator,
    n_points: int = 100,
    duration: float = 4.0,
) -> list:
    """Planar letter-like curves ending at the origin; demos differ by control-point noise."""
    key = shape_id.upper()[:1]
    if key not in _LETTERS:
        raise DataError(f"unknown letter {shape_id!r}; choose from {', '.join(LETTERS)}")
    ctrl = np.asarray(_LETTERS[key], dtype=float)
    ctrl = ctrl - ctrl[-1]
    times = np.linspace(0.0, duration, n_points)
    out = []
    for _ in range(n_demos):
        jitter = noise * rng.standard_normal(ctrl.shape)
        jitter[-1] = 0.0
        out.append(RawTrajectory(times, _resample_curve(ctrl + jitter, n_points)))
    return out


def turning_sign_changes(xy: np.ndarray, rel_tol: float = 0.05) -> int:
    """Number of sign flips of the discrete turning direction of a planar curve."""
    d = np.diff(xy, axis=0)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    thresh = rel_tol * np.max(np.abs(cross))
    signs = np.sign(cross[np.abs(cross) > thresh])
    return int(np.sum(signs[1:] != signs[:-1]))


def quat_slerp(q0, q1, s):
    q0, q1 = np.asarray(q0, float), np.asarray(q1, float)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    theta = math.acos(min(1.0, dot))
    s = np.asarray(s, float)[:, None]
    if theta < 1e-12:
        return np.repeat(q0[None], s.shape[0], 0)
    return (np.sin((1 - s) * theta) * q0 + np.sin(s * theta) * q1) / math.sin(theta)


def generate_pose_task(
    n_demos: int,
    noise: float,
    rng: np.random.Generator,
    n_points: int = 60,
    rate_hz: float = 10.0,
) -> list:
    """Position V-shape with a 90 degree rotation about z, states ``(p, q)`` with ``q = (w, x, y, z)``."""
    times = np.arange(n_points) / rate_hz
    q_goal = np.array([1.0, 0.0, 0.0, 0.0])
    q_start = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])
    half = n_points // 2
    s = _speed_profile(n_points)
    out = []
    for _ in range(n_demos):
        start = np.array([-0.3, 0.25, 0.35]) + noise * rng.standard_normal(3)
        vertex = np.array([-0.15, 0.1, 0.0]) + noise * rng.standard_normal(3)
        goal = np.zeros(3)
        pos = np.empty((n_points, 3))
        a = s[: half + 1] / s[half]
        pos[: half + 1] = start + a[:, None] * (vertex - start)
        b = (s[half:] - s[half]) / (1 - s[half])
        pos[half:] = vertex + b[:, None] * (goal - vertex)
        q0 = q_start + noise * rng.standard_normal(4)
        q0 /= np.linalg.norm(q0)
        quat = quat_slerp(q0, q_goal, s)
        out.append(RawTrajectory(times, np.concatenate([pos, quat], axis=1)))
    return out


def pose_demonstrations(trajs: Sequence[RawTrajectory], cutoff: Optional[float] = 2.0) -> list:
    spec = ManifoldSpec.parse("R3xS3")
    out = []
    for t in trajs:
        st = t.states.copy()
        st[:, 3:] /= np.linalg.norm(st[:, 3:], axis=1, keepdims=True)
        # keep the quaternion sign continuous
        for k in range(1, len(st)):
            if np.dot(st[k, 3:], st[k - 1, 3:]) < 0:
                st[k, 3:] *= -1
        t = RawTrajectory(t.times, st)
        if cutoff is not None:
            t = lowpass_filter(t, cutoff, sphere_blocks=[slice(3, 7)])
        out.append(make_demonstration(spec, t.times, t.states))
    return out


def retime(demo: Demonstration, speed: float) -> Demonstration:
    """Rescale time so the mean speed along the path equals ``speed``."""
    spec = demo.spec
    length = float(spec.dist(demo.points[:-1], demo.points[1:]).sum())
    t = demo.times - demo.times[0]
    times = t * (length / speed) / t[-1]
    return make_demonstration(spec, times, demo.points)


def letter_demonstrations(
    shape_id: str,
    n_demos: int = 3,
    noise: float = 0.03,
    seed: int = 0,
    speed: Optional[float] = 1.0,
    **kw,
) -> list:
    """Synthetic letter -> sphere projection -> common goal, the standard S^2 dataset.

    With ``speed`` set, every demonstration is retimed to that mean speed
    (rad/s) before alignment.
    """
    rng = np.random.default_rng(seed)
    raw = generate_synthetic_letters(shape_id, n_demos, noise, rng)
    demos = project_letters_to_sphere(raw, **kw)
    if speed is not None:
        demos = [retime(d, speed) for d in demos]
    return shift_to_common_goal(demos)
