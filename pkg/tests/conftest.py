import math

import numpy as np
import pytest
import torch

from rsds.manifold import ManifoldSpec, as_tensor

SPECS = {
    "S2": ManifoldSpec.sphere(2),
    "S3": ManifoldSpec.sphere(3),
    "R3xS3": ManifoldSpec.parse("R3xS3"),
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tangent(spec, x, rng, max_norm=math.pi - 0.1):
    """Tangent vectors at ``x`` with every sphere block norm below ``max_norm``."""
    v = spec.proj(x, as_tensor(rng.standard_normal(x.shape)))
    parts = []
    for b in spec.blocks:
        blk = v[..., b.slice]
        if b.kind == "sphere":
            n = torch.linalg.vector_norm(blk, dim=-1, keepdim=True)
            target = as_tensor(rng.uniform(0.0, max_norm, size=n.shape))
            blk = blk / n * target
        parts.append(blk)
    return torch.cat(parts, dim=-1)


def tangent_fd(spec, fn, x, basis, h=1e-6):
    """Central finite differences of ``fn`` along tangent directions, mapped through Log."""
    y = fn(x)
    cols = []
    for e in basis:
        yp = fn(spec.exp(x, h * e))
        ym = fn(spec.exp(x, -h * e))
        cols.append((spec.log(y, yp) - spec.log(y, ym)) / (2 * h))
    return y, torch.stack(cols, dim=-1)


def pytest_terminal_summary(terminalreporter):
    try:
        import acceptance_lib
    except ImportError:
        return
    if not acceptance_lib.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail, secs in sorted(acceptance_lib.RESULTS):
        terminalreporter.write_line(f"ACCEPTANCE criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  ({secs:.1f}s)")
