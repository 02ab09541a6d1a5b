"""Finite-difference test cases covering every engine primitive.

Each case builds a scalar-valued function of one tensor and hands it to
`grad_check`. The same registry backs the unit tests, the acceptance
gradient suite, and the `grad-check` CLI subcommand. Inputs are drawn away
from kinks (relu zeros, sampling cell edges) so central differences are
trustworthy; kink handling itself is tested separately.
"""

from __future__ import annotations

import numpy as np

from liftview import tensor as T
from liftview.gradcheck import GradCheckResult, grad_check
from liftview.tensor import Tensor


def _signed_away_from_zero(rng, shape, lo=0.2, hi=1.5):
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _proj_const(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _interior_coords(rng, n, sizes):
    """Grid coords strictly inside cells and away from the clamp border."""
    cols = []
    for s in sizes:
        cell = rng.integers(0, s - 1, size=n)
        cols.append(cell + rng.uniform(0.15, 0.85, size=n))
    return np.stack(cols, axis=-1)


def primitive_cases() -> list[tuple[str, object]]:
    """(name, build) pairs; build(seed) -> (f, x) for grad_check."""
    cases: list[tuple[str, object]] = []

    def case(name):
        def deco(fn):
            cases.append((name, fn))
            return fn
        return deco

    @case("add")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)))
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.add(x, b), r)), x

    @case("add_broadcast")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 4)))
        r = _proj_const(rng, (2, 3, 4))
        return lambda x: T.tsum(T.mul(T.add(b, x), r)), x

    @case("sub")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)))
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.sub(x, b), r)), x

    @case("mul_broadcast")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)))
        r = _proj_const(rng, (3, 2, 4))
        return lambda x: T.tsum(T.mul(T.mul(x, b), r)), x

    @case("div_numerator")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        d = Tensor(_signed_away_from_zero(rng, (3, 4), lo=0.5))
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.div(x, d), r)), x

    @case("div_denominator")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(_signed_away_from_zero(rng, (3, 4), lo=0.5), requires_grad=True)
        a = Tensor(rng.normal(size=(3, 4)))
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.div(a, x), r)), x

    @case("matmul_left")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)))
        r = _proj_const(rng, (3, 5))
        return lambda x: T.tsum(T.mul(T.matmul(x, b), r)), x

    @case("matmul_right")
    def _(seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(3, 4)))
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        r = _proj_const(rng, (3, 5))
        return lambda x: T.tsum(T.mul(T.matmul(a, x), r)), x

    @case("matmul_batched")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)))
        r = _proj_const(rng, (2, 3, 5))
        return lambda x: T.tsum(T.mul(T.matmul(x, b), r)), x

    @case("conv2d_input")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        r = _proj_const(rng, (3, 4, 5))
        return lambda x: T.tsum(T.mul(T.conv2d(x, w), r)), x

    @case("conv2d_weight")
    def _(seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, 2, 4, 5)))
        x = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        r = _proj_const(rng, (2, 3, 4, 5))
        return lambda x: T.tsum(T.mul(T.conv2d(a, x), r)), x

    @case("conv2d_bias")
    def _(seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, 4, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        r = _proj_const(rng, (3, 4, 5))
        return lambda x: T.tsum(T.mul(T.conv2d(a, w, x), r)), x

    @case("upsample2x")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        r = _proj_const(rng, (2, 6, 8))
        return lambda x: T.tsum(T.mul(T.upsample2x(x), r)), x

    @case("bilinear_grid")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 5, 6)), requires_grad=True)
        pts = Tensor(_interior_coords(rng, 7, (6, 5)))
        r = _proj_const(rng, (7, 3))
        return lambda x: T.tsum(T.mul(T.bilinear_sample_2d(x, pts), r)), x

    @case("bilinear_grid_batched")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 5, 6)), requires_grad=True)
        pts = Tensor(np.stack([_interior_coords(rng, 7, (6, 5)) for _ in range(2)]))
        r = _proj_const(rng, (2, 7, 3))
        return lambda x: T.tsum(T.mul(T.bilinear_sample_2d(x, pts), r)), x

    @case("bilinear_coords")
    def _(seed):
        rng = np.random.default_rng(seed)
        grid = Tensor(rng.normal(size=(3, 5, 6)))
        x = Tensor(_interior_coords(rng, 7, (6, 5)), requires_grad=True)
        r = _proj_const(rng, (7, 3))
        return lambda x: T.tsum(T.mul(T.bilinear_sample_2d(grid, x), r)), x

    @case("trilinear_grid")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 4, 5, 6)), requires_grad=True)
        pts = Tensor(_interior_coords(rng, 7, (6, 5, 4)))
        r = _proj_const(rng, (7, 2))
        return lambda x: T.tsum(T.mul(T.trilinear_sample_3d(x, pts), r)), x

    @case("trilinear_coords")
    def _(seed):
        rng = np.random.default_rng(seed)
        grid = Tensor(rng.normal(size=(2, 4, 5, 6)))
        x = Tensor(_interior_coords(rng, 7, (6, 5, 4)), requires_grad=True)
        r = _proj_const(rng, (7, 2))
        return lambda x: T.tsum(T.mul(T.trilinear_sample_3d(grid, x), r)), x

    @case("relu")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(_signed_away_from_zero(rng, (3, 4)), requires_grad=True)
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.relu(x), r)), x

    @case("silu")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.silu(x), r)), x

    @case("sigmoid")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.sigmoid(x), r)), x

    @case("exp")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.exp(x), r)), x

    @case("log")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        r = _proj_const(rng, (3, 4))
        return lambda x: T.tsum(T.mul(T.log(x), r)), x

    @case("softmax")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        r = _proj_const(rng, (3, 5))
        return lambda x: T.tsum(T.mul(T.softmax(x), r)), x

    @case("sum_all")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        return lambda x: T.tsum(T.mul(x, x)), x

    @case("sum_axes")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        r = _proj_const(rng, (3,))
        return lambda x: T.tsum(T.mul(T.tsum(x, axes=(0, 2)), r)), x

    @case("mean_axes")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        r = _proj_const(rng, (2, 4))
        return lambda x: T.tsum(T.mul(T.tmean(x, axes=1), r)), x

    @case("concat")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 3)))
        r = _proj_const(rng, (3, 5))
        return lambda x: T.tsum(T.mul(T.concat([x, b], axis=1), r)), x

    @case("reshape")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = _proj_const(rng, (2, 6))
        return lambda x: T.tsum(T.mul(T.reshape(x, (2, 6)), r)), x

    @case("permute")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        r = _proj_const(rng, (4, 2, 3))
        return lambda x: T.tsum(T.mul(T.permute(x, (2, 0, 1)), r)), x

    @case("scatter_rows")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        idx = rng.permutation(7)[:3]
        r = _proj_const(rng, (7, 4))
        return lambda x: T.tsum(T.mul(T.scatter_rows(x, idx, 7), r)), x

    @case("sdpa_q")
    def _(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(6, 4)))
        v = Tensor(rng.normal(size=(6, 3)))
        r = _proj_const(rng, (5, 3))
        return lambda x: T.tsum(T.mul(T.sdpa(x, k, v), r)), x

    @case("sdpa_k")
    def _(seed):
        rng = np.random.default_rng(seed)
        q = Tensor(rng.normal(size=(5, 4)))
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(6, 3)))
        r = _proj_const(rng, (5, 3))
        return lambda x: T.tsum(T.mul(T.sdpa(q, x, v), r)), x

    @case("sdpa_v")
    def _(seed):
        rng = np.random.default_rng(seed)
        q = Tensor(rng.normal(size=(5, 4)))
        k = Tensor(rng.normal(size=(6, 4)))
        x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        r = _proj_const(rng, (5, 3))
        return lambda x: T.tsum(T.mul(T.sdpa(q, k, x), r)), x

    return cases


def composite_cases() -> list[tuple[str, object]]:
    """End-to-end chains mirroring the two training paths, at tiny sizes."""
    from liftview import composite_paths

    return composite_paths.cases()


def run_cases(cases, seeds=(0, 1, 2, 3, 4), tol: float = 1e-4,
              h: float = 1e-5) -> list[tuple[str, int, GradCheckResult]]:
    """Run each case at each seed. Builders return (f, x) or (f, x, tol)."""
    results = []
    for name, build in cases:
        for seed in seeds:
            built = build(seed)
            f, x = built[0], built[1]
            case_tol = built[2] if len(built) > 2 else tol
            results.append((name, seed, grad_check(f, x, tol=case_tol, h=h)))
    return results
