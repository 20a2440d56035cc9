"""
Marle BGK - Linearised Operator Tests

Tests for:
- Kernel identities, projections and self-adjointness
- Spectral gap and coercivity
- Micro-macro coefficients and the weighted norm split
- Exact nonlinear decompositions, the remainder Gamma and its Hessian
"""
import math

import numpy as np
import pytest

from marle_bgk.exceptions import SmallDataError
from marle_bgk.schemas import AnalysisConfig
from marle_bgk.services.distributions import Macrostate, build_background, eval_juttner, from_perturbation
from marle_bgk.services.juttner_functions import solve_gamma
from marle_bgk.services.linear_analysis import (
    GAMMA_AGREEMENT_TOL,
    GAMMA_SAMPLE_NORM,
    LinearizedOperator,
    analyze_operator,
    eval_hessian_Q,
    random_perturbation,
)
from marle_bgk.services.moments import macrostate_of
from marle_bgk.services.phase_grid import build_grid


def unit_field(op, rng):
    f = random_perturbation(op.bg, rng)
    return f / op.norm(f)


class TestBasisAndProjections:
    """Tests for the orthonormal kernel basis, P and P0."""

    def test_basis_orthonormal(self, tiny_operator, tiny_grid):
        """The Gram matrix of e1..e5 is the identity."""
        gram = tiny_operator.basis.gram(tiny_grid)
        assert np.allclose(gram, np.eye(5), atol=1e-12)

    def test_kernel_identities(self, tiny_operator):
        """P0 fixes s, (1+I) p0 s and (1+I) p^i s to 1e-10."""
        for e in tiny_operator.kernel_fields():
            assert tiny_operator.norm(tiny_operator.apply_P0(e) - e) / tiny_operator.norm(e) <= 1e-10
            assert tiny_operator.norm(tiny_operator.apply_L(e)) <= 1e-10 * tiny_operator.norm(e)

    def test_P0_idempotent(self, tiny_operator, rng):
        """P0 P0 = P0."""
        f = unit_field(tiny_operator, rng)
        P0f = tiny_operator.apply_P0(f)
        assert tiny_operator.norm(tiny_operator.apply_P0(P0f) - P0f) <= 1e-12

    def test_P0_symmetric_in_weighted_product(self, tiny_operator, rng):
        """<w P0 f, g> = <w f, P0 g>."""
        op = tiny_operator
        w = op.low_rank.weight
        f, g = unit_field(op, rng), unit_field(op, rng)
        assert abs(op.inner(w * op.apply_P0(f), g) - op.inner(w * f, op.apply_P0(g))) <= 1e-14

    def test_P0_range_in_kernel(self, tiny_operator, rng):
        """P0 f lies in the span of the kernel fields."""
        f = unit_field(tiny_operator, rng)
        P0f = tiny_operator.apply_P0(f)
        assert tiny_operator.norm(tiny_operator.apply_P(P0f) - P0f) <= 1e-10 * max(tiny_operator.norm(P0f), 1.0)

    def test_P_orthogonal_projection(self, tiny_operator, rng):
        """P is idempotent and self-adjoint."""
        op = tiny_operator
        f, g = unit_field(op, rng), unit_field(op, rng)
        Pf = op.apply_P(f)
        assert op.norm(op.apply_P(Pf) - Pf) <= 1e-13
        assert abs(op.inner(Pf, g) - op.inner(f, op.apply_P(g))) <= 1e-14

    def test_batched_fields(self, tiny_operator, tiny_grid, rng):
        """Operators act row by row on stacked fields."""
        F = np.stack([unit_field(tiny_operator, rng) for _ in range(3)])
        out = tiny_operator.apply_L(F)
        assert out.shape == (3, tiny_grid.size)
        assert tiny_operator.norm(out[1] - tiny_operator.apply_L(F[1])) <= 1e-13


class TestSelfAdjointness:
    """Tests for symmetry and sign of L."""

    def test_self_adjoint_over_random_pairs(self, tiny_operator, rng):
        """|<Lf, g> - <f, Lg>| <= 1e-12 ||f|| ||g|| over 100 pairs."""
        op = tiny_operator
        for _ in range(100):
            f, g = random_perturbation(op.bg, rng), random_perturbation(op.bg, rng)
            gap = abs(op.inner(op.apply_L(f), g) - op.inner(f, op.apply_L(g)))
            assert gap <= 1e-12 * op.norm(f) * op.norm(g)

    def test_dissipative(self, tiny_operator, rng):
        """<Lf, f> <= 0."""
        for _ in range(20):
            f = unit_field(tiny_operator, rng)
            assert tiny_operator.inner(tiny_operator.apply_L(f), f) <= 1e-15


class TestSpectralGap:
    """Tests for the coercivity constant."""

    def test_dense_gap_is_minimal_weight(self, tiny_operator, tiny_grid):
        """lambda equals the smallest collision frequency on the grid."""
        report = tiny_operator.spectral_gap(method="dense")
        assert report.lam > 0
        assert report.lam == pytest.approx(tiny_grid.inv_energy.min(), rel=1e-8)
        assert report.residual <= 1e-10
        assert report.kernel_residual <= 1e-10

    def test_lanczos_agrees_with_dense(self, tiny_operator):
        """The matrix-free eigensolver reproduces the dense value."""
        dense = tiny_operator.spectral_gap(method="dense")
        lanczos = tiny_operator.spectral_gap(method="lanczos")
        assert lanczos.method == "lanczos"
        assert lanczos.lam == pytest.approx(dense.lam, rel=1e-8)

    def test_matvecs_count_eigensolver_applications(self, tiny_operator):
        """Lanczos reports every shift-invert application; the dense path applies none."""
        assert tiny_operator.spectral_gap(method="dense").matvecs == 0
        assert tiny_operator.spectral_gap(method="lanczos").matvecs > 1

    def test_auto_selects_dense_for_small_grids(self, tiny_operator):
        """auto falls back to dense below dense_limit."""
        assert tiny_operator.spectral_gap(method="auto", dense_limit=10**6).method == "dense"

    def test_stable_under_refinement(self, tiny_spec, tiny_operator):
        """lambda moves by less than 5% under 1.5x refinement of every axis."""
        coarse = tiny_operator.spectral_gap(method="dense").lam
        fine_grid = build_grid(tiny_spec.model_copy(update={"n_p": 9, "n_I": 6}))
        fine = LinearizedOperator(build_background(fine_grid)).spectral_gap(method="lanczos").lam
        assert abs(fine - coarse) / coarse <= 0.05

    def test_coercivity(self, tiny_operator, rng):
        """<Lf, f> + lambda ||(I-P) f||^2 <= 1e-10 over 200 seeded fields."""
        op = tiny_operator
        lam = op.spectral_gap(method="dense").lam
        for _ in range(200):
            f = unit_field(op, rng)
            micro = f - op.apply_P(f)
            assert op.inner(op.apply_L(f), f) + lam * op.inner(micro, micro) <= 1e-10

    def test_rayleigh_quotient(self, tiny_operator, rng):
        """Kernel fields have no quotient; other fields sit above lambda."""
        op = tiny_operator
        lam = op.spectral_gap(method="dense").lam
        assert op.rayleigh_quotient(op.kernel_fields()[0]) is None
        assert op.rayleigh_quotient(unit_field(op, rng)) >= lam * (1.0 - 1e-10)


class TestMicroMacro:
    """Tests for the macroscopic coefficients."""

    def test_reconstruct_matches_P(self, tiny_operator, tiny_bg, rng):
        """a s + b (1+I) p s + c ((1+I) p0 - delta) s equals P f."""
        f = unit_field(tiny_operator, rng)
        coeffs = tiny_operator.micro_macro(f)
        assert tiny_operator.norm(coeffs.reconstruct(tiny_bg) - tiny_operator.apply_P(f)) <= 1e-12

    def test_energy_direction(self, tiny_operator):
        """For f = e5, a = 0, b = 0 and a_tilde = -delta c."""
        e5 = tiny_operator.basis.vectors[4]
        coeffs = tiny_operator.micro_macro(e5)
        assert abs(coeffs.a) <= 1e-13
        assert np.max(np.abs(coeffs.b)) <= 1e-13
        assert coeffs.c == pytest.approx(1.0 / tiny_operator.basis.norms[4], rel=1e-12)
        assert coeffs.a_tilde == pytest.approx(-tiny_operator.consts.delta * coeffs.c, rel=1e-12)


class TestWeightedNormSplit:
    """Tests for the norm split and the dissipation identity."""

    def test_split(self, tiny_operator, rng):
        """macro + micro = ||f||^2 and dissipation = ||(I - P0) f||_w^2."""
        f = unit_field(tiny_operator, rng)
        split = tiny_operator.weighted_norm_split(f)
        assert split["macro_norm2"] + split["micro_norm2"] == pytest.approx(1.0, rel=1e-12)
        assert split["dissipation"] == pytest.approx(split["w_micro_norm2"], rel=1e-10)
        assert 0 <= split["dissipation"] <= split["w_norm2"] * (1.0 + 1e-12)


class TestNonlinearDecomposition:
    """Tests for the exact splitting of n, u and eta."""

    def test_exact_decompositions(self, tiny_operator, tiny_grid, rng):
        """n - 1, u and eta - eta0 equal linear part plus N to 1e-13."""
        op = tiny_operator
        for _ in range(10):
            f = 1e-2 * unit_field(op, rng)
            parts = op.nonlinear_parts(f)
            state = macrostate_of(tiny_grid, from_perturbation(op.bg, f))
            assert abs(state.n - 1.0 - (parts.linear_n + parts.N_n)) <= 1e-13
            assert np.max(np.abs(state.u_vec - (parts.linear_u + parts.N_u))) <= 1e-13
            assert abs(state.eta - op.consts.eta0 - (parts.linear_eta + parts.N_eta)) <= 1e-13

    def test_small_data_error(self, tiny_operator, tiny_bg, tiny_grid):
        """A perturbation that destroys the density leaves the small-data region."""
        s = tiny_bg.sqrt_F0
        v = tiny_grid.velocity * s
        f = -s + 0.5 * v / tiny_operator.inner(v, v)
        with pytest.raises(SmallDataError):
            tiny_operator.nonlinear_parts(f)

    def test_transitional_state_endpoints(self, tiny_operator, rng):
        """theta = 0 is the background and theta = 1 the perturbed state."""
        op = tiny_operator
        f = 1e-2 * unit_field(op, rng)
        parts = op.nonlinear_parts(f)
        start, end = op.transitional_state(parts, 0.0), op.transitional_state(parts, 1.0)
        assert start.n == 1.0 and start.gamma == op.consts.gamma0
        state = macrostate_of(op.grid, from_perturbation(op.bg, f))
        assert end.n == pytest.approx(state.n, rel=1e-13)
        assert end.gamma == pytest.approx(state.gamma, rel=1e-10)


class TestGamma:
    """Tests for the nonlinear remainder."""

    @pytest.mark.parametrize("seed", range(8))
    def test_direct_matches_defect(self, tiny_operator, seed):
        """Both evaluations of Gamma agree to 1e-8 ||f||^2 for every seeded field."""
        op = tiny_operator
        rng = np.random.Generator(np.random.Philox(key=seed))
        f = GAMMA_SAMPLE_NORM * unit_field(op, rng)
        direct, defect = op.gamma_direct(f), op.gamma_defect(f)
        assert op.norm(direct - defect) <= GAMMA_AGREEMENT_TOL * GAMMA_SAMPLE_NORM**2

    def test_agreement_floor_independent_of_amplitude(self, tiny_operator, rng):
        """The gap between the two evaluations stays at rounding level for every amplitude."""
        op = tiny_operator
        g = unit_field(op, rng)
        for eps in (1e-1, 1e-2, 1e-3, 1e-4):
            f = eps * g
            assert op.norm(op.gamma_direct(f) - op.gamma_defect(f)) <= 1e-12

    def test_vanishes_at_zero(self, tiny_operator, tiny_grid):
        """Gamma(0) = 0."""
        zero = np.zeros(tiny_grid.size)
        assert tiny_operator.norm(tiny_operator.gamma_direct(zero)) == 0.0
        assert tiny_operator.norm(tiny_operator.gamma_defect(zero)) <= 1e-12

    def test_quadratic_smallness(self, tiny_operator, tiny_bg, tiny_grid, rng):
        """log ||Gamma(eps g)|| grows with slope 2 +- 0.1 in log eps."""
        op = tiny_operator
        s = tiny_bg.sqrt_F0
        g = s * (1.0 + tiny_grid.inv_energy + tiny_grid.velocity) + random_perturbation(tiny_bg, rng)
        g /= op.norm(g)
        eps = np.geomspace(1e-4, 1e-1, 7)
        sizes = [op.norm(op.gamma_defect(e * g)) for e in eps]
        slope = np.polyfit(np.log(eps), np.log(sizes), 1)[0]
        assert abs(slope - 2.0) <= 0.1


class TestHessian:
    """Tests for the Hessian of the Juttner family in (n, u, eta)."""

    def test_matches_finite_differences(self, tiny_grid, tiny_bg):
        """Q F agrees with central second differences to 1e-6 relative."""
        grid = tiny_grid
        eta = 1.01 * tiny_bg.consts.eta0
        centre = np.array([1.05, 0.05, -0.03, 0.02, eta])
        nodes = np.flatnonzero(grid.energy < 6.0)[:12]
        steps = np.full(5, 2e-4)

        def F_at(v):
            state = Macrostate(n=v[0], u=(v[1], v[2], v[3]), gamma=solve_gamma(grid, v[4]), eta=v[4])
            return eval_juttner(grid, state)[nodes]

        state = Macrostate(n=1.05, u=(0.05, -0.03, 0.02), gamma=solve_gamma(grid, eta), eta=eta)
        hess = eval_hessian_Q(grid, state)
        exact = hess.Q[nodes] * hess.F_theta[nodes, None, None]

        fd = np.zeros_like(exact)
        for a in range(5):
            for b in range(5):
                ea, eb = np.eye(5)[a] * steps[a], np.eye(5)[b] * steps[b]
                if a == b:
                    value = (F_at(centre + ea) - 2.0 * F_at(centre) + F_at(centre - ea)) / steps[a] ** 2
                else:
                    value = (
                        F_at(centre + ea + eb) - F_at(centre + ea - eb) - F_at(centre - ea + eb) + F_at(centre - ea - eb)
                    ) / (4.0 * steps[a] * steps[b])
                fd[:, a, b] = value

        error = np.max(np.abs(fd - exact), axis=(1, 2)) / np.max(np.abs(exact), axis=(1, 2))
        assert np.max(error) <= 1e-6

    def test_symmetric_blocks(self, tiny_grid, tiny_bg):
        """Each per-node block is symmetric."""
        hess = eval_hessian_Q(tiny_grid, tiny_bg.state)
        assert np.array_equal(hess.Q, np.transpose(hess.Q, (0, 2, 1)))
        assert np.allclose(hess.F_theta, tiny_bg.F0, rtol=1e-12, atol=0)

    def test_off_grid_points(self, tiny_grid, tiny_bg):
        """Explicit (p, I) points are accepted."""
        hess = eval_hessian_Q(tiny_grid, tiny_bg.state, p=[0.1, 0.2, 0.3], I=[1.5])
        assert hess.Q.shape == (1, 5, 5)
        assert math.isfinite(hess.F_theta[0])


class TestAnalyzeOperator:
    """Tests for the analysis driver."""

    def test_tiny_grid_passes(self, tiny_spec):
        """All operator monitors pass on a tiny grid."""
        config = AnalysisConfig(grid=tiny_spec, n_pairs=10, n_coercivity=10, gap_method="dense")
        analysis = analyze_operator(config)
        assert analysis.passed, analysis.failed_monitors()
        assert analysis.report["spectral_gap"]["lambda"] > 0
        assert set(analysis.report["quadrature_vs_oracle"]) == {"M", "Mtilde"}

    def test_seeded_reproducibility(self, tiny_spec):
        """The same seed gives the same report."""
        config = AnalysisConfig(grid=tiny_spec, n_pairs=3, n_coercivity=3, gap_method="dense", seed=7)
        first, second = analyze_operator(config).report, analyze_operator(config).report
        assert first["self_adjointness"] == second["self_adjointness"]
        assert first["gamma_agreement"] == second["gamma_agreement"]

    @pytest.mark.parametrize("seed", range(8))
    def test_gamma_agreement_passes_for_every_seed(self, tiny_spec, seed):
        """The Gamma monitor does not depend on the seeded field."""
        config = AnalysisConfig(grid=tiny_spec, n_pairs=1, n_coercivity=1, gap_method="dense", seed=seed)
        analysis = analyze_operator(config)
        assert "gamma_agreement" not in analysis.failed_monitors()
        assert analysis.report["gamma_agreement"] <= GAMMA_AGREEMENT_TOL

    def test_general_D(self, small_spec):
        """A D = 3 analysis runs through the general oracle and passes."""
        config = AnalysisConfig(
            grid=small_spec.model_copy(update={"D": 3.0}), n_pairs=5, n_coercivity=5, gap_method="dense"
        )
        analysis = analyze_operator(config)
        assert analysis.passed, analysis.failed_monitors()
        errors = analysis.report["quadrature_vs_oracle"]
        assert all(math.isfinite(errors[key]) for key in ("M", "Mtilde"))
