"""
Marle BGK - Collision Operator Tests

Tests for:
- Local equilibrium moment matching and conservation
- Entropy production and the discrete H-theorem
- Conservative projection and the relaxation substep
"""
import numpy as np
import pytest

from marle_bgk.exceptions import NonFiniteInputError
from marle_bgk.schemas import CollisionSettings
from marle_bgk.services.collision import (
    CollisionParams,
    bgk_rhs,
    conservation_defect,
    conservative_projection,
    entropy_production,
    local_equilibria,
    local_equilibrium,
    matching_weights,
    relaxation_step,
)
from marle_bgk.services.distributions import eval_juttner, make_macrostate
from marle_bgk.services.moments import entropy_density, invariant_totals


def near_equilibrium(bg, rng, amplitude=0.05):
    return bg.F0 * (1.0 + amplitude * rng.uniform(-1.0, 1.0, size=bg.F0.size))


def invariant_drift(grid, F, dt, params):
    """Euclidean change of the five invariant totals over one substep."""
    G = relaxation_step(grid, F, dt, params)
    return float(np.linalg.norm(invariant_totals(grid, G) - invariant_totals(grid, F)))


class TestLocalEquilibrium:
    """Tests for moment matching."""

    def test_juttner_is_its_own_equilibrium(self, tiny_grid):
        """A Juttner field returns its own parameters."""
        target = make_macrostate(tiny_grid, 1.1, [0.05, -0.02, 0.01], 1.4)
        F = eval_juttner(tiny_grid, target)
        state, FE = local_equilibrium(tiny_grid, F)
        assert state.n == pytest.approx(target.n, rel=1e-10)
        assert np.allclose(state.u_vec, target.u_vec, atol=1e-10)
        assert state.gamma == pytest.approx(target.gamma, rel=1e-10)
        assert np.allclose(FE, F, rtol=1e-8, atol=1e-12 * F.max())

    def test_matching_moments_shared(self, tiny_grid, tiny_bg, rng):
        """F_E shares eta n and V^mu with F."""
        F = near_equilibrium(tiny_bg, rng)
        _, FE = local_equilibrium(tiny_grid, F)
        G = matching_weights(tiny_grid) * tiny_grid.weights
        assert np.allclose(G @ FE, G @ F, rtol=1e-11, atol=1e-11)

    def test_conservation_on_random_fields(self, tiny_grid, tiny_bg, rng):
        """All five defect components stay below 1e-9 relative on 50 fields."""
        for _ in range(50):
            defect = conservation_defect(tiny_grid, near_equilibrium(tiny_bg, rng))
            assert defect.max_relative <= 1e-9

    def test_workers_do_not_change_results(self, tiny_grid, tiny_bg, rng):
        """Thread-pool evaluation is bit-identical to the serial loop."""
        F = np.stack([near_equilibrium(tiny_bg, rng) for _ in range(4)])
        serial = local_equilibria(tiny_grid, F, workers=1)[1]
        threaded = local_equilibria(tiny_grid, F, workers=3)[1]
        assert np.array_equal(serial, threaded)

    def test_non_finite_rejected(self, tiny_grid, tiny_bg):
        """NaN fields raise before any moment is taken."""
        F = tiny_bg.F0.copy()
        F[5] = np.nan
        with pytest.raises(NonFiniteInputError):
            local_equilibrium(tiny_grid, F)


class TestRightHandSide:
    """Tests for the BGK right-hand side and entropy production."""

    def test_equilibrium_is_stationary(self, tiny_grid, tiny_bg):
        """Q(F0) vanishes up to the matching tolerance."""
        rhs = bgk_rhs(tiny_grid, tiny_bg.F0)
        assert np.max(np.abs(rhs)) <= 1e-12 * tiny_bg.F0.max()

    def test_entropy_production_non_negative(self, tiny_grid, tiny_bg, rng):
        """-sum W (1 + ln F) Q(F) >= 0 on random near-equilibrium fields."""
        for _ in range(20):
            assert entropy_production(tiny_grid, near_equilibrium(tiny_bg, rng)) >= -1e-12

    def test_spatial_rhs_shape(self, tiny_grid, tiny_bg, rng):
        """Spatial fields are handled cell by cell."""
        F = np.stack([near_equilibrium(tiny_bg, rng) for _ in range(2)])
        assert bgk_rhs(tiny_grid, F).shape == F.shape


class TestConservativeProjection:
    """Tests for the multiplicative invariant correction."""

    def test_restores_totals(self, tiny_grid, tiny_bg, rng):
        """The five invariant totals are restored to rounding."""
        F = near_equilibrium(tiny_bg, rng)
        targets = invariant_totals(tiny_grid, F)
        G = F * (1.0 + 0.01 * rng.uniform(-1.0, 1.0, size=F.size))
        corrected = conservative_projection(tiny_grid, G, targets)
        assert np.allclose(invariant_totals(tiny_grid, corrected), targets, rtol=1e-12, atol=1e-13)

    def test_identity_when_totals_match(self, tiny_grid, tiny_bg):
        """Nothing changes when the totals already agree."""
        F = tiny_bg.F0
        corrected = conservative_projection(tiny_grid, F, invariant_totals(tiny_grid, F))
        assert np.allclose(corrected, F, rtol=1e-12, atol=0)


class TestRelaxationStep:
    """Tests for the exponential relaxation substep."""

    def test_params_from_settings(self):
        """CollisionParams mirrors the schema fields."""
        params = CollisionParams.from_settings(
            CollisionSettings(mode="picard", picard_iterations=2, conservative_projection=True, workers=2), tau=0.5
        )
        assert params == CollisionParams(tau=0.5, mode="picard", picard_iterations=2, conservative=True, workers=2)

    def test_rejects_non_positive_dt(self, tiny_grid, tiny_bg):
        """dt must be positive."""
        with pytest.raises(ValueError):
            relaxation_step(tiny_grid, tiny_bg.F0, 0.0)

    def test_equilibrium_fixed_point(self, tiny_grid, tiny_bg):
        """F0 is left unchanged by both modes."""
        for params in (CollisionParams(), CollisionParams(mode="picard", conservative=True)):
            F = relaxation_step(tiny_grid, tiny_bg.F0, 0.1, params)
            assert np.allclose(F, tiny_bg.F0, rtol=1e-10, atol=1e-14 * tiny_bg.F0.max())

    @pytest.mark.parametrize("mode", ["frozen", "picard"])
    def test_projection_conserves_totals(self, tiny_grid, tiny_bg, rng, mode):
        """With the projection the invariant totals are kept exactly."""
        F = near_equilibrium(tiny_bg, rng)
        params = CollisionParams(mode=mode, picard_iterations=2, conservative=True)
        G = relaxation_step(tiny_grid, F, 0.2, params)
        totals, new_totals = invariant_totals(tiny_grid, F), invariant_totals(tiny_grid, G)
        assert np.allclose(new_totals, totals, rtol=1e-12, atol=1e-13)

    def test_picard_keeps_positivity(self, tiny_grid, tiny_bg, rng):
        """Without the projection every picard coefficient is non-negative."""
        F = near_equilibrium(tiny_bg, rng, amplitude=0.5)
        G = relaxation_step(tiny_grid, F, 1.0, CollisionParams(mode="picard", picard_iterations=3))
        assert np.all(G >= 0)

    def test_relaxes_towards_equilibrium(self, tiny_grid, tiny_bg, rng):
        """The distance to F_E shrinks over a step."""
        F = near_equilibrium(tiny_bg, rng)
        _, FE = local_equilibrium(tiny_grid, F)
        G = relaxation_step(tiny_grid, F, 0.5)
        before = tiny_grid.weights @ ((F - FE) ** 2 / tiny_bg.F0)
        after = tiny_grid.weights @ ((G - FE) ** 2 / tiny_bg.F0)
        assert after < before

    def test_infinite_step_returns_equilibrium(self, tiny_grid, tiny_bg, rng):
        """For dt -> infinity a frozen step lands exactly on F_E."""
        F = near_equilibrium(tiny_bg, rng)
        _, FE = local_equilibrium(tiny_grid, F)
        assert np.array_equal(relaxation_step(tiny_grid, F, 1e6), FE)

    def test_frozen_drift_is_second_order(self, tiny_grid, tiny_bg, rng):
        """Halving dt quarters the invariant drift of one frozen step."""
        F = near_equilibrium(tiny_bg, rng)
        drifts = [invariant_drift(tiny_grid, F, dt, CollisionParams()) for dt in (0.2, 0.1, 0.05)]
        for coarse, fine in zip(drifts[:-1], drifts[1:]):
            assert 3.5 <= coarse / fine <= 4.5

    @pytest.mark.parametrize("dt", [0.2, 0.1, 0.05])
    def test_picard_reduces_drift(self, tiny_grid, tiny_bg, rng, dt):
        """Three picard sweeps cut the frozen drift by at least 10x."""
        F = near_equilibrium(tiny_bg, rng)
        frozen = invariant_drift(tiny_grid, F, dt, CollisionParams())
        picard = invariant_drift(tiny_grid, F, dt, CollisionParams(mode="picard", picard_iterations=3))
        assert picard * 10.0 <= frozen

    def test_h_theorem(self, tiny_grid, tiny_bg):
        """Entropy never decreases along 0D relaxation from 20 seeded fields."""
        params = CollisionParams(conservative=True)
        for seed in range(20):
            rng = np.random.Generator(np.random.Philox(key=seed))
            F = near_equilibrium(tiny_bg, rng)
            H = entropy_density(tiny_grid, F)
            for _ in range(20):
                F = relaxation_step(tiny_grid, F, 0.05, params)
                H_next = entropy_density(tiny_grid, F)
                assert H_next >= H - 1e-12
                H = H_next

    def test_workers_bit_identical(self, tiny_grid, tiny_bg, rng):
        """Spatial relaxation gives identical results for any worker count."""
        F = np.stack([near_equilibrium(tiny_bg, rng) for _ in range(4)])
        serial = relaxation_step(tiny_grid, F, 0.1, CollisionParams(workers=1))
        threaded = relaxation_step(tiny_grid, F, 0.1, CollisionParams(workers=4))
        assert np.array_equal(serial, threaded)
