import math

import numpy as np
import pytest

from resetsde.fpk import (
    CharacteristicFacePresent,
    MisalignedH,
    NegativeDensity,
    NegativeOutflux,
    StabilityViolation,
    UnsupportedDimension,
    adjoint_apply,
    apply_absorbing_bc,
    build_grid,
    coarsen,
    divergence_rates,
    evolve,
    probability_current,
    project_density,
    run_to_stationarity,
    stable_dt,
    stationary_density,
    total_mass,
    transfer_flux,
    DensityState,
)
from resetsde.model import (
    AffineField,
    AffineMap,
    Mode,
    ModelSpec,
    ResetEdge,
    SurfaceTarget,
    TerminalTarget,
    VectorFieldSet,
    box_domain,
    build_model,
    constant_field,
    interval_domain,
    zero_field,
)

THERMO_SPANS = ((19.0, 22.28), (17.72, 21.0))


def thermostat_1d(sigma=0.3):
    """Two-mode 1D switching fixture with far-field terminal truncation."""
    drift0 = AffineField([[-1.0]], [15.0])
    drift1 = AffineField([[-1.0]], [25.0])
    diff = constant_field([sigma])
    mode0 = Mode(interval_domain(*THERMO_SPANS[0]), VectorFieldSet(drift0, (diff,)))
    mode1 = Mode(interval_domain(*THERMO_SPANS[1]), VectorFieldSet(drift1, (diff,)))
    edges = [
        ResetEdge(0, 0, SurfaceTarget(1, AffineMap.identity(1))),
        ResetEdge(1, 1, SurfaceTarget(0, AffineMap.identity(1))),
        ResetEdge(0, 1, TerminalTarget("truncated")),
        ResetEdge(1, 0, TerminalTarget("truncated")),
    ]
    return build_model(ModelSpec(1, [mode0, mode1], edges, terminal_states=["truncated"]))


def thermostat_resolution(dx):
    return [
        (int(round((hi - lo) / dx)),) for lo, hi in THERMO_SPANS
    ]


def brownian_interval(lo=0.0, hi=8.0, sigma=1.0):
    mode = Mode(
        interval_domain(lo, hi),
        VectorFieldSet(zero_field(1), (constant_field([sigma]),)),
    )
    edges = [
        ResetEdge(0, 0, TerminalTarget("hit")),
        ResetEdge(0, 1, TerminalTarget("escaped")),
    ]
    return build_model(ModelSpec(1, [mode], edges, terminal_states=["hit", "escaped"]))


def ou_interval(kappa=1.0, sigma=1.0, half_width=6.0):
    mode = Mode(
        interval_domain(-half_width, half_width),
        VectorFieldSet(AffineField([[-kappa]], [0.0]), (constant_field([sigma]),)),
    )
    edges = [
        ResetEdge(0, 0, TerminalTarget("escaped")),
        ResetEdge(0, 1, TerminalTarget("escaped")),
    ]
    return build_model(ModelSpec(1, [mode], edges, terminal_states=["escaped"]))


def gaussian_cells(grid, mode, mean, std):
    """Exact cell averages of a normal density via the error function."""
    mg = grid.mode_grids[mode]
    faces = mg.faces(0)
    cdf = np.array([0.5 * (1.0 + math.erf((x - mean) / (std * math.sqrt(2.0)))) for x in faces])
    return np.diff(cdf) / mg.dx[0]


def point_density(grid, mode, mean, std):
    arrays = [np.zeros(mg.shape) for mg in grid.mode_grids]
    arrays[mode] = gaussian_cells(grid, mode, mean, std)
    mass = sum(float(np.sum(a)) * grid.mode_grids[i].cell_volume for i, a in enumerate(arrays))
    q0 = {name: 0.0 for name in grid.model.terminal_states}
    return DensityState([a / mass for a in arrays], q0, 0.0)


class TestBuildGrid:
    def test_unit_interval(self):
        model = brownian_interval(0.0, 1.0)
        grid = build_grid(model, 100)
        mg = grid.mode_grids[0]
        assert mg.shape == (100,)
        assert mg.faces(0)[0] == 0.0 and mg.faces(0)[-1] == 1.0
        assert len(grid.terminal_tables) == 2

    def test_thermostat_h_faces_tagged_and_paired(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.02))
        assert len(grid.surface_tables) == 2
        into_mode1 = next(t for t in grid.surface_tables if t.target_mode == 1)
        assert into_mode1.h_face_index == 64        # 19.0 on mode 1's grid
        assert into_mode1.inject_k_index[0] == 64   # drift pushes upward there
        into_mode0 = next(t for t in grid.surface_tables if t.target_mode == 0)
        assert into_mode0.h_face_index == 100       # 21.0 on mode 0's grid
        assert into_mode0.inject_k_index[0] == 99   # drift pushes downward there

    def test_misaligned_h_rejected(self):
        model = thermostat_1d()
        # 3.28 / 40 cells leaves the image hyperplanes off the face lattice
        with pytest.raises(MisalignedH):
            build_grid(model, [(40,), (40,)])

    def test_dimension_guard(self):
        mode = Mode(
            box_domain([0.0] * 3, [1.0] * 3),
            VectorFieldSet(
                zero_field(3),
                tuple(constant_field(np.eye(3)[i]) for i in range(3)),
            ),
        )
        edges = [ResetEdge(0, f, TerminalTarget("out")) for f in range(6)]
        model = build_model(ModelSpec(3, [mode], edges, terminal_states=["out"]))
        with pytest.raises(UnsupportedDimension):
            build_grid(model, 8)

    def test_characteristic_face_refused(self):
        drift = constant_field([0.0, -1.0])
        diff_x = constant_field([1.0, 0.0])
        mode = Mode(
            box_domain([0.0, 0.0], [1.0, 1.0]),
            VectorFieldSet(drift, (diff_x, zero_field(2))),
        )
        edges = [
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
        ]
        model = build_model(
            ModelSpec(2, [mode], edges, terminal_states=["out"], characteristic_faces=[(0, 2), (0, 3)])
        )
        with pytest.raises(CharacteristicFacePresent):
            build_grid(model, 16)


class TestAbsorbingBC:
    def test_ghosts_negate_edge_cells_exactly(self):
        model = brownian_interval(0.0, 1.0)
        grid = build_grid(model, 50)
        density = point_density(grid, 0, 0.5, 0.1)
        ghosted = apply_absorbing_bc(model, grid, density)
        pad = ghosted.padded[0]
        assert pad[0] == -pad[1]
        assert pad[-1] == -pad[-2]
        # face-interpolated boundary density is exactly zero
        assert 0.5 * (pad[0] + pad[1]) == 0.0
        assert 0.5 * (pad[-1] + pad[-2]) == 0.0

    def test_linear_profile_ghost_is_negated_neighbour(self):
        model = brownian_interval(0.0, 1.0)
        grid = build_grid(model, 10)
        density = DensityState([np.linspace(0.1, 1.0, 10)], {"hit": 0.0, "escaped": 0.0}, 0.0)
        ghosted = apply_absorbing_bc(model, grid, density)
        assert ghosted.padded[0][0] == -0.1

    def test_sine_mode_decay_matches_separation_of_variables(self):
        # heat equation on [0, 1] with absorbing ends: the sine mode decays
        # at rate pi^2 sigma^2 / 2
        sigma = 1.0
        model = brownian_interval(0.0, 1.0, sigma)
        n = 200
        grid = build_grid(model, n)
        mg = grid.mode_grids[0]
        xs = mg.centers(0)
        p0 = (np.pi / 2.0) * np.sin(np.pi * xs)
        density = DensityState([p0.copy()], {"hit": 0.0, "escaped": 0.0}, 0.0)
        dt = stable_dt(grid, 0.9)
        t_end = 0.05
        steps = int(round(t_end / dt))
        out = evolve(model, grid, density, dt, steps)
        expected = (np.pi / 2.0) * np.sin(np.pi * xs) * math.exp(
            -0.5 * np.pi**2 * sigma**2 * steps * dt
        )
        assert np.max(np.abs(out.p[0] - expected)) < 2e-3


class TestProbabilityCurrent:
    def test_constant_density_constant_fields_advective_only(self):
        v = 0.7
        mode = Mode(
            interval_domain(0.0, 1.0),
            VectorFieldSet(constant_field([v]), (constant_field([0.5]),)),
        )
        edges = [
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
        ]
        model = build_model(ModelSpec(1, [mode], edges, terminal_states=["out"]))
        grid = build_grid(model, 20)
        density = DensityState([np.full(20, 2.0)], {"out": 0.0}, 0.0)
        current = probability_current(model, grid, density)
        j = current.flux[0][0]
        # interior faces: p_bar v exactly, no divergence contribution
        assert np.allclose(j[1:-1], 2.0 * v)

    def test_gaussian_diffusive_current_matches_gradient(self):
        sigma = 1.0
        model = brownian_interval(-6.0, 6.0, sigma)
        errs = []
        for n in (150, 300):
            grid = build_grid(model, n)
            mg = grid.mode_grids[0]
            std = 1.0
            density = point_density(grid, 0, 0.0, std)
            current = probability_current(model, grid, density)
            faces = mg.faces(0)[1:-1]
            analytic = -0.5 * sigma**2 * (
                -(faces / std**2)
                * np.exp(-0.5 * faces**2 / std**2)
                / math.sqrt(2 * math.pi * std**2)
            )
            errs.append(np.max(np.abs(current.flux[0][0][1:-1] - analytic)))
        assert errs[0] < 2e-4
        assert errs[0] / errs[1] > 3.0   # second-order interior stencils

    def test_ou_stationary_current_vanishes_under_refinement(self):
        kappa, sigma = 1.0, 1.0
        model = ou_interval(kappa, sigma, half_width=6.0)
        maxjs = []
        for n in (100, 200):
            grid = build_grid(model, n)
            std = sigma / math.sqrt(2.0 * kappa)
            density = point_density(grid, 0, 0.0, std)
            current = probability_current(model, grid, density)
            maxjs.append(np.max(np.abs(current.flux[0][0][1:-1])))
        assert maxjs[0] / maxjs[1] > 3.0
        assert maxjs[1] < 5e-4


class TestAdjointApply:
    def test_constant_density_zero_drift_interior_rate_zero(self):
        model = brownian_interval(0.0, 1.0, sigma=0.8)
        grid = build_grid(model, 40)
        density = DensityState([np.ones(40)], {"hit": 0.0, "escaped": 0.0}, 0.0)
        rates = adjoint_apply(model, grid, density)
        assert np.allclose(rates[0][2:-2], 0.0, atol=1e-14)

    def test_linear_density_constant_advection(self):
        # constant sigma adds exactly zero on a linear profile, so the rate
        # is the pure advective -v alpha on interior cells
        v, alpha, sigma = 0.6, 0.9, 0.2
        mode = Mode(
            interval_domain(0.0, 1.0),
            VectorFieldSet(constant_field([v]), (constant_field([sigma]),)),
        )
        edges = [
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
        ]
        model = build_model(ModelSpec(1, [mode], edges, terminal_states=["out"]))
        grid = build_grid(model, 50)
        xs = grid.mode_grids[0].centers(0)
        density = DensityState([alpha * xs + 0.3], {"out": 0.0}, 0.0)
        rates = adjoint_apply(model, grid, density)
        assert np.allclose(rates[0][2:-2], -v * alpha, atol=1e-12)

    def test_heat_kernel_evolution_interior(self):
        sigma = 1.0
        model = brownian_interval(-4.0, 4.0, sigma)
        grid = build_grid(model, 400)
        mg = grid.mode_grids[0]
        w0 = 0.25
        density = point_density(grid, 0, 0.0, w0)
        dt = stable_dt(grid, 0.9)
        t_end = 0.1
        steps = int(round(t_end / dt))
        out = evolve(model, grid, density, dt, steps)
        var = w0**2 + sigma**2 * steps * dt
        xs = mg.centers(0)
        analytic = np.exp(-0.5 * xs**2 / var) / math.sqrt(2 * math.pi * var)
        interior = slice(20, -20)
        assert np.max(np.abs(out.p[0][interior] - analytic[interior])) < 2e-3


class TestTransferFlux:
    def test_zero_density_all_zero(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.04))
        density = DensityState(
            [np.zeros(mg.shape) for mg in grid.mode_grids], {"truncated": 0.0}, 0.0
        )
        current = probability_current(model, grid, density)
        sources, rates, diag = transfer_flux(model, grid, current)
        assert all(np.all(s == 0.0) for s in sources)
        assert rates["truncated"] == 0.0
        assert diag["total_sink"] == 0.0

    def test_thermostat_sink_equals_source_exactly(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.01))
        density = point_density(grid, 0, 20.0, 0.3)
        # evolve a little so flux reaches the switching faces
        dt = stable_dt(grid, 0.9)
        state = evolve(model, grid, density, dt, 500)
        current = probability_current(model, grid, state)
        sources, rates, diag = transfer_flux(model, grid, current)
        assert diag["total_sink"] == diag["total_source"] + diag["total_terminal_rate"]
        total_injected = sum(float(np.sum(s)) for s in sources)
        assert total_injected == pytest.approx(diag["total_source"], abs=1e-18)

    def test_brownian_terminal_rate_is_boundary_outflux(self):
        model = brownian_interval(0.0, 8.0)
        grid = build_grid(model, 200)
        density = point_density(grid, 0, 1.0, 0.2)
        dt = stable_dt(grid, 0.9)
        state = evolve(model, grid, density, dt, 200)
        current = probability_current(model, grid, state)
        _, rates, _ = transfer_flux(model, grid, current)
        out0 = current.outflux_raw(grid, 0, 0, 0)
        assert rates["hit"] == pytest.approx(float(out0[0]), abs=1e-18)

    def test_negative_outflux_detected(self):
        model = brownian_interval(0.0, 1.0)
        grid = build_grid(model, 20)
        # an adversarial density with a negative cell next to the boundary
        arr = np.full(20, 0.1)
        arr[0] = -0.5
        density = DensityState([arr], {"hit": 0.0, "escaped": 0.0}, 0.0)
        current = probability_current(model, grid, density)
        with pytest.raises(NegativeOutflux):
            transfer_flux(model, grid, current)


class TestEvolve:
    def test_zero_steps_identity(self):
        model = brownian_interval()
        grid = build_grid(model, 100)
        density = point_density(grid, 0, 1.0, 0.1)
        out = evolve(model, grid, density, stable_dt(grid, 0.5), 0)
        assert np.array_equal(out.p[0], density.p[0])
        assert out.t == density.t

    def test_stability_violation_raises(self):
        model = brownian_interval()
        grid = build_grid(model, 100)
        density = point_density(grid, 0, 1.0, 0.1)
        with pytest.raises(StabilityViolation):
            evolve(model, grid, density, 10.0 * stable_dt(grid), 1)

    def test_negative_density_detected_on_under_resolved_advection(self):
        # with cell face Peclet above 2 the centered advective flux loses
        # positivity near the image-face walls; the solver refuses rather
        # than returning an oscillating density
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.04))
        state = point_density(grid, 0, 20.0, 0.3)
        dt = stable_dt(grid, 0.9)
        with pytest.raises(NegativeDensity):
            evolve(model, grid, state, dt, 2000)

    def test_mass_conserved_every_step(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.01))
        state = point_density(grid, 0, 20.0, 0.3)
        dt = stable_dt(grid, 0.9)
        worst = 0.0
        for _ in range(50):
            state = evolve(model, grid, state, dt, 20)
            worst = max(worst, abs(total_mass(grid, state) - 1.0))
        assert worst < 1e-10

    def test_per_step_mass_drift_tiny(self):
        model = brownian_interval()
        grid = build_grid(model, 200)
        state = point_density(grid, 0, 1.0, 0.2)
        dt = stable_dt(grid, 0.9)
        state = evolve(model, grid, state, dt, 100)
        m0 = total_mass(grid, state)
        state = evolve(model, grid, state, dt, 1)
        m1 = total_mass(grid, state)
        assert abs(m1 - m0) < 1e-12

    def test_positivity_at_half_stability_bound(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.01))
        state = point_density(grid, 0, 20.0, 0.3)
        dt = stable_dt(grid, 0.5)
        state = evolve(model, grid, state, dt, 2000)
        max_p = max(float(np.max(p)) for p in state.p)
        for p in state.p:
            assert float(np.min(p)) >= -1e-12 * max_p

    def test_flux_form_matches_direct_stencil_interior(self):
        # flux-form rate vs a direct second-order stencil of the adjoint
        # operator -d(bp)/dx + 1/2 d2(ap)/dx2 on a smooth density
        kappa, sigma = 0.8, 0.9
        model = ou_interval(kappa, sigma, half_width=5.0)
        grid = build_grid(model, 250)
        mg = grid.mode_grids[0]
        xs = mg.centers(0)
        dx = mg.dx[0]
        p = np.exp(-0.5 * (xs - 0.4) ** 2 / 0.6)
        p /= np.sum(p) * dx
        density = DensityState([p.copy()], {"escaped": 0.0}, 0.0)
        rates = adjoint_apply(model, grid, density)
        bp = -kappa * xs * p
        ap = sigma**2 * p
        direct = np.empty_like(p)
        direct[1:-1] = -(bp[2:] - bp[:-2]) / (2 * dx) + 0.5 * (
            ap[2:] - 2 * ap[1:-1] + ap[:-2]
        ) / dx**2
        interior = slice(3, -3)
        scale = np.max(np.abs(direct[interior]))
        assert np.max(np.abs(rates[0][interior] - direct[interior])) < 2e-3 * scale


class TestStationaryAndCoarsen:
    def test_direct_stationary_profile_is_a_fixed_point(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.01))
        state = stationary_density(model, grid)
        assert total_mass(grid, state) == pytest.approx(1.0, abs=1e-10)
        # both switching faces carry flux in the stationary cycle
        current = probability_current(model, grid, state)
        for tab in grid.surface_tables:
            out = current.outflux_raw(grid, tab.source_mode, tab.src_axis, tab.src_side)
            assert float(out[0]) > 1e-2
        # evolving from the stationary profile barely moves it
        dt = stable_dt(grid, 0.9)
        evolved = evolve(model, grid, state.copy(), dt, 400)
        drift = sum(
            float(np.sum(np.abs(evolved.p[i] - state.p[i]))) * grid.mode_grids[i].cell_volume
            for i in range(2)
        )
        assert drift < 1e-8

    def test_run_to_stationarity_terminates_on_draining_density(self):
        model = brownian_interval(0.0, 2.0)
        grid = build_grid(model, 100)
        density = point_density(grid, 0, 1.0, 0.2)
        dt = stable_dt(grid, 0.9)
        state, info = run_to_stationarity(
            model, grid, density, dt, l1_tol=1e-6, check_every=500, max_steps=100000
        )
        assert info["converged"]
        assert info["l1_change"] < 1e-6
        # nearly everything was absorbed at the ends by the time the
        # per-step change dropped below tolerance
        assert state.q["hit"] + state.q["escaped"] > 0.99

    def test_coarsen_preserves_mass(self):
        model = thermostat_1d()
        grid = build_grid(model, thermostat_resolution(0.01))
        density = point_density(grid, 0, 20.0, 0.3)
        coarse_grid, coarse = coarsen(model, grid, density, 4)
        assert coarse_grid.mode_grids[0].shape == (82,)
        assert total_mass(coarse_grid, coarse) == pytest.approx(
            total_mass(grid, density), abs=1e-12
        )

    def test_project_density_normalises(self):
        model = brownian_interval(0.0, 1.0)
        grid = build_grid(model, 64)
        density = project_density(grid, [lambda pts: np.exp(-pts[..., 0])])
        assert total_mass(grid, density) == pytest.approx(1.0, abs=1e-12)


class Test2DTransfer:
    def build_two_box_model(self):
        """Left box feeds its right face into a line inside the right box."""
        diff = (constant_field([0.6, 0.0]), constant_field([0.0, 0.6]))
        drift_left = constant_field([0.4, 0.0])     # pushes mass toward the shared face
        drift_right = constant_field([0.4, 0.0])    # continues rightward past H
        mode_a = Mode(box_domain([0.0, 0.0], [1.0, 1.0]), VectorFieldSet(drift_left, diff))
        mode_b = Mode(box_domain([1.5, 0.0], [3.5, 1.0]), VectorFieldSet(drift_right, diff))
        shift = AffineMap(np.eye(2), [1.0, 0.0])    # x=1 face -> line x=2 inside mode b
        edges = [
            ResetEdge(0, 1, SurfaceTarget(1, shift)),
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 2, TerminalTarget("out")),
            ResetEdge(0, 3, TerminalTarget("out")),
            ResetEdge(1, 0, TerminalTarget("out")),
            ResetEdge(1, 1, TerminalTarget("out")),
            ResetEdge(1, 2, TerminalTarget("out")),
            ResetEdge(1, 3, TerminalTarget("out")),
        ]
        return build_model(ModelSpec(2, [mode_a, mode_b], edges, terminal_states=["out"]))

    def test_grid_pairs_faces_one_to_one(self):
        model = self.build_two_box_model()
        grid = build_grid(model, [(20, 20), (40, 20)])
        tab = grid.surface_tables[0]
        assert tab.h_axis == 0
        assert tab.h_face_index == 10     # x = 2.0 on mode b's grid
        assert tab.src_tangential.size == 20
        assert np.array_equal(np.sort(tab.tgt_tangential), np.arange(20))
        assert np.all(tab.inject_k_index == 10)   # drift points rightward

    def test_mass_conserved_through_2d_transfer(self):
        model = self.build_two_box_model()
        grid = build_grid(model, [(20, 20), (40, 20)])
        mga = grid.mode_grids[0]
        pts = mga.cell_center_points()
        blob = np.exp(
            -((pts[..., 0] - 0.6) ** 2 + (pts[..., 1] - 0.5) ** 2) / (2 * 0.15**2)
        )
        arrays = [blob, np.zeros(grid.mode_grids[1].shape)]
        mass = float(np.sum(blob)) * mga.cell_volume
        density = DensityState([arrays[0] / mass, arrays[1]], {"out": 0.0}, 0.0)
        dt = stable_dt(grid, 0.9)
        state = evolve(model, grid, density, dt, 400)
        assert abs(total_mass(grid, state) - 1.0) < 1e-10
        # mass actually crossed into the second mode
        assert float(np.sum(state.p[1])) * grid.mode_grids[1].cell_volume > 1e-3
