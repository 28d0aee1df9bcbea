import numpy as np
import pytest

from resetsde.model import (
    AffineField,
    AffineMap,
    GeometryError,
    MixedFace,
    Mode,
    ModelSpec,
    NotSurfaceTarget,
    NumericalField,
    OverlappingSources,
    PolyDomain,
    ResetEdge,
    SurfaceTarget,
    TargetOnBoundary,
    TerminalTarget,
    UnassignedFace,
    VectorFieldSet,
    box_domain,
    build_model,
    classify_boundary,
    constant_field,
    finite_difference_jacobian,
    interval_domain,
    ito_coefficients,
    jacobian_factor,
    zero_field,
)


def two_mode_1d_model(sigma=0.3):
    """Two half-line-style modes coupled by identity resets (thermostat shape)."""
    drift0 = AffineField([[-1.0]], [15.0])   # pulls down toward 15
    drift1 = AffineField([[-1.0]], [25.0])   # pulls up toward 25
    diff = constant_field([sigma])
    mode0 = Mode(interval_domain(19.0, 23.0), VectorFieldSet(drift0, (diff,)))
    mode1 = Mode(interval_domain(17.0, 21.0), VectorFieldSet(drift1, (diff,)))
    edges = [
        ResetEdge(0, 0, SurfaceTarget(1, AffineMap.identity(1))),   # hits 19 -> mode 1
        ResetEdge(1, 1, SurfaceTarget(0, AffineMap.identity(1))),   # hits 21 -> mode 0
        ResetEdge(0, 1, TerminalTarget("truncated")),
        ResetEdge(1, 0, TerminalTarget("truncated")),
    ]
    spec = ModelSpec(1, [mode0, mode1], edges, terminal_states=["truncated"])
    return build_model(spec)


def first_exit_1d_model():
    mode = Mode(
        interval_domain(0.0, 1.0),
        VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
    )
    edges = [
        ResetEdge(0, 0, TerminalTarget("left")),
        ResetEdge(0, 1, TerminalTarget("right")),
    ]
    return build_model(ModelSpec(1, [mode], edges, terminal_states=["left", "right"]))


class TestBuildModel:
    def test_two_mode_reset_model_builds(self):
        model = two_mode_1d_model()
        assert len(model.modes) == 2
        surface = [e for e in model.reset_edges if isinstance(e.target, SurfaceTarget)]
        assert len(surface) == 2

    def test_pure_first_exit_model_builds(self):
        model = first_exit_1d_model()
        assert model.terminal_states == ("left", "right")
        assert all(isinstance(e.target, TerminalTarget) for e in model.reset_edges)

    def test_image_outside_target_closure_rejected(self):
        mode0 = Mode(
            interval_domain(0.0, 1.0),
            VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
        )
        mode1 = Mode(
            interval_domain(2.0, 3.0),
            VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
        )
        # face at 0 maps to 5.0, outside mode 1's closure [2, 3]
        edges = [
            ResetEdge(0, 0, SurfaceTarget(1, AffineMap([[1.0]], [5.0]))),
            ResetEdge(0, 1, TerminalTarget("out")),
            ResetEdge(1, 0, TerminalTarget("out")),
            ResetEdge(1, 1, TerminalTarget("out")),
        ]
        with pytest.raises(TargetOnBoundary):
            build_model(ModelSpec(1, [mode0, mode1], edges, terminal_states=["out"]))

    def test_image_on_target_boundary_rejected(self):
        mode0 = Mode(
            interval_domain(0.0, 1.0),
            VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
        )
        mode1 = Mode(
            interval_domain(2.0, 3.0),
            VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
        )
        # face at 0 maps exactly onto mode 1's boundary point 2.0
        edges = [
            ResetEdge(0, 0, SurfaceTarget(1, AffineMap([[1.0]], [2.0]))),
            ResetEdge(0, 1, TerminalTarget("out")),
            ResetEdge(1, 0, TerminalTarget("out")),
            ResetEdge(1, 1, TerminalTarget("out")),
        ]
        with pytest.raises(TargetOnBoundary):
            build_model(ModelSpec(1, [mode0, mode1], edges, terminal_states=["out"]))

    def test_unassigned_face_rejected(self):
        mode = Mode(
            interval_domain(0.0, 1.0),
            VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
        )
        edges = [ResetEdge(0, 0, TerminalTarget("left"))]
        with pytest.raises(UnassignedFace):
            build_model(ModelSpec(1, [mode], edges, terminal_states=["left"]))

    def test_overlapping_sources_rejected(self):
        mode = Mode(
            interval_domain(0.0, 1.0),
            VectorFieldSet(zero_field(1), (constant_field([1.0]),)),
        )
        edges = [
            ResetEdge(0, 0, TerminalTarget("left")),
            ResetEdge(0, 0, TerminalTarget("right")),
            ResetEdge(0, 1, TerminalTarget("right")),
        ]
        with pytest.raises(OverlappingSources):
            build_model(ModelSpec(1, [mode], edges, terminal_states=["left", "right"]))

    def test_characteristic_declaration_covers_face(self):
        drift = constant_field([0.0, -1.0])
        diff_x = constant_field([1.0, 0.0])   # tangent to the horizontal faces
        mode = Mode(
            box_domain([0.0, 0.0], [1.0, 1.0]),
            VectorFieldSet(drift, (diff_x, zero_field(2))),
        )
        edges = [
            ResetEdge(0, 0, TerminalTarget("side")),
            ResetEdge(0, 1, TerminalTarget("side")),
        ]
        model = build_model(
            ModelSpec(
                2,
                [mode],
                edges,
                terminal_states=["side"],
                characteristic_faces=[(0, 2), (0, 3)],
            )
        )
        assert model.is_characteristic(0, 2)
        assert classify_boundary(model, 0, 2) == "characteristic"
        assert classify_boundary(model, 0, 0) == "non_characteristic"

    def test_build_is_deterministic(self):
        m1 = two_mode_1d_model()
        m2 = two_mode_1d_model()
        for e1, e2 in zip(m1.reset_edges, m2.reset_edges):
            assert np.array_equal(e1.source_normal, e2.source_normal)
            assert e1.jacobian_value == e2.jacobian_value
        assert m1.face_edges == m2.face_edges


class TestItoCoefficients:
    def test_constant_fields_have_no_correction(self):
        model = two_mode_1d_model(sigma=0.3)
        pts = np.array([[19.5], [20.0], [22.0]])
        b, a = ito_coefficients(model, 0, pts)
        assert np.allclose(b, -(pts - 15.0))
        assert np.allclose(a, 0.09)

    def test_linear_diffusion_correction(self):
        # d=1, A0 = 0, A1(x) = x: b(x) = x/2, a(x) = x^2.
        mode = Mode(
            interval_domain(0.5, 4.0),
            VectorFieldSet(zero_field(1), (AffineField([[1.0]], [0.0]),)),
        )
        edges = [
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
        ]
        model = build_model(ModelSpec(1, [mode], edges, terminal_states=["out"]))
        pts = np.array([[1.0], [2.0], [3.0]])
        b, a = ito_coefficients(model, 0, pts)
        assert np.allclose(b, pts / 2.0)
        assert np.allclose(a[..., 0, 0], pts[:, 0] ** 2)
        # independent oracle: the finite-difference Jacobian of A1 is 1
        fd = finite_difference_jacobian(lambda x: x, pts)
        assert np.allclose(fd, 1.0, atol=1e-9)

    def test_matches_finite_difference_drift_to_second_order(self):
        # nonlinear field with analytic Jacobian; the FD fallback must agree
        def fn(x):
            return np.stack([np.sin(x[..., 0]) * x[..., 1], x[..., 0] ** 2], axis=-1)

        def jac(x):
            j = np.zeros(x.shape[:-1] + (2, 2))
            j[..., 0, 0] = np.cos(x[..., 0]) * x[..., 1]
            j[..., 0, 1] = np.sin(x[..., 0])
            j[..., 1, 0] = 2 * x[..., 0]
            return j

        analytic = NumericalField(fn, jacobian=jac)
        numeric = NumericalField(fn)
        pts = np.array([[0.3, 0.7], [1.1, -0.2]])
        assert np.allclose(analytic.jacobian(pts), numeric.jacobian(pts), atol=1e-8)

    def test_inconsistent_jacobian_rejected_at_build(self):
        wrong = NumericalField(lambda x: x**2, jacobian=lambda x: np.ones(x.shape + (1,)))
        mode = Mode(interval_domain(0.5, 3.0), VectorFieldSet(zero_field(1), (wrong,)))
        edges = [
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
        ]
        with pytest.raises(GeometryError, match="Jacobian"):
            build_model(ModelSpec(1, [mode], edges, terminal_states=["out"]))

    def test_diffusion_matrix_is_symmetric_psd(self):
        model = two_mode_1d_model()
        rng = np.random.default_rng(7)
        pts = rng.uniform(19.0, 23.0, size=(40, 1))
        _, a = ito_coefficients(model, 0, pts)
        assert np.allclose(a, np.swapaxes(a, -1, -2))
        eigs = np.linalg.eigvalsh(a)
        assert np.all(eigs >= -1e-12)


def quadrature_jacobian_oracle(domain, face, amap, n=20000):
    """Estimate h from the change-of-variable identity by midpoint quadrature.

    Partitions the source face patch, pushes midpoints through the map, and
    compares the surface measures of image and source.
    """
    center = domain.face_center(face)
    tangent = domain.tangent_basis(face)[:, 0]
    half = 0.2 * domain.diameter()
    ts = np.linspace(-half, half, n + 1)
    mids = center + 0.5 * (ts[:-1] + ts[1:])[:, None] * tangent
    seg = (ts[1] - ts[0])
    images = amap(mids)
    image_len = np.sum(np.linalg.norm(np.diff(amap(center + ts[:, None] * tangent), axis=0), axis=1))
    source_len = seg * n
    del mids, images
    return image_len / source_len


class TestJacobianFactor:
    def test_one_dimensional_h_is_one(self):
        model = two_mode_1d_model()
        edge = model.reset_edges[0]
        assert jacobian_factor(edge, np.array([19.0])) == 1.0

    def test_translation_between_parallel_segments(self):
        mode_a = Mode(
            box_domain([0.0, 0.0], [1.0, 1.0]),
            VectorFieldSet(zero_field(2), (constant_field([1.0, 0.0]), constant_field([0.0, 1.0]))),
        )
        mode_b = Mode(
            box_domain([0.0, 2.0], [1.0, 3.0]),
            VectorFieldSet(zero_field(2), (constant_field([1.0, 0.0]), constant_field([0.0, 1.0]))),
        )
        shift = AffineMap(np.eye(2), [0.0, 2.5])  # bottom face y=0 -> line y=2.5
        edges = [
            ResetEdge(0, 2, SurfaceTarget(1, shift)),
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
            ResetEdge(0, 3, TerminalTarget("out")),
            ResetEdge(1, 0, TerminalTarget("out")),
            ResetEdge(1, 1, TerminalTarget("out")),
            ResetEdge(1, 2, TerminalTarget("out")),
            ResetEdge(1, 3, TerminalTarget("out")),
        ]
        model = build_model(ModelSpec(2, [mode_a, mode_b], edges, terminal_states=["out"]))
        edge = model.reset_edges[0]
        assert jacobian_factor(edge, np.array([0.5, 0.0])) == pytest.approx(1.0, abs=1e-12)

    def test_scaling_map_h_equals_scale(self):
        c = 1.7
        mode_a = Mode(
            box_domain([0.0, 0.0], [1.0, 1.0]),
            VectorFieldSet(zero_field(2), (constant_field([1.0, 0.0]), constant_field([0.0, 1.0]))),
        )
        mode_b = Mode(
            box_domain([-1.0, -1.0], [4.0, 4.0]),
            VectorFieldSet(zero_field(2), (constant_field([1.0, 0.0]), constant_field([0.0, 1.0]))),
        )
        scale = AffineMap(c * np.eye(2), [0.0, 1.0])  # y=0 face -> segment on y=1
        edges = [
            ResetEdge(0, 2, SurfaceTarget(1, scale)),
            ResetEdge(0, 0, TerminalTarget("out")),
            ResetEdge(0, 1, TerminalTarget("out")),
            ResetEdge(0, 3, TerminalTarget("out")),
            ResetEdge(1, 0, TerminalTarget("out")),
            ResetEdge(1, 1, TerminalTarget("out")),
            ResetEdge(1, 2, TerminalTarget("out")),
            ResetEdge(1, 3, TerminalTarget("out")),
        ]
        model = build_model(ModelSpec(2, [mode_a, mode_b], edges, terminal_states=["out"]))
        edge = model.reset_edges[0]
        h = jacobian_factor(edge, np.array([0.5, 0.0]))
        assert h == pytest.approx(c, abs=1e-12)
        # independent oracle: measure scaling from a quadrature of the identity
        oracle = quadrature_jacobian_oracle(mode_a.domain, 2, scale)
        assert h == pytest.approx(oracle, abs=1e-6)

    def test_terminal_edge_has_no_factor(self):
        model = first_exit_1d_model()
        with pytest.raises(NotSurfaceTarget):
            jacobian_factor(model.reset_edges[0], np.array([0.0]))


class TestClassifyBoundary:
    def test_full_rank_diffusion_everywhere_non_characteristic(self):
        model = two_mode_1d_model()
        for q in range(2):
            for f in range(model.modes[q].domain.n_faces):
                assert classify_boundary(model, q, f) == "non_characteristic"

    def test_tangential_fields_are_characteristic(self):
        drift = constant_field([0.0, -1.0])
        diff_x = constant_field([1.0, 0.0])
        mode = Mode(
            box_domain([0.0, 0.0], [1.0, 1.0]),
            VectorFieldSet(drift, (diff_x, zero_field(2))),
        )
        edges = [ResetEdge(0, f, TerminalTarget("out")) for f in range(4)]
        model = build_model(ModelSpec(2, [mode], edges, terminal_states=["out"]))
        assert classify_boundary(model, 0, 2) == "characteristic"   # y faces: A tangent
        assert classify_boundary(model, 0, 0) == "non_characteristic"

    def test_mixed_face_raises(self):
        # A1 = (y, 0): tangent to the left face only at y = 0 ... actually
        # use A1 = (y - 0.5, 0) so the normal component changes through zero
        # along the left face; sampling must flag the mix.
        a1 = AffineField([[0.0, 1.0], [0.0, 0.0]], [-0.5, 0.0])
        mode = Mode(
            box_domain([0.0, 0.0], [1.0, 1.0]),
            VectorFieldSet(zero_field(2), (a1, zero_field(2))),
        )
        edges = [ResetEdge(0, f, TerminalTarget("out")) for f in range(4)]
        model = build_model(ModelSpec(2, [mode], edges, terminal_states=["out"]))
        with pytest.raises(MixedFace):
            classify_boundary(model, 0, 0)

    def test_invariant_under_common_rescaling(self):
        sigma_small = two_mode_1d_model(sigma=1e-3)
        sigma_large = two_mode_1d_model(sigma=1e3)
        for q in range(2):
            for f in range(2):
                assert classify_boundary(sigma_small, q, f) == classify_boundary(sigma_large, q, f)


class TestPolyDomain:
    def test_normals_are_normalised(self):
        dom = PolyDomain([[3.0, 4.0]], [5.0], interior_point=[0.0, 0.0])
        assert np.allclose(np.linalg.norm(dom.normals, axis=1), 1.0)
        assert dom.offsets[0] == pytest.approx(1.0)

    def test_interior_point_must_be_strict(self):
        with pytest.raises(GeometryError):
            PolyDomain([[1.0]], [0.0], interior_point=[0.0])

    def test_gaps_sign_convention(self):
        dom = interval_domain(0.0, 1.0)
        inside = dom.gaps(np.array([0.5]))
        assert np.all(inside < 0)
        outside = dom.gaps(np.array([1.5]))
        assert np.any(outside > 0)
