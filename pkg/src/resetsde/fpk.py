"""Conservative finite-volume solver for the forward equations of a reset model.

The density evolves in flux form: per cell, dp/dt is the negative divergence
of the probability current J = p A0 - 1/2 sum_r div(p A_r) A_r, assembled
from face-normal flux values.  Reset-image faces inside a mode act as walls
for this operator (the current is discontinuous there and both one-sided
values are kept for diagnostics); the mass that leaves through a source
boundary face re-enters as a point source in the cell next to its image
face, so total mass is conserved structurally rather than asymptotically.
Terminal states accumulate the outflux of their boundary faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from resetsde.model import (
    HybridModel,
    SurfaceTarget,
    TerminalTarget,
    classify_boundary,
    ito_coefficients,
)

_ALIGN_REL_TOL = 1e-9
_NEG_DENSITY_REL_TOL = 1e-12
_NEG_OUTFLUX_REL_TOL = 1e-6
_STABILITY_SAFETY = 0.45


class SolverError(ValueError):
    """Base class for grid construction and evolution errors."""


class MisalignedH(SolverError):
    """A reset-image hypersurface does not coincide with grid faces."""


class UnsupportedDimension(SolverError):
    """The PDE grid supports d in {1, 2} only."""


class UnsupportedDomain(SolverError):
    """Mode domains must be axis-aligned boxes for the PDE grid."""


class CharacteristicFacePresent(SolverError):
    """The solver refuses models with characteristic boundary faces."""


class AmbiguousInflowSide(SolverError):
    """Neither drift nor the mapped source normal orients the injection."""


class StabilityViolation(SolverError):
    """The requested dt exceeds the explicit stability bound."""


class NegativeDensity(SolverError):
    """A cell density undershot beyond the tolerated rounding band."""


class NegativeOutflux(SolverError):
    """Boundary outflux is negative beyond tolerance (boundary condition broken)."""


# ---------------------------------------------------------------------------
# grid layout


@dataclass(frozen=True)
class ModeGrid:
    lo: np.ndarray
    hi: np.ndarray
    shape: tuple[int, ...]
    dx: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.dx))

    def face_area(self, axis: int) -> float:
        # 1D boundaries carry the counting measure, area 1.
        return float(np.prod(np.delete(self.dx, axis))) if self.dimension > 1 else 1.0

    def centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.lo[axis] + (np.arange(n) + 0.5) * self.dx[axis]

    def faces(self, axis: int) -> np.ndarray:
        return self.lo[axis] + np.arange(self.shape[axis] + 1) * self.dx[axis]

    def cell_center_points(self) -> np.ndarray:
        """All cell centers, shape self.shape + (d,)."""
        axes = [self.centers(k) for k in range(self.dimension)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)


@dataclass(frozen=True)
class TransferTable:
    """Precomputed face correspondence of one surface-target edge."""

    edge_index: int
    source_mode: int
    src_axis: int
    src_side: int                      # 0 = lo, 1 = hi
    target_mode: int
    h_axis: int
    h_face_index: int                  # grid face index along h_axis
    src_tangential: np.ndarray | None  # (m,) source cell indices along the face, None in 1D
    tgt_tangential: np.ndarray | None  # (m,) paired target cell indices, None in 1D
    inject_k_index: np.ndarray         # (m,) cell index along h_axis receiving the source
    h: float
    source_area: float
    target_area: float


@dataclass(frozen=True)
class TerminalTable:
    edge_index: int
    source_mode: int
    src_axis: int
    src_side: int
    terminal: str


@dataclass
class GridLayout:
    """Per-mode uniform grids plus boundary and reset correspondence tables."""

    model: HybridModel
    mode_grids: tuple[ModeGrid, ...]
    face_map: dict            # (mode, model_face) -> (axis, side)
    surface_tables: tuple[TransferTable, ...]
    terminal_tables: tuple[TerminalTable, ...]
    _caches: dict = field(default_factory=dict, repr=False)

    @property
    def dimension(self) -> int:
        return self.model.dimension

    def h_faces(self, mode: int, axis: int):
        """[(face_index, tangential_indices), ...] of reset-image faces."""
        out = []
        for tab in self.surface_tables:
            if tab.target_mode == mode and tab.h_axis == axis:
                out.append((tab.h_face_index, tab.tgt_tangential))
        return out

    def stencil_cache(self, mode: int) -> dict:
        if mode not in self._caches:
            self._caches[mode] = _build_stencil_cache(self.model, self.mode_grids[mode], mode)
        return self._caches[mode]

    def stability_bound(self) -> float:
        if "stability" not in self._caches:
            self._caches["stability"] = _stability_bound(self.model, self)
        return self._caches["stability"]


def build_grid(model: HybridModel, resolution) -> GridLayout:
    """Build per-mode grids and tabulate the reset face correspondences.

    `resolution` is the cell count per axis: an int applied everywhere, or a
    sequence with one entry (int or per-axis tuple) per mode.
    """
    d = model.dimension
    if d not in (1, 2):
        raise UnsupportedDimension(f"PDE grids support d in {{1, 2}}, got {d}")

    for q in range(len(model.modes)):
        for f in range(model.modes[q].domain.n_faces):
            if model.is_characteristic(q, f) or classify_boundary(model, q, f) == "characteristic":
                raise CharacteristicFacePresent(
                    f"face ({q}, {f}) is characteristic; the solver has no boundary "
                    "condition there"
                )

    resolutions = _normalize_resolution(resolution, len(model.modes), d)
    mode_grids = []
    face_map = {}
    for q, mode in enumerate(model.modes):
        grid, fmap = _mode_grid(mode, q, resolutions[q])
        mode_grids.append(grid)
        face_map.update(fmap)

    surface_tables = []
    terminal_tables = []
    for edge in model.reset_edges:
        if edge.patch is not None:
            raise UnsupportedDomain(
                f"edge {edge.index}: sub-patch sources are not supported on the PDE grid"
            )
        axis, side = face_map[(edge.source_mode, edge.source_face)]
        if isinstance(edge.target, TerminalTarget):
            terminal_tables.append(
                TerminalTable(edge.index, edge.source_mode, axis, side, edge.target.terminal)
            )
        else:
            surface_tables.append(
                _transfer_table(model, mode_grids, edge, axis, side)
            )

    return GridLayout(
        model=model,
        mode_grids=tuple(mode_grids),
        face_map=face_map,
        surface_tables=tuple(surface_tables),
        terminal_tables=tuple(terminal_tables),
    )


def _normalize_resolution(resolution, n_modes, d):
    if isinstance(resolution, (int, np.integer)):
        return [(int(resolution),) * d] * n_modes
    entries = list(resolution)
    if len(entries) != n_modes:
        raise SolverError(f"resolution must have one entry per mode ({n_modes})")
    out = []
    for entry in entries:
        if isinstance(entry, (int, np.integer)):
            out.append((int(entry),) * d)
        else:
            tup = tuple(int(v) for v in entry)
            if len(tup) != d:
                raise SolverError("per-axis resolution does not match the dimension")
            out.append(tup)
    return out


def _mode_grid(mode, q, cells):
    domain = mode.domain
    if domain.box is None:
        raise UnsupportedDomain(f"mode {q} has no bounding box")
    lo, hi = domain.box
    d = lo.size
    if any(n < 4 for n in cells):
        raise SolverError(f"mode {q} needs at least 4 cells per axis")
    dx = (hi - lo) / np.asarray(cells, dtype=float)

    # Every polytope face must coincide with a box side: the grid covers the
    # whole domain and boundary faces are axis-parallel.
    fmap = {}
    tol = _ALIGN_REL_TOL * domain.scale()
    for f in range(domain.n_faces):
        nrm = domain.normals[f]
        axis = int(np.argmax(np.abs(nrm)))
        unit = np.zeros(d)
        unit[axis] = np.sign(nrm[axis])
        if np.max(np.abs(nrm - unit)) > _ALIGN_REL_TOL:
            raise UnsupportedDomain(f"mode {q} face {f} is not axis-parallel")
        coord = domain.offsets[f] * nrm[axis]
        bound = lo[axis] if nrm[axis] < 0 else hi[axis]
        if abs(coord - bound) > tol:
            raise UnsupportedDomain(
                f"mode {q} face {f} does not coincide with the bounding box"
            )
        fmap[(q, f)] = (axis, 0 if nrm[axis] < 0 else 1)
    if len({v for v in fmap.values()}) != 2 * d:
        raise UnsupportedDomain(f"mode {q} does not cover all {2 * d} box sides")
    return ModeGrid(lo=lo.copy(), hi=hi.copy(), shape=tuple(cells), dx=dx), fmap


def _face_index_of(coord, lo, dx, n, what):
    u = (coord - lo) / dx
    j = int(round(u))
    if abs(u - j) > _ALIGN_REL_TOL * max(1.0, abs(u)) * 10.0:
        raise MisalignedH(
            f"{what} at coordinate {coord} does not fall on a cell face "
            f"(offset {u - j:.3e} faces)"
        )
    if not (0 <= j <= n):
        raise MisalignedH(f"{what} lies outside the target grid")
    return j


def _transfer_table(model, mode_grids, edge, axis, side):
    d = model.dimension
    tgt_mode = edge.target.mode
    amap = edge.target.map
    src_grid = mode_grids[edge.source_mode]
    tgt_grid = mode_grids[tgt_mode]
    src_coord = src_grid.lo[axis] if side == 0 else src_grid.hi[axis]

    if d == 1:
        image = amap(np.array([src_coord]))
        h_axis = 0
        c_h = float(image[0])
        src_tang = None
        tgt_tang = None
    else:
        tang_axis = 1 - axis
        p0 = np.zeros(2)
        p0[axis] = src_coord
        p0[tang_axis] = src_grid.lo[tang_axis]
        p1 = p0.copy()
        p1[tang_axis] = src_grid.hi[tang_axis]
        i0, i1 = amap(p0), amap(p1)
        delta = i1 - i0
        # The image line must be axis-parallel: one coordinate stays constant.
        if abs(delta[0]) <= _ALIGN_REL_TOL * max(1.0, np.max(np.abs(delta))):
            h_axis = 0
        elif abs(delta[1]) <= _ALIGN_REL_TOL * max(1.0, np.max(np.abs(delta))):
            h_axis = 1
        else:
            raise MisalignedH(
                f"edge {edge.index}: image hypersurface is not axis-parallel"
            )
        c_h = float(i0[h_axis])
        tang_tgt_axis = 1 - h_axis
        # Pair each source boundary face with the target face its image covers.
        n_src = src_grid.shape[tang_axis]
        src_faces = src_grid.lo[tang_axis] + np.arange(n_src + 1) * src_grid.dx[tang_axis]
        pts = np.zeros((n_src + 1, 2))
        pts[:, axis] = src_coord
        pts[:, tang_axis] = src_faces
        img = amap(pts)[:, tang_tgt_axis]
        jt = np.array(
            [
                _face_index_of(
                    v,
                    tgt_grid.lo[tang_tgt_axis],
                    tgt_grid.dx[tang_tgt_axis],
                    tgt_grid.shape[tang_tgt_axis],
                    f"edge {edge.index} image endpoint",
                )
                for v in img
            ]
        )
        steps = np.diff(jt)
        if not (np.all(steps == 1) or np.all(steps == -1)):
            raise MisalignedH(
                f"edge {edge.index}: source and target resolutions are not "
                "face-bijective under the reset map"
            )
        src_tang = np.arange(n_src)
        tgt_tang = np.minimum(jt[:-1], jt[1:])

    n_h = tgt_grid.shape[h_axis]
    j_h = _face_index_of(
        c_h, tgt_grid.lo[h_axis], tgt_grid.dx[h_axis], n_h, f"edge {edge.index} image"
    )
    if j_h < 2 or j_h > n_h - 2:
        raise MisalignedH(
            f"edge {edge.index}: image face {j_h} is too close to the target "
            "boundary for one-sided stencils at this resolution"
        )

    src_area = src_grid.face_area(axis)
    tgt_area = tgt_grid.face_area(h_axis)
    h = edge.jacobian_value
    if abs(src_area * h - tgt_area) > 1e-9 * max(tgt_area, 1e-300):
        raise MisalignedH(
            f"edge {edge.index}: face areas are inconsistent with the Jacobian "
            f"factor (source {src_area} * h {h} != target {tgt_area})"
        )

    inject = _injection_side(model, tgt_grid, tgt_mode, edge, h_axis, j_h, tgt_tang)
    return TransferTable(
        edge_index=edge.index,
        source_mode=edge.source_mode,
        src_axis=axis,
        src_side=side,
        target_mode=tgt_mode,
        h_axis=h_axis,
        h_face_index=j_h,
        src_tangential=src_tang,
        tgt_tangential=tgt_tang,
        inject_k_index=inject,
        h=h,
        source_area=src_area,
        target_area=tgt_area,
    )


def _injection_side(model, tgt_grid, tgt_mode, edge, h_axis, j_h, tgt_tang):
    """Pick the cell receiving each face's source: the side mass flows into.

    The target-mode Ito drift at the face center decides; if it is tangential
    there, the image of the source outward normal under the reset map breaks
    the tie.
    """
    if tgt_tang is None:
        centers = np.array([[tgt_grid.lo[0] + j_h * tgt_grid.dx[0]]])
    else:
        face_coord = tgt_grid.lo[h_axis] + j_h * tgt_grid.dx[h_axis]
        tang_axis = 1 - h_axis
        tang_centers = tgt_grid.lo[tang_axis] + (tgt_tang + 0.5) * tgt_grid.dx[tang_axis]
        centers = np.zeros((tang_centers.size, 2))
        centers[:, h_axis] = face_coord
        centers[:, tang_axis] = tang_centers
    b, _ = ito_coefficients(model, tgt_mode, centers)
    normal_drift = b[:, h_axis]
    scale = max(float(np.max(np.abs(b))), 1e-300)
    sign = np.where(normal_drift > 1e-12 * scale, 1, np.where(normal_drift < -1e-12 * scale, -1, 0))
    if np.any(sign == 0):
        mapped = edge.target.map.matrix @ edge.source_normal
        fallback = mapped[h_axis]
        if abs(fallback) <= 1e-12 * max(1.0, float(np.max(np.abs(mapped)))):
            raise AmbiguousInflowSide(
                f"edge {edge.index}: neither the target drift nor the mapped "
                "source normal orients the injection side"
            )
        sign = np.where(sign == 0, 1 if fallback > 0 else -1, sign)
    return np.where(sign > 0, j_h, j_h - 1).astype(int)


# ---------------------------------------------------------------------------
# density state


@dataclass
class DensityState:
    """Cell-averaged mode densities, terminal masses, and the current time."""

    p: list
    q: dict
    t: float = 0.0

    def copy(self) -> "DensityState":
        return DensityState([arr.copy() for arr in self.p], dict(self.q), self.t)


def total_mass(grid: GridLayout, density: DensityState) -> float:
    """Sum of cell masses plus terminal masses, in fixed summation order."""
    total = 0.0
    for q_idx, arr in enumerate(density.p):
        total += float(np.sum(arr)) * grid.mode_grids[q_idx].cell_volume
    for name in grid.model.terminal_states:
        total += density.q.get(name, 0.0)
    return total


def project_density(grid: GridLayout, mode_fns: Sequence[Callable | None]) -> DensityState:
    """Cell-average the supplied mode densities and renormalise to mass one.

    Each entry is a callable over points of shape (..., d) (evaluated at cell
    centers, an O(dx^2) average) or an object with a `cell_average(mode_grid)`
    method for exact averages; None means an empty mode.
    """
    arrays = []
    for q_idx, fn in enumerate(mode_fns):
        mg = grid.mode_grids[q_idx]
        if fn is None:
            arrays.append(np.zeros(mg.shape))
            continue
        if hasattr(fn, "cell_average"):
            vals = fn.cell_average(mg)
        else:
            vals = np.asarray(fn(mg.cell_center_points()), dtype=float)
        if vals.shape != mg.shape:
            raise SolverError(f"initial density for mode {q_idx} has shape {vals.shape}")
        arrays.append(np.maximum(vals, 0.0))
    mass = sum(float(np.sum(a)) * grid.mode_grids[i].cell_volume for i, a in enumerate(arrays))
    if mass <= 0.0:
        raise SolverError("initial density has no mass")
    q0 = {name: 0.0 for name in grid.model.terminal_states}
    return DensityState([a / mass for a in arrays], q0, 0.0)


@dataclass
class GhostedDensity:
    """Mode densities padded by one ghost ring enforcing p = 0 on each face."""

    padded: list
    t: float

    def interior(self, mode: int) -> np.ndarray:
        arr = self.padded[mode]
        sl = tuple(slice(1, -1) for _ in range(arr.ndim))
        return arr[sl]


def apply_absorbing_bc(model: HybridModel, grid: GridLayout, density: DensityState) -> GhostedDensity:
    """Set ghost values so the face-interpolated boundary density is exactly 0."""
    if model.characteristic_faces:
        raise CharacteristicFacePresent(
            "model declares characteristic faces; the solver has no boundary "
            "condition there"
        )
    padded = []
    for q_idx, arr in enumerate(density.p):
        d = arr.ndim
        pad = np.zeros(tuple(n + 2 for n in arr.shape))
        sl = tuple(slice(1, -1) for _ in range(d))
        pad[sl] = arr
        for axis in range(d):
            lo_ghost = [slice(1, -1)] * d
            lo_ghost[axis] = 0
            lo_edge = [slice(1, -1)] * d
            lo_edge[axis] = 1
            pad[tuple(lo_ghost)] = -pad[tuple(lo_edge)]
            hi_ghost = [slice(1, -1)] * d
            hi_ghost[axis] = -1
            hi_edge = [slice(1, -1)] * d
            hi_edge[axis] = -2
            pad[tuple(hi_ghost)] = -pad[tuple(hi_edge)]
        padded.append(pad)
    return GhostedDensity(padded, density.t)


# ---------------------------------------------------------------------------
# probability current


@dataclass
class CurrentField:
    """Face-normal flux per mode and axis; reset-image faces store one-sided pairs.

    `flux[mode][axis]` holds J . e_axis at each face; entries on reset-image
    faces are zeroed (the flux-form operator exchanges nothing there) and the
    one-sided limits live in `h_sides[edge_index] = (J_side1, J_side2)`,
    ordered lower/upper cell side along the face axis.
    """

    flux: list
    h_sides: dict
    t: float

    def outflux_raw(self, grid: GridLayout, mode: int, axis: int, side: int) -> np.ndarray:
        arr = self.flux[mode][axis]
        idx = [slice(None)] * arr.ndim
        idx[axis] = 0 if side == 0 else -1
        values = arr[tuple(idx)]
        sgn = -1.0 if side == 0 else 1.0
        return sgn * np.atleast_1d(values)

    def max_abs_flux(self) -> float:
        best = 0.0
        for per_mode in self.flux:
            for arr in per_mode:
                if arr.size:
                    best = max(best, float(np.max(np.abs(arr))))
        for j1, j2 in self.h_sides.values():
            best = max(best, float(np.max(np.abs(j1))), float(np.max(np.abs(j2))))
        return best


def _build_stencil_cache(model, mg: ModeGrid, mode: int) -> dict:
    """Field samples at faces and cells, reused every step."""
    fields = model.modes[mode].fields
    d = mg.dimension
    cache = {"d": d}
    cell_pts = mg.cell_center_points()
    cache["A_cell"] = [np.asarray(a(cell_pts), dtype=float) for a in fields.diffusion]
    for axis in range(d):
        face_pts = _face_points(mg, axis)
        cache[("A0f", axis)] = np.asarray(fields.drift(face_pts), dtype=float)[..., axis]
        cache[("Af", axis)] = [
            np.asarray(a(face_pts), dtype=float)[..., axis] for a in fields.diffusion
        ]
    return cache


def _face_points(mg: ModeGrid, axis: int) -> np.ndarray:
    comps = []
    for k in range(mg.dimension):
        comps.append(mg.faces(k) if k == axis else mg.centers(k))
    mesh = np.meshgrid(*comps, indexing="ij")
    return np.stack(mesh, axis=-1)


def probability_current(model: HybridModel, grid: GridLayout, density) -> CurrentField:
    """Assemble J . nu on every cell face from the (ghosted) density.

    Interior faces use centered averages/differences; boundary faces use the
    absorbing ghost construction (face density exactly 0); reset-image faces
    get one-sided stencils on each side and a zero entry in the main arrays.
    """
    if isinstance(density, DensityState):
        density = apply_absorbing_bc(model, grid, density)
    flux = []
    for q_idx in range(len(model.modes)):
        mg = grid.mode_grids[q_idx]
        cache = grid.stencil_cache(q_idx)
        p = density.interior(q_idx)
        if mg.dimension == 1:
            flux.append([_current_1d(mg, cache, p)])
        else:
            flux.append([_current_2d(mg, cache, p, axis) for axis in range(2)])

    h_sides = {}
    for tab in grid.surface_tables:
        mg = grid.mode_grids[tab.target_mode]
        cache = grid.stencil_cache(tab.target_mode)
        p = density.interior(tab.target_mode)
        j1, j2 = _one_sided_h(mg, cache, p, tab)
        h_sides[tab.edge_index] = (j1, j2)
        arr = flux[tab.target_mode][tab.h_axis]
        if tab.tgt_tangential is None:
            arr[tab.h_face_index] = 0.0
        else:
            idx = [None, None]
            idx[tab.h_axis] = tab.h_face_index
            idx[1 - tab.h_axis] = tab.tgt_tangential
            arr[tuple(idx)] = 0.0
    return CurrentField(flux, h_sides, density.t)


def _current_1d(mg, cache, p):
    dx = mg.dx[0]
    pp = np.concatenate(([-p[0]], p, [-p[-1]]))
    pbar = 0.5 * (pp[1:] + pp[:-1])
    j = pbar * cache[("A0f", 0)]
    for a_cell, a_face in zip(cache["A_cell"], cache[("Af", 0)]):
        pc = p * a_cell[:, 0]
        pcp = np.concatenate(([-pc[0]], pc, [-pc[-1]]))
        j -= 0.5 * a_face * (pcp[1:] - pcp[:-1]) / dx
    return j


def _current_2d(mg, cache, p, axis):
    dxa = mg.dx[axis]
    dxt = mg.dx[1 - axis]

    def pad_neg(arr):
        return np.concatenate(
            [-arr.take([0], axis=axis), arr, -arr.take([-1], axis=axis)], axis=axis
        )

    pp = pad_neg(p)
    lo = [slice(None)] * 2
    hi = [slice(None)] * 2
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    lo, hi = tuple(lo), tuple(hi)

    pbar = 0.5 * (pp[hi] + pp[lo])
    j = pbar * cache[("A0f", axis)]
    for a_cell, a_face in zip(cache["A_cell"], cache[("Af", axis)]):
        pcn = p * a_cell[..., axis]
        pct = p * a_cell[..., 1 - axis]
        # normal derivative across the face, ghosted with -(p A) at boundaries
        pcp = pad_neg(pcn)
        div = (pcp[hi] - pcp[lo]) / dxa
        # tangential derivative at cells, centered with the same ghosting
        tpad = np.concatenate(
            [
                -pct.take([0], axis=1 - axis),
                pct,
                -pct.take([-1], axis=1 - axis),
            ],
            axis=1 - axis,
        )
        tlo = [slice(None)] * 2
        thi = [slice(None)] * 2
        tlo[1 - axis] = slice(0, -2)
        thi[1 - axis] = slice(2, None)
        dtan = (tpad[tuple(thi)] - tpad[tuple(tlo)]) / (2.0 * dxt)
        # face value: mean of the two adjacent cells, one-sided at boundaries
        drep = np.concatenate(
            [dtan.take([0], axis=axis), dtan, dtan.take([-1], axis=axis)], axis=axis
        )
        div = div + 0.5 * (drep[hi] + drep[lo])
        j -= 0.5 * a_face * div
    return j


def _one_sided_h(mg, cache, p, tab: TransferTable):
    """One-sided current limits on both sides of an image face."""
    k = tab.h_axis
    jh = tab.h_face_index
    d = mg.dimension
    dxk = mg.dx[k]

    def cell(idx_k):
        if d == 1:
            return p[idx_k]
        sel = [None, None]
        sel[k] = idx_k
        sel[1 - k] = tab.tgt_tangential
        return p[tuple(sel)]

    def a_cell_comp(r, idx_k, comp):
        arr = cache["A_cell"][r]
        if d == 1:
            return arr[idx_k, comp]
        sel = [None, None, comp]
        sel[k] = idx_k
        sel[1 - k] = tab.tgt_tangential
        return arr[tuple(sel)]

    def a_face(r):
        arr = cache[("Af", k)][r]
        if d == 1:
            return arr[jh]
        sel = [None, None]
        sel[k] = jh
        sel[1 - k] = tab.tgt_tangential
        return arr[tuple(sel)]

    def a0_face():
        arr = cache[("A0f", k)]
        if d == 1:
            return arr[jh]
        sel = [None, None]
        sel[k] = jh
        sel[1 - k] = tab.tgt_tangential
        return arr[tuple(sel)]

    n_r = len(cache["A_cell"])
    p_lo = 1.5 * cell(jh - 1) - 0.5 * cell(jh - 2)
    p_hi = 1.5 * cell(jh) - 0.5 * cell(jh + 1)
    j1 = p_lo * a0_face()
    j2 = p_hi * a0_face()
    for r in range(n_r):
        div_lo = (cell(jh - 1) * a_cell_comp(r, jh - 1, k) - cell(jh - 2) * a_cell_comp(r, jh - 2, k)) / dxk
        div_hi = (cell(jh + 1) * a_cell_comp(r, jh + 1, k) - cell(jh) * a_cell_comp(r, jh, k)) / dxk
        if d == 2:
            div_lo = div_lo + _tangential_div(mg, cache, p, tab, r, jh - 1)
            div_hi = div_hi + _tangential_div(mg, cache, p, tab, r, jh)
        j1 = j1 - 0.5 * a_face(r) * div_lo
        j2 = j2 - 0.5 * a_face(r) * div_hi
    return np.atleast_1d(j1), np.atleast_1d(j2)


def _tangential_div(mg, cache, p, tab, r, idx_k):
    """d/dt (p A_t) along an image face, from the cell column on one side."""
    k = tab.h_axis
    t_axis = 1 - k
    pct = p * cache["A_cell"][r][..., t_axis]
    col = pct.take(idx_k, axis=k)
    padded = np.concatenate(([-col[0]], col, [-col[-1]]))
    dtan = (padded[2:] - padded[:-2]) / (2.0 * mg.dx[t_axis])
    return dtan[tab.tgt_tangential]


# ---------------------------------------------------------------------------
# flux-form operators


def _clamped_outflux(current: CurrentField, grid: GridLayout, mode: int, axis: int, side: int):
    raw = current.outflux_raw(grid, mode, axis, side)
    return np.maximum(raw, 0.0), raw


def adjoint_apply(model: HybridModel, grid: GridLayout, density) -> list:
    """Rate of change dp/dt per cell from the flux-form divergence."""
    current = probability_current(model, grid, density)
    return divergence_rates(grid, current)


def divergence_rates(grid: GridLayout, current: CurrentField) -> list:
    """dp/dt = -(1/vol) sum_faces J.nu area, with boundary outflux clamped >= 0.

    Reset-image faces exchange nothing here (their main-array entries are
    zero); `transfer_flux` reinjects the matching boundary outflux.
    """
    rates = []
    for q_idx, mg in enumerate(grid.mode_grids):
        vol = mg.cell_volume
        rate = np.zeros(mg.shape)
        for axis in range(mg.dimension):
            arr = current.flux[q_idx][axis].copy()
            lo_idx = [slice(None)] * mg.dimension
            lo_idx[axis] = 0
            hi_idx = [slice(None)] * mg.dimension
            hi_idx[axis] = -1
            # clamped outflux: no inflow through absorbing boundary faces
            arr[tuple(lo_idx)] = np.minimum(arr[tuple(lo_idx)], 0.0)
            arr[tuple(hi_idx)] = np.maximum(arr[tuple(hi_idx)], 0.0)
            lo_f = [slice(None)] * mg.dimension
            lo_f[axis] = slice(0, -1)
            hi_f = [slice(None)] * mg.dimension
            hi_f[axis] = slice(1, None)
            rate -= (arr[tuple(hi_f)] - arr[tuple(lo_f)]) * mg.face_area(axis) / vol
        rates.append(rate)
    return rates


def transfer_flux(model: HybridModel, grid: GridLayout, current: CurrentField):
    """Route boundary outflux: image-face sources and terminal mass rates.

    Returns (sources, terminal_rates, diagnostics) where sources[mode] is a
    mass-per-time array over cells, and the diagnostics record the clamped
    negative outflux.  Total sink equals total source plus total terminal
    rate exactly: the identical floats are reused on both sides.
    """
    max_flux = current.max_abs_flux()
    neg_tol = _NEG_OUTFLUX_REL_TOL * max(max_flux, 1e-300)
    sources = [np.zeros(mg.shape) for mg in grid.mode_grids]
    terminal_rates = {name: 0.0 for name in model.terminal_states}
    clamped = 0.0
    total_sink = 0.0
    total_source = 0.0
    total_terminal = 0.0

    for tab in grid.surface_tables:
        out, raw = _clamped_outflux(current, grid, tab.source_mode, tab.src_axis, tab.src_side)
        _check_outflux(raw, neg_tol, tab.edge_index)
        clamped += float(np.sum(out - raw))
        sink = out * tab.source_area
        if tab.tgt_tangential is None:
            sources[tab.target_mode][int(tab.inject_k_index[0])] += float(sink[0])
        else:
            idx = [None, None]
            idx[tab.h_axis] = tab.inject_k_index
            idx[1 - tab.h_axis] = tab.tgt_tangential
            np.add.at(sources[tab.target_mode], tuple(idx), sink)
        s = float(np.sum(sink))
        total_sink += s
        total_source += s

    for tab in grid.terminal_tables:
        out, raw = _clamped_outflux(current, grid, tab.source_mode, tab.src_axis, tab.src_side)
        _check_outflux(raw, neg_tol, tab.edge_index)
        clamped += float(np.sum(out - raw))
        s = float(np.sum(out * grid.mode_grids[tab.source_mode].face_area(tab.src_axis)))
        terminal_rates[tab.terminal] += s
        total_sink += s
        total_terminal += s

    diagnostics = {
        "clamped_outflux": clamped,
        "total_sink": total_sink,
        "total_source": total_source,
        "total_terminal_rate": total_terminal,
    }
    return sources, terminal_rates, diagnostics


def _check_outflux(raw, neg_tol, edge_index):
    worst = float(np.min(raw)) if raw.size else 0.0
    if worst < -neg_tol:
        raise NegativeOutflux(
            f"edge {edge_index}: boundary outflux {worst:.3e} is negative beyond "
            "tolerance; the absorbing condition is broken"
        )


def _stability_bound(model, grid: GridLayout) -> float:
    a_max = 0.0
    b_max = 0.0
    dx_min = np.inf
    for q_idx, mg in enumerate(grid.mode_grids):
        pts = mg.cell_center_points().reshape(-1, grid.dimension)
        b, a = ito_coefficients(model, q_idx, pts)
        # infinity norm bounds the spectral radius of the symmetric a
        a_max = max(a_max, float(np.max(np.sum(np.abs(a), axis=-1))))
        b_max = max(b_max, float(np.max(np.abs(b))))
        dx_min = min(dx_min, float(np.min(mg.dx)))
    bound = np.inf
    if a_max > 0:
        bound = min(bound, dx_min * dx_min / a_max)
    if b_max > 0:
        bound = min(bound, dx_min / b_max)
    return _STABILITY_SAFETY * bound


def stable_dt(grid: GridLayout, fraction: float = 1.0) -> float:
    """A time step at `fraction` of the advertised explicit stability bound."""
    return fraction * grid.stability_bound()


def evolve(model: HybridModel, grid: GridLayout, density: DensityState, dt: float, n_steps: int) -> DensityState:
    """Advance the density n_steps explicit Euler steps of size dt.

    Each step applies the absorbing boundary condition, assembles the
    current, adds the flux-form divergence, and routes boundary outflux into
    image-face sources and terminal masses.  Mass is conserved after every
    step up to rounding.
    """
    if n_steps < 0:
        raise SolverError("n_steps must be >= 0")
    if dt <= 0.0:
        raise SolverError("dt must be positive")
    bound = grid.stability_bound()
    if dt > bound * (1.0 + 1e-12):
        raise StabilityViolation(f"dt {dt} exceeds the stability bound {bound:.6e}")

    state = density.copy()
    vols = [mg.cell_volume for mg in grid.mode_grids]
    for _ in range(n_steps):
        ghosted = apply_absorbing_bc(model, grid, state)
        current = probability_current(model, grid, ghosted)
        rates = divergence_rates(grid, current)
        sources, terminal_rates, _ = transfer_flux(model, grid, current)
        max_p = 0.0
        for q_idx in range(len(state.p)):
            state.p[q_idx] += dt * (rates[q_idx] + sources[q_idx] / vols[q_idx])
            max_p = max(max_p, float(np.max(state.p[q_idx])))
        for name, rate in terminal_rates.items():
            state.q[name] = state.q.get(name, 0.0) + dt * rate
        state.t += dt
        tol = _NEG_DENSITY_REL_TOL * max(max_p, 1e-300)
        for q_idx in range(len(state.p)):
            worst = float(np.min(state.p[q_idx]))
            if worst < -tol:
                raise NegativeDensity(
                    f"mode {q_idx} density undershot to {worst:.3e} at t={state.t:.6g}"
                )
    return state


def _stationary_support(grid: GridLayout):
    """Cells reachable from the injection cells without crossing image-face walls.

    Regions cut off by walls only drain, so the dynamics-reachable stationary
    profile vanishes there; pinning them removes the spurious zero-current
    equilibria from the nullspace solve.  Returns None when the model has no
    surface targets (nothing recurrent to reach).
    """
    if not grid.surface_tables:
        return None
    walls = set()
    seeds = []
    for tab in grid.surface_tables:
        if tab.tgt_tangential is None:
            walls.add((tab.target_mode, tab.h_axis, tab.h_face_index, None))
            seeds.append((tab.target_mode, (int(tab.inject_k_index[0]),)))
        else:
            for jt, jk in zip(tab.tgt_tangential, tab.inject_k_index):
                walls.add((tab.target_mode, tab.h_axis, tab.h_face_index, int(jt)))
                idx = [0, 0]
                idx[tab.h_axis] = int(jk)
                idx[1 - tab.h_axis] = int(jt)
                seeds.append((tab.target_mode, tuple(idx)))

    masks = [np.zeros(mg.shape, dtype=bool) for mg in grid.mode_grids]
    stack = []
    for q, cell in seeds:
        if not masks[q][cell]:
            masks[q][cell] = True
            stack.append((q, cell))
    while stack:
        q, cell = stack.pop()
        mg = grid.mode_grids[q]
        for axis in range(mg.dimension):
            for step in (-1, 1):
                nb = list(cell)
                nb[axis] += step
                if not (0 <= nb[axis] < mg.shape[axis]):
                    continue
                face_idx = cell[axis] + (1 if step > 0 else 0)
                tang = None if mg.dimension == 1 else cell[1 - axis]
                if (q, axis, face_idx, tang) in walls:
                    continue
                nb = tuple(nb)
                if not masks[q][nb]:
                    masks[q][nb] = True
                    stack.append((q, nb))
    return masks


def stationary_density(model: HybridModel, grid: GridLayout) -> DensityState:
    """Stationary mode densities by a direct nullspace solve.

    The one-step update is linear in the density (the outflux clamp is
    inactive on nonnegative inputs), so the stationary profile solves
    L_h p = 0 for the assembled rate operator, normalised to unit mass and
    restricted to the reset-fed support (regions behind image-face walls
    only drain and are pinned to zero).  Tiny negative entries from the
    solve are clipped and renormalised.
    """
    shapes = [mg.shape for mg in grid.mode_grids]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    n_tot = offsets[-1]
    vols = [mg.cell_volume for mg in grid.mode_grids]

    support = _stationary_support(grid)
    if support is None:
        keep = np.ones(n_tot, dtype=bool)
    else:
        keep = np.concatenate([m.reshape(-1) for m in support])
    keep_idx = np.flatnonzero(keep)

    matrix = np.zeros((n_tot, keep_idx.size))
    basis = DensityState(
        [np.zeros(s) for s in shapes], {name: 0.0 for name in model.terminal_states}, 0.0
    )
    flats = [arr.reshape(-1) for arr in basis.p]
    for col, global_idx in enumerate(keep_idx):
        q_idx = int(np.searchsorted(offsets, global_idx, side="right")) - 1
        cell = int(global_idx - offsets[q_idx])
        flats[q_idx][cell] = 1.0
        current = probability_current(model, grid, basis)
        rates = divergence_rates(grid, current)
        sources, _, _ = transfer_flux(model, grid, current)
        matrix[:, col] = np.concatenate(
            [(rates[m] + sources[m] / vols[m]).reshape(-1) for m in range(len(shapes))]
        )
        flats[q_idx][cell] = 0.0

    # augmented least squares: L p = 0 subject to unit mass; the mass row is
    # scaled to the operator's magnitude so the constraint binds tightly
    vol_row = np.concatenate([np.full(sizes[m], vols[m]) for m in range(len(shapes))])
    scale = max(float(np.max(np.abs(matrix))), 1.0)
    stacked = np.vstack([matrix[keep_idx], scale * vol_row[keep_idx]])
    rhs = np.zeros(keep_idx.size + 1)
    rhs[-1] = scale
    packed = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
    solution = np.zeros(n_tot)
    solution[keep_idx] = np.maximum(packed, 0.0)
    solution /= float(solution @ vol_row)
    arrays = [
        solution[offsets[m] : offsets[m + 1]].reshape(shapes[m])
        for m in range(len(shapes))
    ]
    return DensityState(arrays, {name: 0.0 for name in model.terminal_states}, 0.0)


def run_to_stationarity(
    model: HybridModel,
    grid: GridLayout,
    density: DensityState,
    dt: float,
    l1_tol: float = 1e-6,
    check_every: int = 200,
    max_steps: int = 2_000_000,
):
    """Evolve until the one-step L1 change drops below l1_tol.

    Returns (density, info) with the number of steps taken and the final
    per-step L1 change.
    """
    state = density
    steps = 0
    l1 = np.inf
    while steps < max_steps:
        chunk = min(check_every, max_steps - steps)
        state = evolve(model, grid, state, dt, chunk)
        steps += chunk
        probe = evolve(model, grid, state, dt, 1)
        steps += 1
        l1 = sum(
            float(np.sum(np.abs(probe.p[i] - state.p[i]))) * grid.mode_grids[i].cell_volume
            for i in range(len(state.p))
        )
        state = probe
        if l1 < l1_tol:
            break
    return state, {"steps": steps, "l1_change": l1, "converged": l1 < l1_tol}


def refine(model: HybridModel, grid: GridLayout, density: DensityState, factor: int):
    """Prolong to a factor-finer grid by piecewise-constant injection.

    Mass-preserving; useful for warm-starting fine-grid stationary runs from
    coarse solutions.
    """
    if factor < 1:
        raise SolverError("factor must be >= 1")
    new_res = [tuple(n * factor for n in mg.shape) for mg in grid.mode_grids]
    fine_grid = build_grid(model, new_res)
    arrays = []
    for arr in density.p:
        out = arr
        for axis in range(arr.ndim):
            out = np.repeat(out, factor, axis=axis)
        arrays.append(out)
    return fine_grid, DensityState(arrays, dict(density.q), density.t)


def coarsen(model: HybridModel, grid: GridLayout, density: DensityState, factor: int):
    """Aggregate to a factor-coarser grid by conservative block averaging."""
    if factor < 1:
        raise SolverError("factor must be >= 1")
    new_res = []
    for mg in grid.mode_grids:
        if any(n % factor for n in mg.shape):
            raise SolverError(f"grid shape {mg.shape} is not divisible by {factor}")
        new_res.append(tuple(n // factor for n in mg.shape))
    coarse_grid = build_grid(model, new_res)
    arrays = []
    for arr in density.p:
        if arr.ndim == 1:
            arrays.append(arr.reshape(-1, factor).mean(axis=1))
        else:
            n0, n1 = arr.shape
            arrays.append(
                arr.reshape(n0 // factor, factor, n1 // factor, factor).mean(axis=(1, 3))
            )
    return coarse_grid, DensityState(arrays, dict(density.q), density.t)
