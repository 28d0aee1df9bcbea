"""Pathwise Monte-Carlo engine for diffusions with boundary-hitting resets.

Paths follow an Euler-Maruyama update of the Ito form inside a mode; straight
segments are tested against the mode's faces, the earliest crossing is
projected onto its face, and the reset edge decides whether the path re-enters
a mode or is absorbed in a terminal state.  A cap on the jump count guards
against reset accumulation; capped paths are flagged and excluded from the
empirical measures they would otherwise enter.

Every trajectory draws from its own RNG stream, seeded from
(base_seed, trajectory_index), so ensembles reproduce bit-for-bit regardless
of batch size or worker count.  The hot loop keeps only live paths in its
state arrays and advances all of them in lockstep: one proposal per
iteration, landing exactly on the next time-grid point unless a boundary
crossing truncates it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from resetsde.model import (
    AffineField,
    HybridModel,
    SurfaceTarget,
    TerminalTarget,
    UnassignedFace,
)

_NOISE_BLOCK = 512
_MODE_TERMINAL = -1
_MODE_ZENO = -2
_MODE_UNSET = -3
DEFAULT_ZENO_RATE = 10_000  # jump budget per unit of time horizon


class SimulationError(RuntimeError):
    """Base class for path-engine errors."""


class StartOnBoundary(SimulationError):
    """Hit detection requires a strictly interior start point."""


class CharacteristicFaceHit(SimulationError):
    """A path reached a face declared characteristic; the model is inconsistent."""


# ---------------------------------------------------------------------------
# states, trajectories, measures


@dataclass(frozen=True)
class PathState:
    """Mode-or-terminal tag with position (absent when terminal) and time."""

    mode: int | None
    terminal: str | None
    position: np.ndarray | None
    time: float

    @staticmethod
    def in_mode(mode: int, position, time: float = 0.0) -> "PathState":
        return PathState(mode, None, np.asarray(position, dtype=float).reshape(-1), time)

    @staticmethod
    def at_terminal(terminal: str, time: float = 0.0) -> "PathState":
        return PathState(None, terminal, None, time)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mode: int
    face: int
    point: np.ndarray
    post: PathState


@dataclass
class Trajectory:
    """One sample path on a fixed time grid plus its ordered jump events."""

    times: np.ndarray
    modes: np.ndarray            # >= 0 in-mode, -1 terminal, -2 zeno-truncated
    positions: np.ndarray        # NaN rows when not in a mode
    jumps: list
    terminal_id: str | None = None
    terminal_time: float | None = None
    zeno_flag: bool = False


@dataclass
class EmpiricalMeasure:
    """Per-output-time mode point clouds, terminal counts, and zeno exclusions."""

    times: np.ndarray
    mode_clouds: list            # [time][mode] -> (n_i, d) positions
    terminal_counts: list        # [time] -> {terminal: count}
    zeno_counts: np.ndarray
    size: int
    base_seed: int
    dynkin: list = field(default_factory=list)

    def time_index(self, t: float, tol: float = 1e-9) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(float(self.times[idx]) - t) > tol:
            raise KeyError(f"time {t} is not an output time of this measure")
        return idx

    def mode_weight(self, t: float, mode: int) -> int:
        return self.mode_clouds[self.time_index(t)][mode].shape[0]

    def terminal_fraction(self, t: float, terminal: str) -> float:
        return self.terminal_counts[self.time_index(t)].get(terminal, 0) / self.size


@dataclass
class DynkinRecord:
    """Per-path ingredients of the expectation identity, per output time."""

    phi0: np.ndarray             # (N,)
    phi_t: np.ndarray            # (K, N)
    int_generator: np.ndarray    # (K, N) accumulated integral of L phi
    jump_sum: np.ndarray         # (K, N) accumulated (phi o Phi - phi) terms
    alive: np.ndarray            # (K, N) False where the path was zeno-dropped
    phi: object = None           # the registered test function


# ---------------------------------------------------------------------------
# initial laws


class PointMass:
    """Deterministic initial state; consumes no randomness."""

    def __init__(self, mode: int, position):
        self.mode = mode
        self.position = np.asarray(position, dtype=float).reshape(-1)

    def sample(self, rng) -> tuple[int, np.ndarray]:
        return self.mode, self.position.copy()


class GaussianInitial:
    """Isotropic or per-axis normal initial position inside one mode."""

    def __init__(self, mode: int, mean, std):
        self.mode = mode
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape).copy()

    def sample(self, rng) -> tuple[int, np.ndarray]:
        return self.mode, self.mean + self.std * rng.standard_normal(self.mean.size)


# ---------------------------------------------------------------------------
# single-state operations


def _ito_drift(model: HybridModel, mode: int, points: np.ndarray) -> np.ndarray:
    fields = model.modes[mode].fields
    b = fields.drift(points).copy()
    for a_field in fields.diffusion:
        val = a_field(points)
        jac = a_field.jacobian(points)
        b += 0.5 * np.einsum("...ij,...j->...i", jac, val)
    return b


def step(model: HybridModel, state: PathState, dt: float, noise) -> PathState:
    """One Euler-Maruyama update from N(0, dt) increments.

    The result may leave the mode's domain; hit detection is separate.
    """
    if state.mode is None:
        raise SimulationError("step requires an in-mode state")
    if dt <= 0.0:
        raise SimulationError("dt must be positive")
    increments = np.asarray(noise, dtype=float).reshape(-1)
    pos = state.position[None, :]
    new = pos + _ito_drift(model, state.mode, pos) * dt
    for r, a_field in enumerate(model.modes[state.mode].fields.diffusion):
        new = new + a_field(pos) * increments[r]
    return PathState(state.mode, None, new[0], state.time + dt)


def detect_hit(domain, start, end):
    """First face crossing of the straight segment start -> end, if any.

    Returns (fraction, face, point) with the point projected exactly onto the
    face hyperplane, or None when the segment stays inside.
    """
    start = np.asarray(start, dtype=float).reshape(-1)
    end = np.asarray(end, dtype=float).reshape(-1)
    gs = domain.gaps(start)
    if np.any(gs >= 0.0):
        raise StartOnBoundary("segment start is not strictly inside the domain")
    ge = domain.gaps(end)
    crossing = ge >= 0.0
    if not np.any(crossing):
        return None
    fractions = np.full(gs.shape, np.inf)
    fractions[crossing] = gs[crossing] / (gs[crossing] - ge[crossing])
    face = int(np.argmin(fractions))
    s = float(fractions[face])
    point = start + s * (end - start)
    point = point - (float(point @ domain.normals[face]) - domain.offsets[face]) * domain.normals[face]
    return s, face, point


def _resolve_edge(model: HybridModel, mode: int, face: int, point: np.ndarray):
    if model.is_characteristic(mode, face):
        raise CharacteristicFaceHit(
            f"path reached declared-characteristic face ({mode}, {face})"
        )
    edges = model.edges_for_face(mode, face)
    for edge in edges:
        if bool(edge.in_patch(point)[0]):
            return edge
    raise UnassignedFace(
        f"hit on face ({mode}, {face}) lands outside every source patch"
    )


def _nudge_interior(domain, points: np.ndarray) -> np.ndarray:
    """Push image points a hair inside when they touch a face numerically."""
    eps = 1e-12 * domain.diameter()
    out = points
    gaps = domain.gaps(out)
    for k in range(domain.n_faces):
        close = gaps[..., k] > -eps
        if np.any(close):
            out = out.copy()
            out[close] -= (gaps[close][..., k] + eps)[:, None] * domain.normals[k]
            gaps = domain.gaps(out)
    return out


def apply_reset(model: HybridModel, hit: tuple[int, int, np.ndarray], time: float = 0.0) -> PathState:
    """Map a boundary hit through its reset edge."""
    mode, face, point = hit
    point = np.asarray(point, dtype=float).reshape(-1)
    edge = _resolve_edge(model, mode, face, point)
    if isinstance(edge.target, TerminalTarget):
        return PathState.at_terminal(edge.target.terminal, time)
    target = edge.target
    image = target.map(point[None, :])
    image = _nudge_interior(model.modes[target.mode].domain, image)
    return PathState.in_mode(target.mode, image[0], time)


def default_zeno_cap(horizon: float) -> int:
    return max(1, int(np.ceil(DEFAULT_ZENO_RATE * horizon)))


# ---------------------------------------------------------------------------
# stepping kernels


class _AffineKernel:
    """Per-path coefficient rows for affine drift and constant noise columns.

    The drift-correction term vanishes for constant diffusion fields, so the
    Ito drift is the affine drift itself; one gathered expression then
    advances a mixed-mode batch, with rows cached per path and refreshed only
    when a path changes mode.
    """

    def __init__(self, model: HybridModel):
        d = model.dimension
        n_modes = len(model.modes)
        self.f_max = max(m.domain.n_faces for m in model.modes)
        self.d = d
        self.b_mat = np.zeros((n_modes, d, d))
        self.b_off = np.zeros((n_modes, d))
        self.noise_cols = np.zeros((n_modes, d, d))
        self.normals = np.zeros((n_modes, self.f_max, d))
        # padded faces report gap -1 (strictly inside), never crossing
        self.offsets = np.full((n_modes, self.f_max), 1.0)
        for q, m in enumerate(model.modes):
            self.b_mat[q] = m.fields.drift.matrix
            self.b_off[q] = m.fields.drift.offset
            for r, a_field in enumerate(m.fields.diffusion):
                self.noise_cols[q, :, r] = a_field.offset
            nf = m.domain.n_faces
            self.normals[q, :nf] = m.domain.normals
            self.offsets[q, :nf] = m.domain.offsets

    @staticmethod
    def supports(model: HybridModel) -> bool:
        for m in model.modes:
            if not isinstance(m.fields.drift, AffineField):
                return False
            for a_field in m.fields.diffusion:
                if not isinstance(a_field, AffineField) or np.any(a_field.matrix != 0.0):
                    return False
        return True

    def attach(self, modes: np.ndarray) -> None:
        self.row_b_mat = self.b_mat[modes]
        self.row_b_off = self.b_off[modes]
        self.row_noise = self.noise_cols[modes]
        self.row_normals = self.normals[modes]
        self.row_offsets = self.offsets[modes]

    def update_rows(self, rows: np.ndarray, modes: np.ndarray) -> None:
        self.row_b_mat[rows] = self.b_mat[modes]
        self.row_b_off[rows] = self.b_off[modes]
        self.row_noise[rows] = self.noise_cols[modes]
        self.row_normals[rows] = self.normals[modes]
        self.row_offsets[rows] = self.offsets[modes]

    def compact(self, keep: np.ndarray) -> None:
        self.row_b_mat = self.row_b_mat[keep]
        self.row_b_off = self.row_b_off[keep]
        self.row_noise = self.row_noise[keep]
        self.row_normals = self.row_normals[keep]
        self.row_offsets = self.row_offsets[keep]

    def propose(self, modes, theta, delta, sqrt_delta, xi):
        d = self.d
        out = np.empty_like(theta)
        for i in range(d):
            acc = self.row_b_off[:, i]
            for j in range(d):
                acc = acc + self.row_b_mat[:, i, j] * theta[:, j]
            acc = acc * delta
            for r in range(d):
                acc = acc + self.row_noise[:, i, r] * (xi[:, r] * sqrt_delta)
            out[:, i] = theta[:, i] + acc
        return out

    def gaps(self, modes, points):
        g = self.row_normals[:, :, 0] * points[:, 0, None]
        for j in range(1, self.d):
            g += self.row_normals[:, :, j] * points[:, j, None]
        g -= self.row_offsets
        return g

    def gaps_rows(self, rows, modes, points):
        g = self.row_normals[rows, :, 0] * points[:, 0, None]
        for j in range(1, self.d):
            g += self.row_normals[rows, :, j] * points[:, j, None]
        g -= self.row_offsets[rows]
        return g


class _GeneralKernel:
    """Per-mode fallback for arbitrary field objects."""

    def __init__(self, model: HybridModel):
        self.model = model
        self.f_max = max(m.domain.n_faces for m in model.modes)

    def attach(self, modes):
        pass

    def update_rows(self, rows, modes):
        pass

    def compact(self, keep):
        pass

    def propose(self, modes, theta, delta, sqrt_delta, xi):
        out = np.empty_like(theta)
        for q in range(len(self.model.modes)):
            sel = modes == q
            if not np.any(sel):
                continue
            pts = theta[sel]
            move = _ito_drift(self.model, q, pts) * delta[sel, None]
            for r, a_field in enumerate(self.model.modes[q].fields.diffusion):
                move = move + a_field(pts) * (xi[sel, r] * sqrt_delta[sel])[:, None]
            out[sel] = pts + move
        return out

    def gaps(self, modes, points):
        g = np.full((points.shape[0], self.f_max), -1.0)
        for q in range(len(self.model.modes)):
            sel = modes == q
            if not np.any(sel):
                continue
            domain = self.model.modes[q].domain
            g[np.ix_(sel, np.arange(domain.n_faces))] = domain.gaps(points[sel])
        return g

    def gaps_rows(self, rows, modes, points):
        return self.gaps(modes[rows], points)


def _make_kernel(model: HybridModel):
    if _AffineKernel.supports(model):
        return _AffineKernel(model)
    return _GeneralKernel(model)


# ---------------------------------------------------------------------------
# recording


class _BatchRecorder:
    """Output-time slots for one batch, indexed by original path position."""

    def __init__(self, n_out, batch, dim, model, test_functions):
        self.n_out = n_out
        self.mode_at = np.full((n_out, batch), _MODE_UNSET, dtype=np.int64)
        self.pos_at = np.full((n_out, batch, dim), np.nan)
        self.term_at = np.full((n_out, batch), -1, dtype=np.int64)
        self.out_pos = np.zeros(batch, dtype=np.int64)
        self.model = model
        self.phis = list(test_functions)
        if self.phis:
            self.phi0 = np.zeros((len(self.phis), batch))
            self.phi_t = np.zeros((len(self.phis), n_out, batch))
            self.intL_at = np.zeros((len(self.phis), n_out, batch))
            self.jsum_at = np.zeros((len(self.phis), n_out, batch))

    def phi_value(self, k, modes, positions, terminals):
        """phi evaluated on a mixed batch of in-mode and terminal states."""
        phi = self.phis[k]
        vals = np.zeros(modes.shape[0])
        for q in np.unique(modes[modes >= 0]):
            sel = modes == q
            vals[sel] = phi.evaluate(int(q), positions[sel])
        term_sel = modes == _MODE_TERMINAL
        if np.any(term_sel):
            names = self.model.terminal_states
            vals[term_sel] = [phi.terminal_value(names[t]) for t in terminals[term_sel]]
        return vals

    def record_slot(self, orig_idx, modes, positions, terminals, intL_vals, jsum_vals):
        """Fill the next output slot of the given (original) paths."""
        slots = self.out_pos[orig_idx]
        self.mode_at[slots, orig_idx] = modes
        self.pos_at[slots, orig_idx] = positions
        self.term_at[slots, orig_idx] = terminals
        for k in range(len(self.phis)):
            self.phi_t[k, slots, orig_idx] = self.phi_value(k, modes, positions, terminals)
            self.intL_at[k, slots, orig_idx] = intL_vals[k]
            self.jsum_at[k, slots, orig_idx] = jsum_vals[k]
        self.out_pos[orig_idx] += 1

    def record_until_end(self, orig_idx, modes, positions, terminals, intL_vals, jsum_vals):
        """Dead paths keep their state for every remaining output time."""
        while True:
            pending = self.out_pos[orig_idx] < self.n_out
            if not np.any(pending):
                break
            self.record_slot(
                orig_idx[pending],
                modes[pending],
                positions[pending],
                terminals[pending],
                intL_vals[:, pending] if len(self.phis) else intL_vals,
                jsum_vals[:, pending] if len(self.phis) else jsum_vals,
            )


def _checkpoints(horizon: float, dt: float, output_times: Sequence[float]) -> np.ndarray:
    grid = np.arange(0.0, horizon, dt)
    pts = np.concatenate([grid, np.asarray(output_times, dtype=float), [horizon]])
    pts = np.unique(pts)
    if pts[0] < 0.0 or pts[-1] > horizon + 1e-12:
        raise SimulationError("output times must lie inside [0, horizon]")
    return pts


# ---------------------------------------------------------------------------
# the batched engine


def _run_batch(
    model: HybridModel,
    initial_law,
    index_range,
    base_seed,
    checkpoints,
    out_of_cp,
    n_out,
    dt,
    zeno_cap,
    test_functions,
    record_trajectory=False,
):
    d = model.dimension
    lo_idx, hi_idx = index_range
    batch = hi_idx - lo_idx
    gens = [
        np.random.default_rng(np.random.SeedSequence([base_seed, idx]))
        for idx in range(lo_idx, hi_idx)
    ]
    kernel = _make_kernel(model)
    n_phi = len(test_functions)
    term_names = model.terminal_states
    terminal_name_to_idx = {name: i for i, name in enumerate(term_names)}

    # live-path state; rows are compacted away as paths die
    orig = np.arange(batch, dtype=np.int64)
    mode = np.empty(batch, dtype=np.int64)
    pos = np.zeros((batch, d))
    if isinstance(initial_law, PointMass):
        mode[:] = initial_law.mode
        pos[:] = initial_law.position
    else:
        for i, gen in enumerate(gens):
            q0, x0 = initial_law.sample(gen)
            mode[i] = q0
            pos[i] = x0
    for q in np.unique(mode):
        inside = model.modes[int(q)].domain.contains(pos[mode == q])
        if not np.all(inside):
            raise SimulationError(f"initial law produced points outside mode {q}")
    kernel.attach(mode)

    t = np.zeros(batch)
    term = np.full(batch, -1, dtype=np.int64)
    jumps = np.zeros(batch, dtype=np.int64)
    next_cp = np.ones(batch, dtype=np.int64)
    intL = np.zeros((n_phi, batch))
    jsum = np.zeros((n_phi, batch))

    # per-original-path results, filled when a path's run ends
    res_mode = np.full(batch, _MODE_UNSET, dtype=np.int64)
    res_term = np.full(batch, -1, dtype=np.int64)
    res_t = np.zeros(batch)
    res_jumps = np.zeros(batch, dtype=np.int64)
    res_zeno = np.zeros(batch, dtype=bool)

    rec = _BatchRecorder(n_out, batch, d, model, test_functions)
    for k in range(n_phi):
        rec.phi0[k] = rec.phi_value(k, mode, pos, term)
    if out_of_cp[0] >= 0:
        rec.record_slot(orig, mode, pos, term, intL, jsum)

    traj_jumps: list = []
    traj_modes = None
    traj_positions = None
    if record_trajectory:
        traj_modes = np.full((len(checkpoints), batch), _MODE_UNSET, dtype=np.int64)
        traj_positions = np.full((len(checkpoints), batch, d), np.nan)
        traj_modes[0] = mode
        traj_positions[0] = pos

    buf = np.empty((batch, _NOISE_BLOCK))  # indexed by original position
    cursor = _NOISE_BLOCK  # force a fill on first use
    n_cp = len(checkpoints)
    ever_compacted = False

    while orig.size:
        if cursor + d > _NOISE_BLOCK:
            for i in orig:
                buf[i] = gens[i].standard_normal(_NOISE_BLOCK)
            cursor = 0
        if ever_compacted:
            xi = buf[orig, cursor : cursor + d]
        else:
            xi = buf[:, cursor : cursor + d]
        cursor += d

        cps = checkpoints[next_cp]
        delta = cps - t
        sqrt_delta = np.sqrt(delta)
        start_pos = pos
        theta_new = kernel.propose(mode, start_pos, delta, sqrt_delta, xi)

        # crossing fractions only for the paths that actually left the domain
        ge = kernel.gaps(mode, theta_new)
        crossed = np.flatnonzero(np.any(ge >= 0.0, axis=1))
        if n_phi:
            seg_L_start = np.zeros((n_phi, orig.size))
            for q in np.unique(mode):
                sel = mode == q
                for k, phi in enumerate(test_functions):
                    seg_L_start[k, sel] = phi.generator(int(q), start_pos[sel])

        # commit the common case: land exactly on the next checkpoint
        pos = theta_new
        t = cps
        next_cp += 1

        if n_phi:
            # trapezoid accumulation over the full step for non-crossing
            # paths; crossing paths get their truncated segment below
            nc_mask = np.ones(orig.size, dtype=bool)
            nc_mask[crossed] = False
            nc = np.flatnonzero(nc_mask)
            if nc.size:
                seg_L_end = np.zeros((n_phi, nc.size))
                nc_modes = mode[nc]
                for q in np.unique(nc_modes):
                    sel = nc_modes == q
                    for k, phi in enumerate(test_functions):
                        seg_L_end[k, sel] = phi.generator(int(q), theta_new[nc][sel])
                for k in range(n_phi):
                    intL[k, nc] += 0.5 * (seg_L_start[k, nc] + seg_L_end[k]) * delta[nc]

        dead_rows: list = []
        resync = np.empty(0, dtype=np.int64)
        if crossed.size:
            gs = kernel.gaps_rows(crossed, mode, start_pos[crossed])
            gec = ge[crossed]
            crossing = gec >= 0.0
            denom = np.where(crossing, gs - gec, 1.0)
            denom = np.where(denom == 0.0, 1.0, denom)
            frac = np.where(crossing, np.where(gs < 0.0, gs / denom, 0.0), np.inf)
            s = np.min(frac, axis=1)
            faces = np.argmin(frac, axis=1)

            tau = (t[crossed] - delta[crossed]) + s * delta[crossed]
            hit_pts = start_pos[crossed] + s[:, None] * (theta_new[crossed] - start_pos[crossed])
            if n_phi:
                seg_end_hit = np.zeros((n_phi, crossed.size))
                for q in np.unique(mode[crossed]):
                    sel = mode[crossed] == q
                    for k, phi in enumerate(test_functions):
                        seg_end_hit[k, sel] = phi.generator(int(q), hit_pts[sel])
                for k in range(n_phi):
                    # crossing paths accumulate only the truncated segment
                    intL[k, crossed] += (
                        0.5 * (seg_L_start[k, crossed] + seg_end_hit[k]) * (s * delta[crossed])
                    )
            t[crossed] = tau
            next_cp[crossed] -= 1
            jumps[crossed] += 1

            pre_modes = mode[crossed].copy()
            for q in np.unique(pre_modes):
                q = int(q)
                domain = model.modes[q].domain
                q_sel = np.flatnonzero(pre_modes == q)
                for f in np.unique(faces[q_sel]):
                    f = int(f)
                    f_sel = q_sel[faces[q_sel] == f]
                    pts = hit_pts[f_sel]
                    nrm = domain.normals[f]
                    pts = pts - (pts @ nrm - domain.offsets[f])[:, None] * nrm
                    hit_pts[f_sel] = pts
                    _apply_reset_rows(
                        model, kernel, q, f, pts, crossed[f_sel], tau[f_sel],
                        mode, pos, term, orig, terminal_name_to_idx,
                        test_functions, jsum,
                        traj_jumps if record_trajectory else None,
                    )

            # zeno guard: flag paths that exhausted their jump budget
            over = crossed[(jumps[crossed] >= zeno_cap) & (mode[crossed] >= 0)]
            if over.size:
                mode[over] = _MODE_ZENO

            newly_dead = crossed[mode[crossed] < 0]
            if newly_dead.size:
                srt = np.sort(newly_dead)
                rec.record_until_end(
                    orig[srt], mode[srt], pos[srt], term[srt],
                    intL[:, srt], jsum[:, srt],
                )
                dead_rows.extend(srt.tolist())

            # a jump landing on (or an ulp past) a checkpoint arrives there
            live_hits = crossed[mode[crossed] >= 0]
            resync = live_hits[t[live_hits] >= checkpoints[next_cp[live_hits]]]
            if resync.size:
                t[resync] = checkpoints[next_cp[resync]]
                next_cp[resync] += 1

        # checkpoint arrivals: every non-crossing live path, plus resyncs
        arr_mask = mode >= 0
        if crossed.size:
            arr_mask[crossed] = False
            arr_mask[resync] = True
        arrivals = np.flatnonzero(arr_mask)
        if arrivals.size:
            arrived = next_cp[arrivals] - 1
            if record_trajectory:
                traj_modes[arrived, orig[arrivals]] = mode[arrivals]
                traj_positions[arrived, orig[arrivals]] = pos[arrivals]
            slots = out_of_cp[arrived]
            with_out = arrivals[slots >= 0]
            if with_out.size:
                rec.record_slot(
                    orig[with_out], mode[with_out], pos[with_out], term[with_out],
                    intL[:, with_out], jsum[:, with_out],
                )
            done = arrivals[arrived == n_cp - 1]
            dead_rows.extend(done.tolist())

        if dead_rows:
            dead = np.unique(np.array(dead_rows, dtype=np.int64))
            res_mode[orig[dead]] = mode[dead]
            res_term[orig[dead]] = term[dead]
            res_t[orig[dead]] = t[dead]
            res_jumps[orig[dead]] = jumps[dead]
            res_zeno[orig[dead]] = mode[dead] == _MODE_ZENO
            keep = np.ones(orig.size, dtype=bool)
            keep[dead] = False
            orig = orig[keep]
            mode = mode[keep]
            pos = pos[keep]
            t = t[keep]
            term = term[keep]
            jumps = jumps[keep]
            next_cp = next_cp[keep]
            intL = intL[:, keep]
            jsum = jsum[:, keep]
            kernel.compact(keep)
            ever_compacted = True

    return {
        "mode_at": rec.mode_at,
        "pos_at": rec.pos_at,
        "term_at": rec.term_at,
        "phi0": rec.phi0 if n_phi else None,
        "phi_t": rec.phi_t if n_phi else None,
        "intL_at": rec.intL_at if n_phi else None,
        "jsum_at": rec.jsum_at if n_phi else None,
        "jumps": res_jumps,
        "zeno": res_zeno,
        "traj_modes": traj_modes,
        "traj_positions": traj_positions,
        "traj_jumps": traj_jumps,
        "final_mode": res_mode,
        "final_term": res_term,
        "final_t": res_t,
    }


def _apply_reset_rows(
    model, kernel, q, f, pts, rows, taus, mode, pos, term, orig,
    term_name_to_idx, test_functions, jsum, traj_jumps,
):
    """Reset a group of hits on one face; mutates the live-state arrays."""
    edges = model.edges_for_face(q, f)
    if model.is_characteristic(q, f):
        raise CharacteristicFaceHit(
            f"path reached declared-characteristic face ({q}, {f})"
        )
    if not edges:
        raise UnassignedFace(f"no reset edge covers face ({q}, {f})")

    pre_phi = None
    if test_functions:
        pre_phi = np.array([phi.evaluate(q, pts) for phi in test_functions])

    assigned = np.zeros(rows.size, dtype=bool)
    for edge in edges:
        in_patch = edge.in_patch(pts) & ~assigned
        if not np.any(in_patch):
            continue
        assigned |= in_patch
        sel_rows = rows[in_patch]
        sel_pts = pts[in_patch]
        if isinstance(edge.target, TerminalTarget):
            t_idx = term_name_to_idx[edge.target.terminal]
            mode[sel_rows] = _MODE_TERMINAL
            term[sel_rows] = t_idx
            pos[sel_rows] = np.nan
            if test_functions:
                for k, phi in enumerate(test_functions):
                    jsum[k, sel_rows] += phi.terminal_value(edge.target.terminal) - pre_phi[k][in_patch]
            if traj_jumps is not None:
                for j in range(sel_rows.size):
                    traj_jumps.append(
                        JumpEvent(
                            float(taus[in_patch][j]), q, f, sel_pts[j].copy(),
                            PathState.at_terminal(edge.target.terminal, float(taus[in_patch][j])),
                        )
                    )
        else:
            target = edge.target
            image = target.map(sel_pts)
            image = _nudge_interior(model.modes[target.mode].domain, image)
            mode[sel_rows] = target.mode
            pos[sel_rows] = image
            kernel.update_rows(sel_rows, mode[sel_rows])
            if test_functions:
                for k, phi in enumerate(test_functions):
                    jsum[k, sel_rows] += phi.evaluate(target.mode, image) - pre_phi[k][in_patch]
            if traj_jumps is not None:
                for j in range(sel_rows.size):
                    traj_jumps.append(
                        JumpEvent(
                            float(taus[in_patch][j]), q, f, sel_pts[j].copy(),
                            PathState.in_mode(target.mode, image[j], float(taus[in_patch][j])),
                        )
                    )
    if not np.all(assigned):
        raise UnassignedFace(
            f"hit on face ({q}, {f}) lands outside every source patch"
        )


# ---------------------------------------------------------------------------
# public entry points


def simulate_path(
    model: HybridModel,
    initial: PathState,
    horizon: float,
    dt: float,
    rng_seed: int,
    zeno_cap: int | None = None,
    path_index: int = 0,
) -> Trajectory:
    """One trajectory sampled on the dt grid, with its jump events.

    The RNG stream is the one trajectory `path_index` would receive inside
    `ensemble(base_seed=rng_seed, ...)`.
    """
    if dt <= 0.0:
        raise SimulationError("dt must be positive")
    if zeno_cap is None:
        zeno_cap = default_zeno_cap(horizon)
    if zeno_cap < 1:
        raise SimulationError("zeno_cap must be >= 1")

    checkpoints = _checkpoints(horizon, dt, [])
    out_of_cp = np.full(len(checkpoints), -1, dtype=np.int64)

    if initial.terminal is not None:
        # terminal initial states stay put (no dynamics, no jumps)
        times = checkpoints
        modes = np.full(len(times), _MODE_TERMINAL, dtype=np.int64)
        positions = np.full((len(times), model.dimension), np.nan)
        return Trajectory(
            times, modes, positions, [], terminal_id=initial.terminal,
            terminal_time=initial.time, zeno_flag=False,
        )

    law = PointMass(initial.mode, initial.position)
    res = _run_batch(
        model, law, (path_index, path_index + 1), rng_seed, checkpoints,
        out_of_cp, 0, dt, zeno_cap, (), record_trajectory=True,
    )
    modes = res["traj_modes"][:, 0]
    positions = res["traj_positions"][:, 0, :]
    term_id = None
    term_time = None
    if res["final_mode"][0] == _MODE_TERMINAL:
        term_id = model.terminal_states[int(res["final_term"][0])]
        term_time = float(res["final_t"][0])
        after = checkpoints >= term_time
        modes[after] = _MODE_TERMINAL
        positions[after] = np.nan
    zeno = bool(res["zeno"][0])
    if zeno:
        flag_time = float(res["final_t"][0])
        after = checkpoints > flag_time
        modes[after] = _MODE_ZENO
        positions[after] = np.nan
    jumps = sorted(res["traj_jumps"], key=lambda e: e.time)
    return Trajectory(
        checkpoints, modes, positions, jumps,
        terminal_id=term_id, terminal_time=term_time, zeno_flag=zeno,
    )


def ensemble(
    model: HybridModel,
    initial_law,
    n_paths: int,
    horizon: float,
    dt: float,
    output_times: Sequence[float],
    base_seed: int,
    zeno_cap: int | None = None,
    test_functions: Sequence = (),
    batch_size: int = 100_000,
    n_workers: int = 1,
) -> EmpiricalMeasure:
    """Independent trajectories with per-path streams, reduced in index order.

    Identical inputs give bit-identical measures for any batch size or worker
    count.  Zeno-flagged paths are counted separately and excluded from the
    mode clouds and terminal counts.
    """
    if n_paths < 0:
        raise SimulationError("n_paths must be >= 0")
    if dt <= 0.0:
        raise SimulationError("dt must be positive")
    if zeno_cap is None:
        zeno_cap = default_zeno_cap(horizon)
    out_times = np.asarray(sorted(output_times), dtype=float)
    if out_times.size == 0:
        raise SimulationError("at least one output time is required")

    checkpoints = _checkpoints(horizon, dt, out_times)
    out_of_cp = np.full(len(checkpoints), -1, dtype=np.int64)
    for k, ot in enumerate(out_times):
        idx = int(np.searchsorted(checkpoints, ot))
        out_of_cp[idx] = k
    n_out = out_times.size

    if n_paths == 0:
        return EmpiricalMeasure(
            out_times,
            [[np.zeros((0, model.dimension)) for _ in model.modes] for _ in range(n_out)],
            [dict() for _ in range(n_out)],
            np.zeros(n_out, dtype=np.int64),
            0,
            base_seed,
        )

    ranges = [
        (lo, min(lo + batch_size, n_paths)) for lo in range(0, n_paths, batch_size)
    ]

    def run_range(rng_pair):
        return _run_batch(
            model, initial_law, rng_pair, base_seed, checkpoints, out_of_cp,
            n_out, dt, zeno_cap, tuple(test_functions),
        )

    if n_workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_range, ranges))
    else:
        results = [run_range(r) for r in ranges]

    mode_at = np.concatenate([r["mode_at"] for r in results], axis=1)
    pos_at = np.concatenate([r["pos_at"] for r in results], axis=1)
    term_at = np.concatenate([r["term_at"] for r in results], axis=1)

    mode_clouds = []
    terminal_counts = []
    zeno_counts = np.zeros(n_out, dtype=np.int64)
    names = model.terminal_states
    for k in range(n_out):
        clouds = [
            pos_at[k][mode_at[k] == q].copy() for q in range(len(model.modes))
        ]
        mode_clouds.append(clouds)
        counts = {}
        t_sel = mode_at[k] == _MODE_TERMINAL
        if np.any(t_sel):
            binc = np.bincount(term_at[k][t_sel], minlength=len(names))
            counts = {names[i]: int(c) for i, c in enumerate(binc) if c > 0}
        terminal_counts.append(counts)
        zeno_counts[k] = int(np.sum(mode_at[k] == _MODE_ZENO))

    dynkin = []
    for k_phi in range(len(test_functions)):
        dynkin.append(
            DynkinRecord(
                phi0=np.concatenate([r["phi0"][k_phi] for r in results]),
                phi_t=np.concatenate([r["phi_t"][k_phi] for r in results], axis=1),
                int_generator=np.concatenate([r["intL_at"][k_phi] for r in results], axis=1),
                jump_sum=np.concatenate([r["jsum_at"][k_phi] for r in results], axis=1),
                alive=mode_at != _MODE_ZENO,
                phi=test_functions[k_phi],
            )
        )

    return EmpiricalMeasure(
        out_times, mode_clouds, terminal_counts, zeno_counts, n_paths, base_seed, dynkin
    )
