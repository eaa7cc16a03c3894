"""Specular billiard tracing inside a cell and the random scattering map.

Velocities are carried as their projection ``u`` onto the tangent disc of
radius ``rho``.  Inside a cell the lift of an incoming velocity is
``(u1, u2, -sqrt(rho^2 - |u|^2))`` and an outgoing one has a positive normal
component.  The batch tracer works on arrays of rays; the scalar functions
wrap it and raise on failure.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import MaxBounceExceeded, NumericalStall, TraceFailureRate
from .microgeometry import SurfaceCell, compute_flatness, compute_shape_matrix
from .quadrature import rectangle_rule
from .seeding import seed_derivation

OK, MAX_BOUNCE, STALL = 0, 1, 2
GRAZING_TOL = 1e-9


@dataclass(frozen=True)
class DiscVelocity:
    """Velocity represented by its projection ``u`` on the disc ``|u| <= rho``."""

    u: np.ndarray
    rho: float = 1.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(2)
        object.__setattr__(self, "u", u)
        if self.rho <= 0:
            raise ValueError("speed must be positive")
        if np.dot(u, u) > self.rho**2 * (1 + 1e-12):
            raise ValueError(f"|u|={np.linalg.norm(u):.17g} exceeds rho={self.rho}")

    @property
    def normal_speed(self) -> float:
        return float(np.sqrt(max(self.rho**2 - np.dot(self.u, self.u), 0.0)))

    def lift(self, outgoing: bool = True) -> np.ndarray:
        w = self.normal_speed
        return np.array([self.u[0], self.u[1], w if outgoing else -w])


@dataclass(frozen=True)
class ScatterOutcome:
    V: DiscVelocity
    bounces: int
    entry_point: np.ndarray
    exit_point: np.ndarray


@dataclass
class TraceBatch:
    """Result of :func:`trace_rays` for ``n`` rays."""

    U: np.ndarray  # (n, 2) outgoing projections
    normal: np.ndarray  # (n,) outgoing normal speed component
    bounces: np.ndarray
    status: np.ndarray
    exit_point: np.ndarray  # (n, 2)

    @property
    def ok(self):
        return self.status == OK


def trace_rays(cell: SurfaceCell, r, v, max_bounces: int = 1000, z0=None) -> TraceBatch:
    """Trace rays entering the cell opening until they leave it again.

    Parameters
    ----------
    r : (n, 2) entry points on the opening.
    v : (n, 3) velocities with negative normal component.
    z0 : starting height, defaults to the opening plane ``cell.top``.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = len(r)
    speed = np.linalg.norm(v, axis=1)
    top = cell.top if z0 is None else z0
    c = np.array([cell.c1, cell.c2])
    tiny = 1e-14 * cell.size

    p = np.column_stack([r, np.full(n, top)])
    d = v / speed[:, None]
    bounces = np.zeros(n, dtype=np.int64)
    status = np.full(n, OK, dtype=np.int8)
    stalls = np.zeros(n, dtype=np.int64)
    active = np.flatnonzero(d[:, 2] < 0)

    while active.size:
        pa, da = p[active], d[active]
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(da[:, :2] > 0, c, -c)
            t_axes = np.where(da[:, :2] != 0, (bound - pa[:, :2]) / da[:, :2], np.inf)
            t_axes = np.maximum(t_axes, 0.0)
            t_top = np.where(da[:, 2] > 0, (top - pa[:, 2]) / da[:, 2], np.inf)
        t_side = t_axes.min(axis=1)
        t_exit = np.minimum(t_side, t_top)
        t_hit, nrm = cell.intersect(pa, da, t_exit)

        hit = np.isfinite(t_hit)
        leave = ~hit & (t_top <= t_side)
        wrap = ~hit & ~leave

        step = np.where(hit, t_hit, np.where(leave, t_top, t_side))
        step = np.where(np.isfinite(step), step, 0.0)
        pa = pa + step[:, None] * da

        # specular reflection
        if np.any(hit):
            dn = np.einsum("ij,ij->i", da[hit], nrm[hit])
            da[hit] = da[hit] - 2.0 * dn[:, None] * nrm[hit]
            bounces[active[hit]] += 1
        if np.any(leave):
            pa[leave, 2] = top
        if np.any(wrap):
            for ax in range(2):
                cross = wrap & (t_axes[:, ax] <= t_side * (1 + 1e-12) + tiny)
                pos = cross & (da[:, ax] > 0)
                neg = cross & (da[:, ax] < 0)
                pa[pos, ax] = -c[ax]
                pa[neg, ax] = c[ax]

        p[active], d[active] = pa, da
        stalled = step < tiny
        stalls[active] = np.where(stalled, stalls[active] + 1, 0)

        over = bounces[active] > max_bounces
        stuck = stalls[active] > 64
        status[active[over]] = MAX_BOUNCE
        status[active[stuck & ~over]] = STALL
        active = active[~leave & ~over & ~stuck]

    U = d[:, :2] * speed[:, None]
    return TraceBatch(U=U, normal=d[:, 2] * speed, bounces=bounces, status=status, exit_point=p[:, :2].copy())


def trace_cell(cell: SurfaceCell, v_in: DiscVelocity, r, max_bounces: int = 1000) -> ScatterOutcome:
    """Deterministic scattering of one incoming velocity entering at ``r``."""
    r = np.asarray(r, dtype=float).reshape(2)
    if abs(r[0]) > cell.c1 or abs(r[1]) > cell.c2:
        raise ValueError("entry point outside the cell opening")
    v = v_in.lift(outgoing=False)
    if -v[2] <= GRAZING_TOL * v_in.rho:
        raise ValueError("incoming velocity must point into the wall")
    res = trace_rays(cell, r[None], v[None], max_bounces=max_bounces)
    if res.status[0] == MAX_BOUNCE:
        raise MaxBounceExceeded(f"ray exceeded {max_bounces} bounces")
    if res.status[0] == STALL:
        raise NumericalStall("ray stalled (grazing contact)")
    U = res.U[0]
    # project back onto the disc to remove rounding drift
    nu = np.linalg.norm(U)
    if nu > v_in.rho:
        U = U * (v_in.rho / nu)
    return ScatterOutcome(
        V=DiscVelocity(U, v_in.rho), bounces=int(res.bounces[0]), entry_point=r.copy(), exit_point=res.exit_point[0]
    )


def lift_incoming(u, rho=1.0):
    u = np.atleast_2d(u)
    w = np.sqrt(np.maximum(rho**2 - np.einsum("ij,ij->i", u, u), 0.0))
    return np.column_stack([u, -w])


def uniform_on_opening(cell: SurfaceCell, n: int, rng) -> np.ndarray:
    return np.column_stack([rng.uniform(-cell.c1, cell.c1, n), rng.uniform(-cell.c2, cell.c2, n)])


@dataclass
class ScatterStats:
    n: int = 0
    failures: int = 0
    grazing: int = 0
    multi_bounce: int = 0


def scatter_batch(cell: SurfaceCell, u_in, rng, rho=1.0, max_bounces=1000, stats=None, retries=8):
    """Random scattering ``V(r, v)`` for an array of incoming projections.

    Entry points are uniform on the opening.  Failed traces are retried with
    fresh entry points; incoming rays within ``GRAZING_TOL`` of tangency are
    passed through unchanged (they never reach the relief).
    """
    u_in = np.atleast_2d(np.asarray(u_in, dtype=float))
    n = len(u_in)
    out = u_in.copy()
    w = np.sqrt(np.maximum(rho**2 - np.einsum("ij,ij->i", u_in, u_in), 0.0))
    todo = np.flatnonzero(w > GRAZING_TOL * rho)
    if stats is not None:
        stats.n += n
        stats.grazing += n - todo.size
    for _ in range(retries + 1):
        if not todo.size:
            break
        r = uniform_on_opening(cell, todo.size, rng)
        res = trace_rays(cell, r, lift_incoming(u_in[todo], rho), max_bounces=max_bounces)
        good = res.ok
        out[todo[good]] = res.U[good]
        if stats is not None:
            stats.failures += int((~good).sum())
            stats.multi_bounce += int((res.bounces[good] > 1).sum())
        todo = todo[~good]
    if todo.size:
        raise TraceFailureRate(f"{todo.size} rays failed after {retries} retries")
    # clamp rounding drift so that |U| <= rho holds exactly
    nu = np.linalg.norm(out, axis=1)
    over = nu > rho
    out[over] *= (rho / nu[over])[:, None]
    return out


def sample_scatter(cell: SurfaceCell, v_in: DiscVelocity, rng) -> DiscVelocity:
    """One draw of the outgoing velocity for incoming ``v_in``."""
    U = scatter_batch(cell, v_in.u[None], rng, rho=v_in.rho)[0]
    return DiscVelocity(U, v_in.rho)


def ray_surface_intersection(cell: SurfaceCell, origin, direction, method: str = "auto"):
    """First intersection of a ray with the relief inside the current column.

    Returns ``(point, unit_normal)`` or ``None`` when the ray leaves the cell
    column (or never descends to the relief).  ``method`` selects the closed
    form (``"analytic"``), safeguarded root finding (``"numeric"``) or the
    best available (``"auto"``).
    """
    o = np.asarray(origin, dtype=float).reshape(1, 3)
    d = np.asarray(direction, dtype=float).reshape(1, 3)
    nd = np.linalg.norm(d)
    if nd == 0:
        raise ValueError("direction must be nonzero")
    d = d / nd
    c = np.array([cell.c1, cell.c2])
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d[0, :2] > 0, c, -c)
        t_axes = np.where(d[0, :2] != 0, (bound - o[0, :2]) / d[0, :2], np.inf)
    t_max = np.array([max(float(np.min(t_axes)), 0.0)])
    if method == "numeric" or (method == "auto" and not cell.analytic_intersection):
        t, nrm = SurfaceCell.intersect_numeric(cell, o, d, t_max, t_min=0.0)
    elif method in ("analytic", "auto"):
        if not cell.analytic_intersection:
            raise ValueError(f"{cell.family} cell has no closed-form intersection")
        t, nrm = cell.intersect(o, d, t_max, t_min=0.0)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.isfinite(t[0]):
        return None
    return o[0] + t[0] * d[0], nrm[0]


# ---------------------------------------------------------------------------
# diffusion approximation check


@dataclass
class OperatorCheckRow:
    h: float
    A: np.ndarray  # equals h * Lambda
    p_psi: float
    psi: float
    l_psi: float
    residual: float
    excluded: int


@dataclass
class OperatorCheck:
    u: np.ndarray
    rows: list
    slope: float

    def table(self):
        return [
            {"h": r.h, "PPsi": r.p_psi, "Psi": r.psi, "LPsi": r.l_psi, "residual": r.residual, "excluded": r.excluded}
            for r in self.rows
        ]


def check_operator_approx(family, psi, u, h_list, n_quad: int = 256, rho: float = 1.0) -> OperatorCheck:
    """Compare ``(P_h psi - psi)/h`` with the generalized Legendre operator.

    Parameters
    ----------
    family : callable ``h -> SurfaceCell`` producing a cell of flatness ``h``.
    psi : 2-D coefficient array, ``psi(u) = sum c[i, j] u1**i u2**j``.
    u : evaluation point with ``|u| <= 0.8 rho``.
    h_list : flatness values, each ``<= 0.05``.

    ``P_h psi(u)`` is integrated over entry points with a ``n_quad x n_quad``
    Gauss-Legendre rule; rays that bounce more than once are excluded and
    counted.  The residual order is the least-squares slope of
    ``log residual`` against ``log h``.
    """
    from .legendre_spectral import apply_generator, poly2d_eval

    u = np.asarray(u, dtype=float).reshape(2)
    if np.linalg.norm(u) > 0.8 * rho + 1e-12:
        raise ValueError("single-collision regime requires |u| <= 0.8 rho")
    psi = np.asarray(psi, dtype=float)
    rows = []
    for h_target in h_list:
        if h_target > 0.05:
            raise ValueError("operator check is only meaningful for h <= 0.05")
        cell = family(h_target)
        h = compute_flatness(cell)
        mp = compute_shape_matrix(cell, h=h)
        x1, x2, w = rectangle_rule(cell.c1, cell.c2, n_quad)
        v = lift_incoming(np.broadcast_to(u, (len(x1), 2)), rho)
        res = trace_rays(cell, np.column_stack([x1, x2]), v)
        keep = res.ok & (res.bounces == 1)
        wk = w[keep] / w[keep].sum()
        p_psi = float(np.dot(wk, poly2d_eval(psi, res.U[keep, 0] / rho, res.U[keep, 1] / rho)))
        psi_u = float(poly2d_eval(psi, u[0] / rho, u[1] / rho))
        l_psi = float(poly2d_eval(apply_generator(psi, mp.Lambda), u[0] / rho, u[1] / rho))
        resid = abs((p_psi - psi_u) / h - l_psi)
        rows.append(OperatorCheckRow(h, mp.A, p_psi, psi_u, l_psi, resid, int((~keep).sum())))
    hs = np.array([r.h for r in rows])
    es = np.array([r.residual for r in rows])
    if len(rows) >= 2 and np.all(es > 0):
        slope = float(np.polyfit(np.log(hs), np.log(es), 1)[0])
    else:
        slope = float("nan")
    return OperatorCheck(u=u, rows=rows, slope=slope)


# ---------------------------------------------------------------------------
# transition matrix


def _trace_chunk(cell, u_in, r):
    res = trace_rays(cell, r, lift_incoming(u_in))
    return res


def build_transition_matrix(
    source,
    partition=(24, 24),
    n_samples: int = 10_000,
    seed: int = 0,
    threads: int = 1,
    chunk: int = 200_000,
    max_fail_fraction: float = 1e-3,
):
    """Discretize the scattering operator on an equal-area polar partition.

    ``source`` is either a :class:`SurfaceCell` or a callable
    ``scatter(u_in, rng) -> U`` (e.g. :func:`diffuse_scatter`).  Inputs for
    bin ``i`` are drawn uniformly within the bin from a stream seeded by
    ``seed_derivation(seed, i)``; outputs are histogrammed into bins and
    each row is normalized by its count of successful traces.
    """
    from .estimation import DiscPartition, TransitionMatrix

    part = partition if isinstance(partition, DiscPartition) else DiscPartition(*partition)
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    N = part.n_bins
    inputs = []
    rngs = []
    for i in range(N):
        rng = np.random.default_rng(seed_derivation(seed, i))
        inputs.append(part.sample_in_bin(i, n_samples, rng))
        rngs.append(rng)
    u_all = np.concatenate(inputs)
    src_bin = np.repeat(np.arange(N), n_samples)

    if isinstance(source, SurfaceCell):
        cell = source
        r_all = np.concatenate([uniform_on_opening(cell, n_samples, rngs[i]) for i in range(N)])
        bounds = list(range(0, len(u_all), chunk)) + [len(u_all)]
        jobs = list(zip(bounds[:-1], bounds[1:]))

        def work(job):
            a, b = job
            return _trace_chunk(cell, u_all[a:b], r_all[a:b])

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(work, jobs))
        else:
            results = [work(j) for j in jobs]
        U = np.concatenate([r.U for r in results])
        ok = np.concatenate([r.ok for r in results])
        multi = int(sum(int((r.bounces[r.ok] > 1).sum()) for r in results))
    else:
        U = np.concatenate([source(inputs[i], rngs[i]) for i in range(N)])
        ok = np.ones(len(U), dtype=bool)
        multi = 0

    failures = int((~ok).sum())
    if failures > max_fail_fraction * len(U):
        raise TraceFailureRate(f"{failures} of {len(U)} traces failed")
    dst = part.bin_of(U[ok])
    counts = np.zeros((N, N), dtype=np.int64)
    np.add.at(counts, (src_bin[ok], dst), 1)
    rowsum = counts.sum(axis=1)
    P = counts / rowsum[:, None]
    meta = {
        "n_samples": int(n_samples),
        "seed": int(seed),
        "failures": failures,
        "multi_bounce": multi,
        "source": getattr(source, "family", getattr(source, "__name__", "callable")),
    }
    return TransitionMatrix(P=P, partition=part, counts=rowsum, meta=meta)


def diffuse_scatter(u_in, rng, rho=1.0):
    """Knudsen diffuse source: ignore ``u_in`` and redraw from the cosine law."""
    n = len(np.atleast_2d(u_in))
    r = rho * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])
