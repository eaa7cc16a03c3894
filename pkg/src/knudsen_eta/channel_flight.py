"""Random flight of a point molecule in a straight circular channel.

Between collisions the molecule moves on a chord of the cross-section.  A
velocity leaving the wall is described by its projection ``u = (u_tau,
u_e)`` on the local tangent plane (``tau`` around the circle, ``e`` along
the axis) and by the inward normal component.  Because the circle is
symmetric about every chord, the projection of the arriving velocity on the
frame at the next wall point is again ``u``: the free flight moves the
molecule but leaves ``u`` unchanged, and only the scattering map acts on it.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cell_scatter import DiscVelocity, ScatterStats, diffuse_scatter, scatter_batch
from .errors import GrazingRay, InsufficientLength, MismatchedChannel
from .microgeometry import RegimeWarning, SurfaceCell
from .seeding import seed_derivation

GRAZING = 1e-9
BLOCK = 2000
TRAJECTORY_CAP = 10**8


@dataclass(frozen=True)
class ChannelSpec:
    R: float = 1.0
    L: float = 50.0
    rho: float = 1.0
    cross_section: str = "circle"

    def __post_init__(self):
        if self.cross_section != "circle":
            raise ValueError("only circular cross-sections are supported")
        if not (self.R > 0 and self.L > 0 and self.rho > 0):
            raise ValueError("R, L and rho must be positive")
        if self.L / self.R < 10:
            warnings.warn(f"L/R = {self.L / self.R:.3g} < 10 is short for a diffusion experiment", RegimeWarning, stacklevel=2)

    @property
    def D_K(self) -> float:
        return 2.0 * self.R * self.rho / 3.0

    def to_dict(self):
        return {"R": self.R, "L": self.L, "rho": self.rho, "cross_section": self.cross_section}


@dataclass(frozen=True)
class FlightState:
    """Wall point ``(theta, z)`` and the velocity projection on its tangent disc."""

    theta: float
    z: float
    velocity: DiscVelocity

    def frame(self):
        """Orthonormal ``(tau, e, nu)`` with ``nu`` pointing into the channel."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        tau = np.array([-s, c, 0.0])
        e = np.array([0.0, 0.0, 1.0])
        nu = np.array([-c, -s, 0.0])
        return tau, e, nu

    def position(self, R: float) -> np.ndarray:
        return np.array([R * math.cos(self.theta), R * math.sin(self.theta), self.z])

    def velocity_3d(self) -> np.ndarray:
        tau, e, nu = self.frame()
        u = self.velocity.u
        return u[0] * tau + u[1] * e + self.velocity.normal_speed * nu


def flight_TX(u, R=1.0, rho=1.0):
    """Flight time and axial displacement for outgoing projections ``u`` (n, 2)."""
    u = np.atleast_2d(u)
    ut, ue = u[:, 0], u[:, 1]
    vn = np.sqrt(np.maximum(rho * rho - ut * ut - ue * ue, 0.0))
    den = vn * vn + ut * ut
    T = 2.0 * R * vn / den
    return T, ue * T


def free_flight(state: FlightState, channel: ChannelSpec):
    """Fly from the wall to the next collision.

    Returns ``(T, X, next_state)`` where ``next_state.velocity`` is the
    projection of the arriving velocity on the tangent disc at the new point
    (before scattering).
    """
    v = state.velocity
    if v.normal_speed <= GRAZING * v.rho:
        raise GrazingRay(f"normal speed {v.normal_speed:.3g} below {GRAZING:g} rho")
    ut, ue = v.u
    vn = v.normal_speed
    T = 2.0 * channel.R * vn / (vn * vn + ut * ut)
    X = ue * T
    P = state.position(channel.R)
    V = state.velocity_3d()
    Q = P + T * V
    rad = math.hypot(Q[0], Q[1])
    if abs(rad - channel.R) > 1e-9 * channel.R:
        raise ArithmeticError(f"landing point off the wall by {rad - channel.R:.3g}")
    theta = math.atan2(Q[1], Q[0])
    nxt = FlightState(theta, Q[2], v)
    tau, e, nu = nxt.frame()
    # arriving velocity seen from the new frame: same tangential part, normal reversed
    u_new = np.array([V @ tau, V @ e])
    nxt = FlightState(theta, Q[2], DiscVelocity(u_new, v.rho))
    return T, X, nxt


def sample_cosine_law(rng, rho: float = 1.0, n: int = None):
    """Projection uniform on the disc of radius ``rho`` (the cosine law).

    Returns a :class:`DiscVelocity` for ``n=None`` and an ``(n, 2)`` array
    otherwise.
    """
    m = 1 if n is None else n
    r = rho * np.sqrt(rng.random(m))
    th = 2.0 * np.pi * rng.random(m)
    u = np.column_stack([r * np.cos(th), r * np.sin(th)])
    return DiscVelocity(u[0], rho) if n is None else u


# ---------------------------------------------------------------------------
# scatter sources


class ScatterSource:
    """Maps arriving projections (n, 2) to outgoing ones with a given rng."""

    name = "source"

    def __call__(self, u, rng):
        raise NotImplementedError


class DiffuseSource(ScatterSource):
    name = "diffuse"

    def __init__(self, rho=1.0):
        self.rho = rho

    def __call__(self, u, rng):
        return diffuse_scatter(u, rng, self.rho)


class SpecularSource(ScatterSource):
    name = "specular"

    def __call__(self, u, rng):
        return u


class CellSource(ScatterSource):
    name = "cell"

    def __init__(self, cell: SurfaceCell, rho=1.0):
        self.cell = cell
        self.rho = rho
        self.stats = ScatterStats()

    def __call__(self, u, rng):
        st = ScatterStats()
        out = scatter_batch(self.cell, u / self.rho, rng, stats=st) * self.rho
        return out, st


class MatrixSource(ScatterSource):
    name = "matrix"

    def __init__(self, tm, rho=1.0):
        self.tm = tm
        self.rho = rho
        self.cdf = np.cumsum(tm.P, axis=1)
        self.cdf[:, -1] = 1.0

    def __call__(self, u, rng):
        part = self.tm.partition
        src = part.bin_of(u / self.rho)
        x = rng.random(len(src))
        dst = np.minimum((self.cdf[src] <= x[:, None]).sum(axis=1), part.n_bins - 1)
        return part.sample_in_bin(dst, len(dst), rng) * self.rho


def make_source(kind, obj=None, rho=1.0) -> ScatterSource:
    if isinstance(kind, ScatterSource):
        return kind
    if kind == "diffuse":
        return DiffuseSource(rho)
    if kind == "specular":
        return SpecularSource()
    if kind == "cell":
        return CellSource(obj, rho)
    if kind == "matrix":
        return MatrixSource(obj, rho)
    raise ValueError(f"unknown scatter source {kind!r}")


def _scatter(source, u, rng):
    out = source(u, rng)
    if isinstance(out, tuple):
        return out
    return out, None


# ---------------------------------------------------------------------------
# exit-time experiment


@dataclass
class FlightStats:
    """Per-trajectory exit times and collision counts plus flight moments."""

    channel: ChannelSpec
    source: str
    exit_times: np.ndarray
    collisions: np.ndarray
    n_flights: int
    sum_T: float
    sum_X: float
    sum_X2: float
    n_capped: int = 0
    scatter_failures: int = 0
    seed: int = None
    msd: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return len(self.exit_times)

    @property
    def mean_exit_time(self) -> float:
        return math.fsum(self.exit_times) / self.n_traj

    @property
    def sem_exit_time(self) -> float:
        return float(np.std(self.exit_times, ddof=1) / math.sqrt(self.n_traj))

    @property
    def mean_T(self) -> float:
        return self.sum_T / self.n_flights

    @property
    def mean_X(self) -> float:
        return self.sum_X / self.n_flights

    @property
    def mean_X2(self) -> float:
        return self.sum_X2 / self.n_flights

    def to_dict(self):
        return {
            "channel": self.channel.to_dict(),
            "source": self.source,
            "seed": self.seed,
            "n_traj": self.n_traj,
            "mean_exit_time": self.mean_exit_time,
            "sem_exit_time": self.sem_exit_time,
            "mean_collisions": float(np.mean(self.collisions)),
            "n_flights": int(self.n_flights),
            "sample_E_T": self.mean_T,
            "sample_E_X": self.mean_X,
            "sample_E_X2": self.mean_X2,
            "n_capped": int(self.n_capped),
            "scatter_failures": int(self.scatter_failures),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["trajectory", "exit_time", "collisions"])
            for i, (t, c) in enumerate(zip(self.exit_times, self.collisions)):
                wr.writerow([i, repr(float(t)), int(c)])


def _run_block(channel, source, n, seed, max_collisions, stationary_u=True):
    """Vectorized trajectories of one block, all driven by one stream."""
    rng = np.random.default_rng(seed)
    R, rho, L = channel.R, channel.rho, channel.L
    theta = 2 * np.pi * rng.random(n)
    z = np.zeros(n)
    u = sample_cosine_law(rng, rho, n)
    t_tot = np.zeros(n)
    ncol = np.zeros(n, dtype=np.int64)
    exit_t = np.full(n, np.nan)
    exit_c = np.zeros(n, dtype=np.int64)
    capped = np.zeros(n, dtype=bool)
    alive = np.arange(n)
    sT = []
    sX = []
    sX2 = []
    nfl = 0
    fails = 0
    while alive.size:
        ua = u[alive]
        graz = np.sqrt(np.maximum(rho * rho - np.einsum("ij,ij->i", ua, ua), 0.0)) <= GRAZING * rho
        while graz.any():
            idx = np.flatnonzero(graz)
            ua[idx] = sample_cosine_law(rng, rho, idx.size) if isinstance(source, DiffuseSource) else _scatter(source, ua[idx], rng)[0]
            graz[idx] = np.sqrt(np.maximum(rho * rho - np.einsum("ij,ij->i", ua[idx], ua[idx]), 0.0)) <= GRAZING * rho
        T, X = flight_TX(ua, R, rho)
        T = T / rho
        # 3-D step with re-projection onto the wall
        c, s = np.cos(theta[alive]), np.sin(theta[alive])
        vn = np.sqrt(np.maximum(rho * rho - np.einsum("ij,ij->i", ua, ua), 0.0))
        vx = -s * ua[:, 0] - c * vn
        vy = c * ua[:, 0] - s * vn
        qx = R * c + T * vx
        qy = R * s + T * vy
        rad = np.hypot(qx, qy)
        if np.any(np.abs(rad - R) > 1e-9 * R):
            raise ArithmeticError("landing point drifted off the wall")
        theta[alive] = np.arctan2(qy, qx)
        z[alive] += X
        t_tot[alive] += T
        ncol[alive] += 1
        nfl += alive.size
        sT.append(math.fsum(T))
        sX.append(math.fsum(X))
        sX2.append(math.fsum(X * X))
        out = np.abs(z[alive]) > L
        done = alive[out]
        exit_t[done] = t_tot[done]
        exit_c[done] = ncol[done]
        over = ~out & (ncol[alive] >= max_collisions)
        capped[alive[over]] = True
        keep = ~out & ~over
        alive = alive[keep]
        if alive.size:
            nu, st = _scatter(source, ua[keep], rng)
            if st is not None:
                fails += st.failures
            u[alive] = nu
    ok = ~capped
    return {
        "exit_t": exit_t[ok],
        "exit_c": exit_c[ok],
        "capped": int(capped.sum()),
        "nfl": nfl,
        "sT": math.fsum(sT),
        "sX": math.fsum(sX),
        "sX2": math.fsum(sX2),
        "fails": fails,
    }


def _blocks(n_traj, block):
    sizes = [block] * (n_traj // block)
    if n_traj % block:
        sizes.append(n_traj % block)
    return sizes


def run_exit_time_experiment(
    channel: ChannelSpec,
    scatter_source,
    n_traj: int,
    seed: int = 0,
    threads: int = 1,
    max_collisions: int = TRAJECTORY_CAP,
    block: int = BLOCK,
    min_traj: int = 10_000,
) -> FlightStats:
    """Mean exit time from ``|z| <= L`` for trajectories started at ``z = 0``.

    ``scatter_source`` is a :class:`ScatterSource` (see :func:`make_source`).
    Trajectories are split into fixed blocks; block ``b`` uses the stream
    ``seed_derivation(seed, b)``, so results do not depend on ``threads``.
    """
    if n_traj < min_traj:
        raise ValueError(f"n_traj = {n_traj} below the minimum {min_traj}")
    if not math.isfinite(channel.L):
        raise ValueError("exit-time experiment needs a finite channel")
    source = make_source(scatter_source, rho=channel.rho)
    sizes = _blocks(n_traj, block)
    jobs = [(sz, seed_derivation(seed, b)) for b, sz in enumerate(sizes)]

    def work(job):
        return _run_block(channel, source, job[0], job[1], max_collisions)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, jobs))
    else:
        parts = [work(j) for j in jobs]
    capped = sum(p["capped"] for p in parts)
    if capped:
        warnings.warn(f"{capped} trajectories exceeded {max_collisions} collisions and were excluded", RuntimeWarning, stacklevel=2)
    return FlightStats(
        channel=channel,
        source=source.name,
        exit_times=np.concatenate([p["exit_t"] for p in parts]),
        collisions=np.concatenate([p["exit_c"] for p in parts]),
        n_flights=sum(p["nfl"] for p in parts),
        sum_T=math.fsum(p["sT"] for p in parts),
        sum_X=math.fsum(p["sX"] for p in parts),
        sum_X2=math.fsum(p["sX2"] for p in parts),
        n_capped=capped,
        scatter_failures=sum(p["fails"] for p in parts),
        seed=seed,
    )


@dataclass(frozen=True)
class EtaEstimate:
    eta: float
    stderr: float
    rel_se_micro: float
    rel_se_diffuse: float

    @property
    def ci95(self):
        return (self.eta - 1.96 * self.stderr, self.eta + 1.96 * self.stderr)

    def to_dict(self):
        return {"eta": self.eta, "stderr": self.stderr, "ci95": list(self.ci95)}


def estimate_eta_mc(stats_micro: FlightStats, stats_diffuse: FlightStats, max_rel_se: float = 0.02) -> EtaEstimate:
    """``eta = tau_diffuse / tau_micro`` with a delta-method standard error."""
    if stats_micro.channel != stats_diffuse.channel:
        raise MismatchedChannel("experiments used different channels")
    if stats_micro.n_traj != stats_diffuse.n_traj:
        raise MismatchedChannel("experiments used different numbers of trajectories")
    tm, td = stats_micro.mean_exit_time, stats_diffuse.mean_exit_time
    rm = stats_micro.sem_exit_time / tm
    rd = stats_diffuse.sem_exit_time / td
    if max(rm, rd) >= max_rel_se:
        warnings.warn(f"relative standard errors {rm:.3g}, {rd:.3g} exceed {max_rel_se}", RuntimeWarning, stacklevel=2)
    eta = td / tm
    return EtaEstimate(eta, eta * math.hypot(rm, rd), rm, rd)


def fit_exponent(Ls, taus) -> float:
    """Least-squares slope of ``log tau`` against ``log L``."""
    return float(np.polyfit(np.log(Ls), np.log(taus), 1)[0])


# ---------------------------------------------------------------------------
# mean square displacement in an unbounded channel


@dataclass
class MSDData:
    source: str
    n_values: np.ndarray
    var_S: np.ndarray
    var_S_se: np.ndarray
    mean_T: float
    n_traj: int


def run_unbounded(channel: ChannelSpec, scatter_source, n_traj: int, n_steps: int, seed: int = 0, n_checkpoints: int = 20) -> MSDData:
    """Axial displacement ``S_n`` after ``n`` flights, without walls at the ends."""
    source = make_source(scatter_source, rho=channel.rho)
    rng = np.random.default_rng(seed_derivation(seed, 0))
    checks = np.unique(np.geomspace(1, n_steps, n_checkpoints).astype(int))
    u = sample_cosine_law(rng, channel.rho, n_traj)
    S = np.zeros(n_traj)
    sT = []
    snaps = []
    ci = 0
    for step in range(1, n_steps + 1):
        T, X = flight_TX(u, channel.R, channel.rho)
        S += X
        sT.append(math.fsum(T / channel.rho))
        if step == checks[ci]:
            snaps.append(S.copy())
            ci += 1
        if step < n_steps:
            u = _scatter(source, u, rng)[0]
    snaps = np.array(snaps)
    var = snaps.var(axis=1, ddof=1)
    # standard error of the sample variance from the fourth moment
    m4 = np.mean((snaps - snaps.mean(axis=1, keepdims=True)) ** 4, axis=1)
    se = np.sqrt(np.maximum(m4 - var**2, 0.0) / n_traj)
    return MSDData(source.name, checks, var, se, math.fsum(sT) / (n_traj * n_steps), n_traj)


@dataclass(frozen=True)
class MSDResult:
    diffusivity: float
    slope_per_step: float
    converged: bool
    drift: float


def msd_estimator(data: MSDData, min_traj: int = 1000, min_steps: int = 1000, tol: float = 0.1) -> MSDResult:
    """Diffusivity proxy ``Var(S_n) / (n E[T])`` from a linear fit over ``n``.

    The slope of ``Var(S_n)`` is fitted on checkpoints with ``n`` at least
    half the longest one and compared with the slope on the preceding
    quarter.  For diffusive motion the two agree; for ballistic motion
    (``Var(S_n) ~ n^2``) they differ by a factor near two and the estimate is
    flagged as not converged.
    """
    if data.n_traj < min_traj or data.n_values[-1] < min_steps:
        raise InsufficientLength(f"need >= {min_traj} trajectories of >= {min_steps} collisions")
    n_all = data.n_values.astype(float)
    top = n_all[-1]

    def slope(sel):
        if sel.sum() >= 2:
            return float(np.polyfit(n_all[sel], data.var_S[sel], 1)[0])
        return float(data.var_S[sel][-1] / n_all[sel][-1])

    late = slope(n_all >= top / 2)
    early = slope((n_all >= top / 4) & (n_all <= top / 2))
    drift = abs(late - early) / abs(late)
    # heavy-tailed flights make the fourth-moment error bar unreliable, so cap it
    noise = min(float(3 * data.var_S_se[-1] / data.var_S[-1]), tol)
    return MSDResult(late / data.mean_T, late, drift <= tol + 2 * noise, drift)
