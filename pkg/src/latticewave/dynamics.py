"""Undamped transient dynamics on lattice models via the Newmark-beta integrator.

The effective stiffness K + a0*M is factorized once per simulation and reused
for every step.  The default coefficients are the average-acceleration scheme
(beta=1/4, gamma=1/2), which is unconditionally stable and conserves the
discrete energy of a linear system once the load is removed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix, csr_matrix
from scipy.sparse.linalg import eigsh, splu

from .mesh import LatticeModel


class SingularSystemError(RuntimeError):
    """The effective stiffness could not be factorized."""


class DivergenceError(RuntimeError):
    """Non-finite state encountered during time stepping."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


class AssemblyDefectError(RuntimeError):
    """The generalized eigenproblem produced a significantly negative eigenvalue."""


@dataclass(frozen=True)
class NewmarkParams:
    dt: float
    n_steps: int
    beta: float = 0.25
    gamma: float = 0.5
    paper_literal_coefficients: bool = False

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not (2 * self.beta >= self.gamma >= 0.5):
            raise ValueError("unconditional stability requires 2*beta >= gamma >= 1/2")

    def coefficients(self) -> tuple[float, float, float]:
        """(a0, a2, a3) used in the effective stiffness and load."""
        if self.paper_literal_coefficients:
            return (
                6.0 / (self.gamma * self.dt**2),
                1.0 / (self.gamma * self.dt),
                1.0 / (2.0 * self.gamma),
            )
        return (
            1.0 / (self.beta * self.dt**2),
            1.0 / (self.beta * self.dt),
            1.0 / (2.0 * self.beta) - 1.0,
        )


@dataclass(frozen=True)
class LoadSpec:
    excitation_particle: int
    direction: tuple[float, float]
    magnitude: float
    duration_steps: int = 1

    def validate(self, n_steps: int) -> None:
        if self.magnitude == 0:
            raise ValueError("load magnitude must be nonzero")
        if not 1 <= self.duration_steps <= n_steps:
            raise ValueError("duration_steps must lie in [1, n_steps]")
        norm = float(np.hypot(*self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")


@dataclass
class WaveFieldState:
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    step: int = 0


@dataclass
class EffectiveStiffness:
    """Factorized K + a0*M restricted to the free DOFs."""

    solver: object
    free: np.ndarray
    params: NewmarkParams
    ndof: int


def effective_stiffness(
    K: csr_matrix, M: csr_matrix, params: NewmarkParams, free_dofs: np.ndarray
) -> EffectiveStiffness:
    """Build and factorize the effective stiffness for repeated solves."""
    params.validate()
    a0, _, _ = params.coefficients()
    free = np.asarray(free_dofs, dtype=np.intp)
    K_hat = (K + a0 * M)[free][:, free]
    try:
        solver = splu(csc_matrix(K_hat))
    except RuntimeError as exc:
        raise SingularSystemError(f"effective stiffness is singular: {exc}") from exc
    diag_u = np.abs(solver.U.diagonal())
    if diag_u.size and (diag_u.min() == 0 or not np.isfinite(diag_u).all()):
        raise SingularSystemError("effective stiffness is singular")
    return EffectiveStiffness(solver=solver, free=free, params=params, ndof=K.shape[0])


def initial_acceleration(
    K: csr_matrix, M: csr_matrix, u0: np.ndarray, f0: np.ndarray, free: np.ndarray
) -> np.ndarray:
    """a0 = M^-1 (F0 - K u0) on the free DOFs; enforces the equation of motion at t=0."""
    a = np.zeros_like(u0)
    m_diag = np.asarray(M.diagonal())[free]
    if np.any(m_diag <= 0):
        raise SingularSystemError("mass matrix not invertible on free DOFs")
    a[free] = (f0[free] - (K @ u0)[free]) / m_diag
    return a


def newmark_step(
    state: WaveFieldState,
    k_hat: EffectiveStiffness,
    M: csr_matrix,
    f_next: np.ndarray,
    params: NewmarkParams,
) -> WaveFieldState:
    """Advance one step: solve K_hat u = F_hat, then update velocity/acceleration."""
    a0, a2, a3 = params.coefficients()
    dt, gamma = params.dt, params.gamma
    free = k_hat.free
    u, v, a = state.u, state.v, state.a

    rhs_full = f_next + M @ (a0 * u + a2 * v + a3 * a)
    u_next = np.zeros_like(u)
    u_next[free] = k_hat.solver.solve(rhs_full[free])

    a_next = np.zeros_like(a)
    a_next[free] = a0 * (u_next[free] - u[free]) - a2 * v[free] - a3 * a[free]
    v_next = np.zeros_like(v)
    v_next[free] = v[free] + dt * ((1 - gamma) * a[free] + gamma * a_next[free])

    step = state.step + 1
    if not (
        np.isfinite(u_next[free]).all()
        and np.isfinite(v_next[free]).all()
        and np.isfinite(a_next[free]).all()
    ):
        raise DivergenceError(step)
    return WaveFieldState(u=u_next, v=v_next, a=a_next, step=step)


@dataclass
class WaveFieldRecord:
    """Per-receiver displacement histories (n_receivers, n_steps, 2)."""

    data: np.ndarray
    dt: float
    receivers: np.ndarray
    receiver_positions: np.ndarray
    load: LoadSpec
    snapshots: np.ndarray | None = field(default=None, repr=False)
    snapshot_steps: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return self.data.shape[1]


def _force_history(load: LoadSpec, ndof: int, step: int) -> np.ndarray:
    """Load vector at time index `step`; impulse active for the first duration_steps indices."""
    f = np.zeros(ndof)
    if step < load.duration_steps:
        d = 2 * load.excitation_particle
        f[d] = load.magnitude * load.direction[0]
        f[d + 1] = load.magnitude * load.direction[1]
    return f


def simulate(
    model: LatticeModel,
    load: LoadSpec,
    params: NewmarkParams,
    receivers: np.ndarray,
    snapshot_every: int | None = None,
) -> WaveFieldRecord:
    """Run n_steps of Newmark integration from rest and record receiver displacements."""
    params.validate()
    load.validate(params.n_steps)
    receivers = np.asarray(receivers, dtype=np.intp)
    if receivers.min(initial=0) < 0 or receivers.max(initial=0) >= model.n_particles:
        raise ValueError("receiver index out of range")

    ndof = model.ndof
    free = model.free_dofs
    k_hat = effective_stiffness(model.K, model.M, params, free)

    u0 = np.zeros(ndof)
    f0 = _force_history(load, ndof, 0)
    state = WaveFieldState(
        u=u0,
        v=np.zeros(ndof),
        a=initial_acceleration(model.K, model.M, u0, f0, free),
    )

    data = np.zeros((len(receivers), params.n_steps, 2))
    rx, ry = 2 * receivers, 2 * receivers + 1
    snaps = []
    snap_steps = []
    for step in range(1, params.n_steps + 1):
        f_next = _force_history(load, ndof, step)
        state = newmark_step(state, k_hat, model.M, f_next, params)
        data[:, step - 1, 0] = state.u[rx]
        data[:, step - 1, 1] = state.u[ry]
        if snapshot_every and step % snapshot_every == 0:
            snaps.append(state.u.reshape(-1, 2).copy())
            snap_steps.append(step)

    return WaveFieldRecord(
        data=data,
        dt=params.dt,
        receivers=receivers,
        receiver_positions=model.positions[receivers],
        load=load,
        snapshots=np.array(snaps) if snaps else None,
        snapshot_steps=np.array(snap_steps) if snap_steps else None,
    )


def natural_frequencies(model: LatticeModel, n_lowest: int) -> np.ndarray:
    """Smallest n_lowest natural angular frequencies of the constrained model."""
    free = model.free_dofs
    m_diag = model.mass_diag[free]
    if np.any(m_diag <= 0):
        raise SingularSystemError("mass matrix not invertible on free DOFs")
    Kff = model.K[free][:, free]
    n = len(free)
    n_lowest = min(n_lowest, n)
    # symmetric whitening: eig(M^-1 K) = eig(D^-1/2 K D^-1/2) for diagonal M
    from scipy.sparse import diags as _diags

    d = _diags(1.0 / np.sqrt(m_diag))
    S = d @ Kff @ d
    if n <= 600 or n_lowest >= n - 1:
        lam = np.linalg.eigvalsh(S.toarray())
    else:
        lam = eigsh(csc_matrix(S), k=n_lowest, sigma=0, which="LM", return_eigenvectors=False)
        lam = np.sort(lam)
    lam = np.asarray(lam)
    lam_max = np.abs(lam).max() if lam.size else 0.0
    if lam.size and lam.min() < -1e-8 * lam_max:
        raise AssemblyDefectError(f"negative eigenvalue {lam.min()} (max {lam_max})")
    lam = np.clip(lam, 0.0, None)
    return np.sqrt(lam[:n_lowest])


def system_energy(model: LatticeModel, state: WaveFieldState) -> float:
    """Discrete mechanical energy 0.5 v'Mv + 0.5 u'Ku."""
    return 0.5 * float(state.v @ (model.M @ state.v) + state.u @ (model.K @ state.u))


NO_ARRIVAL = None


def first_arrival(
    record: WaveFieldRecord, receiver: int, threshold_fraction: float = 0.05
) -> float | None:
    """Time of the first sample whose |u| exceeds threshold_fraction * max |u|.

    Returns None when the receiver trace never exceeds the threshold.
    """
    trace = record.data[receiver]
    mag = np.hypot(trace[:, 0], trace[:, 1])
    peak = mag.max()
    if peak <= 0:
        return NO_ARRIVAL
    idx = np.nonzero(mag > threshold_fraction * peak)[0]
    if len(idx) == 0:
        return NO_ARRIVAL
    return float((idx[0] + 1) * record.dt)


def envelope(trace: np.ndarray, smooth_steps: int = 100) -> np.ndarray:
    """Moving RMS of the displacement magnitude along a receiver trace."""
    mag = np.hypot(trace[:, 0], trace[:, 1])
    if smooth_steps <= 1:
        return mag
    kernel = np.ones(smooth_steps) / smooth_steps
    return np.sqrt(np.convolve(mag**2, kernel, mode="same"))


def second_arrival(
    record: WaveFieldRecord,
    receiver: int,
    prominence_fraction: float = 0.1,
    smooth_steps: int = 100,
) -> float | None:
    """Arrival time of the second wave packet at a receiver.

    Wave packets are the prominent local maxima of the moving-RMS envelope of
    |u|; the second packet's arrival is the time of the second such maximum.
    Returns None when fewer than two packets are present.
    """
    from scipy.signal import find_peaks

    env = envelope(record.data[receiver], smooth_steps)
    peak = env.max()
    if peak <= 0:
        return NO_ARRIVAL
    peaks, _ = find_peaks(env / peak, prominence=prominence_fraction)
    if len(peaks) < 2:
        return NO_ARRIVAL
    return float((peaks[1] + 1) * record.dt)


# --- record serialization ---------------------------------------------------


def save_record(record: WaveFieldRecord, path: str) -> None:
    """Write the raw little-endian f32 tensor plus a JSON sidecar (path + '.json')."""
    record.data.astype("<f4").tofile(path)
    meta = {
        "shape": list(record.data.shape),
        "dtype": "<f4",
        "order": "receiver,time,component",
        "dt": record.dt,
        "receivers": record.receivers.tolist(),
        "receiver_positions": record.receiver_positions.tolist(),
        "load": {
            "excitation_particle": record.load.excitation_particle,
            "direction": list(record.load.direction),
            "magnitude": record.load.magnitude,
            "duration_steps": record.load.duration_steps,
        },
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_record(path: str) -> WaveFieldRecord:
    with open(path + ".json") as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype="<f4").reshape(meta["shape"]).astype(float)
    load = LoadSpec(
        excitation_particle=meta["load"]["excitation_particle"],
        direction=tuple(meta["load"]["direction"]),
        magnitude=meta["load"]["magnitude"],
        duration_steps=meta["load"]["duration_steps"],
    )
    return WaveFieldRecord(
        data=data,
        dt=meta["dt"],
        receivers=np.array(meta["receivers"], dtype=np.intp),
        receiver_positions=np.array(meta["receiver_positions"]),
        load=load,
    )
