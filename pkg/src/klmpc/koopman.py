"""Observable lifting, data generation and EDMD identification.

The lifted state has a fixed layout

    psi = [x, y, v, sin(theta), cos(theta), v*cos(theta), v*sin(theta), h,
           rbf_1, ..., rbf_K]

so the physical read-out matrix, the barrier row and serialization are all
well defined. Gaussian RBFs measure distance in the embedded coordinates
(x, y, sin(theta), cos(theta), v) so that heading periodicity is respected.

Identification solves two independent ridge regressions on single-step
transition pairs: one for the lifted transition matrices (A, B) and one for
the output map C that projects lifted states back onto augmented states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import (
    AugmentedState,
    BoxBounds,
    Input,
    ObstacleSpec,
    State,
    _barrier_arrays,
    _rk4_arrays,
    augment,
)

__all__ = [
    "N_FIXED",
    "IDX_H",
    "ObservableBasis",
    "Dataset",
    "KoopmanModel",
    "IdentificationError",
    "lift",
    "lift_batch",
    "generate_dataset",
    "fit_edmd",
    "fit_output_map",
    "identify",
    "predict",
    "reconstruct",
    "lifted_barrier",
    "relative_degree",
    "prediction_error",
    "save_model",
    "load_model",
    "save_dataset",
    "load_dataset",
]

# Fixed coordinates preceding the RBF block.
N_FIXED = 8
IDX_X, IDX_Y, IDX_V, IDX_SIN, IDX_COS, IDX_VCOS, IDX_VSIN, IDX_H = range(N_FIXED)


class IdentificationError(RuntimeError):
    """Raised when the regression Gram system is numerically unusable."""


@dataclass(frozen=True)
class ObservableBasis:
    """Gaussian RBF dictionary drawn once and frozen for a model's lifetime.

    Parameters
    ----------
    centers : (n_rbf, 4) array
        RBF centers in raw state coordinates (x, y, theta, v).
    widths : (n_rbf,) array
        Positive kernel widths; a scalar is broadcast to all centers.
    seed : int
        RNG seed the centers were drawn with (kept for reproducibility).
    """

    centers: np.ndarray
    widths: np.ndarray
    seed: int

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        widths = np.broadcast_to(
            np.asarray(self.widths, dtype=float), (centers.shape[0],)
        ).copy()
        if centers.shape[1] != 4:
            raise ValueError("RBF centers must be 4-vectors over the state space")
        if np.any(widths <= 0):
            raise ValueError("RBF widths must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "widths", widths)

    @property
    def n_rbf(self) -> int:
        return self.centers.shape[0]

    @property
    def n_psi(self) -> int:
        return N_FIXED + self.n_rbf

    @staticmethod
    def draw(n_rbf: int, width: float, seed: int, ranges: BoxBounds) -> "ObservableBasis":
        """Draw centers uniformly over the state sampling box."""
        rng = np.random.default_rng(seed)
        centers = rng.uniform(ranges.state_lo, ranges.state_hi, size=(n_rbf, 4))
        return ObservableBasis(centers, np.full(n_rbf, float(width)), seed)

    def embedded_centers(self) -> np.ndarray:
        """Centers mapped to (x, y, sin th, cos th, v), the RBF metric space."""
        c = self.centers
        return np.column_stack([c[:, 0], c[:, 1], np.sin(c[:, 2]), np.cos(c[:, 2]), c[:, 3]])


def _lift_arrays(states: np.ndarray, h: np.ndarray, basis: ObservableBasis) -> np.ndarray:
    """Lift a batch; states has shape (4, N), h shape (N,). Returns (n_psi, N)."""
    x, y, th, v = states
    sin_t, cos_t = np.sin(th), np.cos(th)
    psi = np.empty((basis.n_psi, states.shape[1]))
    psi[IDX_X] = x
    psi[IDX_Y] = y
    psi[IDX_V] = v
    psi[IDX_SIN] = sin_t
    psi[IDX_COS] = cos_t
    psi[IDX_VCOS] = v * cos_t
    psi[IDX_VSIN] = v * sin_t
    psi[IDX_H] = h
    if basis.n_rbf:
        emb = np.stack([x, y, sin_t, cos_t, v])  # (5, N)
        cen = basis.embedded_centers()  # (K, 5)
        d2 = np.square(cen[:, :, None] - emb[None, :, :]).sum(axis=1)
        psi[N_FIXED:] = np.exp(-d2 / (2.0 * basis.widths[:, None] ** 2))
    return psi


def lift(a: AugmentedState, basis: ObservableBasis) -> np.ndarray:
    """Lift one augmented state to the observable vector."""
    arr = a.state.to_array().reshape(4, 1)
    return _lift_arrays(arr, np.array([a.h]), basis)[:, 0]


def lift_batch(states: np.ndarray, obs: ObstacleSpec, basis: ObservableBasis) -> np.ndarray:
    """Lift (4, N) raw states, computing the barrier row on the fly."""
    return _lift_arrays(states, _barrier_arrays(states, obs), basis)


@dataclass(frozen=True)
class Dataset:
    """Single-step transition samples, stored column-per-sample.

    psi_now / psi_next are (n_psi, N), inputs is (q, N) and aug_now holds the
    raw augmented states (n+1, N) used to fit the output map.
    """

    psi_now: np.ndarray
    psi_next: np.ndarray
    inputs: np.ndarray
    aug_now: np.ndarray
    n_samples: int

    def __post_init__(self):
        cols = {m.shape[1] for m in (self.psi_now, self.psi_next, self.inputs, self.aug_now)}
        if cols != {self.n_samples}:
            raise ValueError(f"inconsistent sample counts across dataset matrices: {cols}")


def generate_dataset(
    ranges: BoxBounds,
    n_samples: int,
    dt: float,
    seed: int,
    obs: ObstacleSpec,
    basis: ObservableBasis,
) -> Dataset:
    """Sample i.i.d. transitions of the augmented plant and lift them.

    States and inputs are drawn uniformly over `ranges`; each column is one
    (x_t, u_t, x_{t+1}) pair advanced by a single RK4 step. Reproducible for
    a fixed seed.
    """
    q = ranges.input_lo.size
    if n_samples < basis.n_psi + q:
        raise ValueError(
            f"need at least n_psi + q = {basis.n_psi + q} samples, got {n_samples}"
        )
    rng = np.random.default_rng(seed)
    states = rng.uniform(
        ranges.state_lo[:, None], ranges.state_hi[:, None], size=(4, n_samples)
    )
    inputs = rng.uniform(
        ranges.input_lo[:, None], ranges.input_hi[:, None], size=(q, n_samples)
    )
    nxt = _rk4_arrays(states, inputs, dt)
    h_now = _barrier_arrays(states, obs)
    aug_now = np.vstack([states, h_now])
    psi_now = _lift_arrays(states, h_now, basis)
    psi_next = _lift_arrays(nxt, _barrier_arrays(nxt, obs), basis)
    return Dataset(psi_now, psi_next, inputs, aug_now, n_samples)


def fit_edmd(d: Dataset, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Ridge regression for the lifted transition matrices.

    Solves [A B] = Psi_next V^T (V V^T + lam I)^-1 with V = [Psi_now; U]
    through a Cholesky factorization of the Gram matrix.
    """
    if lam < 0:
        raise ValueError("ridge parameter must be nonnegative")
    n_psi = d.psi_now.shape[0]
    V = np.vstack([d.psi_now, d.inputs])
    G = V @ V.T
    G[np.diag_indices_from(G)] += lam
    rhs = V @ d.psi_next.T  # (n_psi + q, n_psi)
    try:
        cho = scipy.linalg.cho_factor(G, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise IdentificationError(
            "singular Gram matrix in EDMD regression "
            f"(cond ~ {np.linalg.cond(G):.3e}); increase lambda or add data"
        ) from exc
    AB = scipy.linalg.cho_solve(cho, rhs, check_finite=False).T
    return AB[:, :n_psi].copy(), AB[:, n_psi:].copy()


# Tiny ridge keeping the output-map Gram matrix invertible.
OUTPUT_MAP_RIDGE = 1e-10


def fit_output_map(d: Dataset) -> np.ndarray:
    """Least-squares projection of augmented states onto the lifted span."""
    G = d.psi_now @ d.psi_now.T
    G[np.diag_indices_from(G)] += OUTPUT_MAP_RIDGE
    rhs = d.psi_now @ d.aug_now.T
    try:
        cho = scipy.linalg.cho_factor(G, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise IdentificationError(
            "rank-deficient lifted data in output-map regression "
            f"(cond ~ {np.linalg.cond(G):.3e})"
        ) from exc
    return scipy.linalg.cho_solve(cho, rhs, check_finite=False).T


@dataclass(frozen=True)
class KoopmanModel:
    """Identified lifted linear predictor psi+ = A psi + B u, xbar = C psi."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    basis: ObservableBasis
    lam: float
    dt: float
    fit_residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        n_psi = self.basis.n_psi
        if self.A.shape != (n_psi, n_psi):
            raise ValueError(f"A must be {n_psi}x{n_psi}, got {self.A.shape}")
        if self.B.shape[0] != n_psi or self.C.shape[1] != n_psi:
            raise ValueError("B/C dimensions inconsistent with the basis")

    @property
    def n_psi(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    @property
    def e_h_row(self) -> int:
        """Row of C selecting the barrier coordinate (the last output)."""
        return self.C.shape[0] - 1

    @property
    def barrier_row(self) -> np.ndarray:
        """e_h^T C, the lifted barrier as a linear functional of psi."""
        return self.C[self.e_h_row]


def predict(m: KoopmanModel, psi0: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Pure linear rollout; returns (T+1, n_psi) including psi0, no re-lifting."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    out = np.empty((inputs.shape[0] + 1, m.n_psi))
    out[0] = psi0
    for t, u in enumerate(inputs):
        out[t + 1] = m.A @ out[t] + m.B @ u
    return out


# (sin, cos) pairs shorter than this are treated as degenerate for atan2.
THETA_DEGENERATE_TOL = 1e-8


def reconstruct(m: KoopmanModel, psi: np.ndarray) -> tuple[AugmentedState, bool]:
    """Map a lifted state back to an augmented state.

    Position, speed and barrier come from the C rows; heading is recovered
    with atan2 from the predicted (sin, cos) coordinates. Returns the state
    and a flag marking a degenerate (sin, cos) pair near the origin, in
    which case theta is reported as 0. The h entry is the model output and
    is not recomputed from the obstacle.
    """
    xb = m.C @ psi
    s, c = float(psi[IDX_SIN]), float(psi[IDX_COS])
    degenerate = bool(np.hypot(s, c) < THETA_DEGENERATE_TOL)
    theta = 0.0 if degenerate else float(np.arctan2(s, c))
    state = State(float(xb[0]), float(xb[1]), theta, float(xb[3]))
    return AugmentedState(state, float(xb[m.e_h_row])), degenerate


def lifted_barrier(m: KoopmanModel, psi: np.ndarray) -> float:
    """Linear barrier read-out e_h^T C psi."""
    return float(m.barrier_row @ np.asarray(psi, dtype=float))


# Identified matrices are never exactly zero; below this the product is
# considered to vanish.
RELATIVE_DEGREE_TOL = 1e-8


def relative_degree(m: KoopmanModel, m_max: int, tol: float = RELATIVE_DEGREE_TOL):
    """Smallest k <= m_max with e_h^T C A^{k-1} B nonzero, else None."""
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    row = m.barrier_row.copy()
    for k in range(1, m_max + 1):
        if np.max(np.abs(row @ m.B)) > tol:
            return k
        row = row @ m.A
    return None


def prediction_error(
    m: KoopmanModel,
    true_traj: np.ndarray,
    inputs: np.ndarray,
    obs: ObstacleSpec,
) -> np.ndarray:
    """Per-step Euclidean error between true and reconstructed states.

    `true_traj` is (T+1, 4); `inputs` is (T, q). The rollout starts from the
    lift of the true initial state; the obstacle is needed to seed the
    barrier coordinate.
    """
    true_traj = np.atleast_2d(np.asarray(true_traj, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if true_traj.shape[0] != inputs.shape[0] + 1:
        raise ValueError(
            f"trajectory length {true_traj.shape[0]} does not match "
            f"{inputs.shape[0]} inputs (+1 expected)"
        )
    psi0 = lift(augment(State.from_array(true_traj[0]), obs), m.basis)
    psis = predict(m, psi0, inputs)
    errs = np.empty(true_traj.shape[0])
    for t, psi in enumerate(psis):
        aug, _ = reconstruct(m, psi)
        errs[t] = np.linalg.norm(true_traj[t] - aug.state.to_array())
    return errs


def identify(
    ranges: BoxBounds,
    n_samples: int,
    dt: float,
    seed: int,
    obs: ObstacleSpec,
    basis: ObservableBasis,
    lam: float = 1e-6,
    holdout_samples: int = 1000,
) -> KoopmanModel:
    """Full identification pipeline with recorded residual diagnostics.

    Residuals stored on the model:
      dyn_rmse          per-element RMS of Psi_next - A Psi_now - B U (train)
      out_rmse          per-row RMS of Xbar - C Psi (train), rows (x,y,th,v,h)
      holdout_out_rmse  same on fresh holdout samples
      h_err_bound       1.25 * max |htilde - h| on holdout (consistency bound)
    """
    data = generate_dataset(ranges, n_samples, dt, seed, obs, basis)
    A, B = fit_edmd(data, lam)
    C = fit_output_map(data)

    dyn_res = data.psi_next - A @ data.psi_now - B @ data.inputs
    out_res = data.aug_now - C @ data.psi_now

    hold = generate_dataset(ranges, holdout_samples, dt, seed + 7919, obs, basis)
    hold_res = hold.aug_now - C @ hold.psi_now
    h_err = np.abs(hold.psi_now.T @ C[-1] - hold.aug_now[-1])

    residuals = {
        "dyn_rmse": float(np.sqrt(np.mean(dyn_res**2))),
        "out_rmse": [float(r) for r in np.sqrt(np.mean(out_res**2, axis=1))],
        "holdout_out_rmse": [float(r) for r in np.sqrt(np.mean(hold_res**2, axis=1))],
        "h_err_bound": float(max(1.25 * np.max(h_err), 1e-9)),
        "n_samples": int(n_samples),
        "holdout_samples": int(holdout_samples),
        "seed": int(seed),
    }
    return KoopmanModel(A, B, C, basis, float(lam), float(dt), residuals)


def save_model(m: KoopmanModel, path) -> None:
    """Write a self-contained JSON model file (matrices row-major)."""
    doc = {
        "n_psi": m.n_psi,
        "q": m.q,
        "dt": m.dt,
        "lambda": m.lam,
        "A": m.A.tolist(),
        "B": m.B.tolist(),
        "C": m.C.tolist(),
        "basis": {
            "n_rbf": m.basis.n_rbf,
            "centers": m.basis.centers.tolist(),
            "widths": m.basis.widths.tolist(),
            "seed": m.basis.seed,
        },
        "fit_residuals": m.fit_residuals,
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> KoopmanModel:
    with open(path) as fh:
        doc = json.load(fh)
    basis = ObservableBasis(
        np.asarray(doc["basis"]["centers"], dtype=float),
        np.asarray(doc["basis"]["widths"], dtype=float),
        int(doc["basis"]["seed"]),
    )
    model = KoopmanModel(
        np.asarray(doc["A"], dtype=float),
        np.asarray(doc["B"], dtype=float),
        np.asarray(doc["C"], dtype=float),
        basis,
        float(doc["lambda"]),
        float(doc["dt"]),
        doc.get("fit_residuals", {}),
    )
    if model.n_psi != int(doc["n_psi"]) or model.q != int(doc["q"]):
        raise ValueError(f"model file {path} has inconsistent dimensions")
    return model


def save_dataset(d: Dataset, path) -> None:
    """Cache a dataset in flat binary form with named arrays."""
    np.savez(
        path,
        psi_now=d.psi_now,
        psi_next=d.psi_next,
        inputs=d.inputs,
        aug_now=d.aug_now,
    )


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        return Dataset(
            z["psi_now"], z["psi_next"], z["inputs"], z["aug_now"], z["psi_now"].shape[1]
        )
