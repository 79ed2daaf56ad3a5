"""Finite-dimensional state algebra: SWAP test, trace products, fidelity bounds.

Includes an explicit controlled-SWAP circuit simulator (small ``d`` only) that
serves as an independent check on the closed-form SWAP-test probabilities.
"""
from __future__ import annotations

import numpy as np

MAX_DIM = 32
CSWAP_MAX_DIM = 8

_HERM_TOL = 1e-12
_TRACE_TOL = 1e-12
_PSD_TOL = -1e-10
_NORM_TOL = 1e-12


class StateError(ValueError):
    """Invalid state, unitary, or incompatible dimensions."""


def as_density_matrix(rho) -> np.ndarray:
    """Validate and return ``rho`` as a complex array; does not repair it."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise StateError(f"density matrix must be square, got shape {rho.shape}")
    d = rho.shape[0]
    if d > MAX_DIM:
        raise StateError(f"dimension {d} exceeds cap {MAX_DIM}")
    if np.max(np.abs(rho - rho.conj().T)) > _HERM_TOL:
        raise StateError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > _TRACE_TOL:
        raise StateError(f"density matrix trace is {np.trace(rho).real}, expected 1")
    if np.min(np.linalg.eigvalsh(rho)) < _PSD_TOL:
        raise StateError("density matrix has a negative eigenvalue")
    return rho


def as_pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    if psi.ndim != 1:
        raise StateError("pure state must be a vector")
    if psi.size > MAX_DIM:
        raise StateError(f"dimension {psi.size} exceeds cap {MAX_DIM}")
    if abs(np.linalg.norm(psi) - 1.0) > _NORM_TOL:
        raise StateError("pure state is not normalized")
    return psi


def as_unitary(u) -> np.ndarray:
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise StateError("unitary must be square")
    if np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) > 1e-12:
        raise StateError("matrix is not unitary")
    return u


def _same_dim(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise StateError(f"dimension mismatch: {a.shape} vs {b.shape}")


def projector(psi) -> np.ndarray:
    psi = as_pure_state(psi)
    return np.outer(psi, psi.conj())


# ---------------------------------------------------------------------------
# Random test ensembles


def random_pure_state(d: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=d) + 1j * rng.normal(size=d)
    return v / np.linalg.norm(v)


def random_density_matrix(d: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Ginibre ensemble: G G^dag / Tr(G G^dag)."""
    k = d if rank is None else rank
    g = rng.normal(size=(d, k)) + 1j * rng.normal(size=(d, k))
    rho = g @ g.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def random_unitary(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar unitary from the QR decomposition of a Ginibre matrix."""
    g = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(2.0)
    q, r = np.linalg.qr(g)
    ph = np.diagonal(r) / np.abs(np.diagonal(r))
    return q * ph


# ---------------------------------------------------------------------------
# SWAP test


def swap_test_probs(phi, psi) -> tuple[float, float]:
    phi, psi = as_pure_state(phi), as_pure_state(psi)
    _same_dim(phi, psi)
    ov = abs(np.vdot(phi, psi)) ** 2
    return 0.5 * (1.0 + ov), 0.5 * (1.0 - ov)


def simulate_cswap(phi, psi, max_dim: int = CSWAP_MAX_DIM) -> tuple[float, float]:
    """Run H . cSWAP . H on |0>|phi>|psi> as explicit matrices and read the control.

    The full ``2 d^2`` operator is built, so this is only for small ``d``.
    """
    phi, psi = as_pure_state(phi), as_pure_state(psi)
    _same_dim(phi, psi)
    d = phi.size
    if d > max_dim:
        raise StateError(f"c-SWAP oracle limited to d <= {max_dim}, got {d}")
    n = d * d
    swap = np.zeros((n, n))
    for i in range(d):
        for j in range(d):
            swap[j * d + i, i * d + j] = 1.0
    h = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
    p0 = np.diag([1.0, 0.0])
    p1 = np.diag([0.0, 1.0])
    h_full = np.kron(h, np.eye(n))
    cswap = np.kron(p0, np.eye(n)) + np.kron(p1, swap)
    state = np.kron(np.array([1.0, 0.0]), np.kron(phi, psi))
    out = h_full @ (cswap @ (h_full @ state))
    prob0 = float(np.sum(np.abs(out[:n]) ** 2))
    prob1 = float(np.sum(np.abs(out[n:]) ** 2))
    return prob0, prob1


def mixed_swap_test_probs(rho1, rho2) -> tuple[float, float]:
    t = trace_product(rho1, rho2)
    return 0.5 * (1.0 + t), 0.5 * (1.0 - t)


def overlap_from_swap(p0: float, p1: float) -> float:
    """(P0 - P1) / (P0 + P1): |<phi|psi>|^2 for pure inputs, Tr(rho1 rho2) for mixed."""
    return (p0 - p1) / (p0 + p1)


# ---------------------------------------------------------------------------
# Trace products, entropy, fidelity


def trace_product(rho1, rho2) -> float:
    rho1, rho2 = as_density_matrix(rho1), as_density_matrix(rho2)
    _same_dim(rho1, rho2)
    val = np.trace(rho1 @ rho2)
    if abs(val.imag) > 1e-12:
        raise StateError(f"trace product has imaginary part {val.imag}")
    return float(val.real)


def purity(rho) -> float:
    return trace_product(rho, rho)


def linear_entropy(rho) -> float:
    return 1.0 - purity(rho)


def _psd_factor(rho: np.ndarray) -> np.ndarray:
    """A with rho = A A^dag, dropping eigenvalues at the rounding-noise level."""
    w, v = np.linalg.eigh(rho)
    keep = w > 1e-14 * max(w[-1], 1e-300) * rho.shape[0]
    return v[:, keep] * np.sqrt(w[keep])


def uhlmann_fidelity(rho1, rho2) -> float:
    """Root fidelity Tr sqrt(sqrt(rho1) rho2 sqrt(rho1)), computed as the nuclear norm of A1^dag A2."""
    rho1, rho2 = as_density_matrix(rho1), as_density_matrix(rho2)
    _same_dim(rho1, rho2)
    a1, a2 = _psd_factor(rho1), _psd_factor(rho2)
    return float(np.sum(np.linalg.svd(a1.conj().T @ a2, compute_uv=False)))


def fidelity_bounds(rho1, rho2) -> tuple[float, float]:
    """Lower and upper bounds on the squared fidelity from purity-type quantities."""
    lower = trace_product(rho1, rho2)
    s1, s2 = linear_entropy(rho1), linear_entropy(rho2)
    return lower, lower + float(np.sqrt(max(s1, 0.0) * max(s2, 0.0)))


def modulated_trace_product(u1, u2, rho1, rho2) -> float:
    """Tr(U1 rho1 U1^dag  U2 rho2 U2^dag)."""
    u1, u2 = as_unitary(u1), as_unitary(u2)
    rho1, rho2 = as_density_matrix(rho1), as_density_matrix(rho2)
    _same_dim(u1, rho1)
    _same_dim(u2, rho2)
    a = u1 @ rho1 @ u1.conj().T
    b = u2 @ rho2 @ u2.conj().T
    return float(np.trace(a @ b).real)


def relative_modulation_trace(u1, u2, rho1, rho2) -> float:
    """Same quantity in the single-unitary form Tr(U rho1 U^dag rho2), U = U2^dag U1."""
    u = as_unitary(u2).conj().T @ as_unitary(u1)
    rho1, rho2 = as_density_matrix(rho1), as_density_matrix(rho2)
    return float(np.trace(u @ rho1 @ u.conj().T @ rho2).real)


def tensor_embed(signal, other) -> np.ndarray:
    """Product state of the encoded degree of freedom and everything else."""
    signal, other = as_density_matrix(signal), as_density_matrix(other)
    if signal.shape[0] * other.shape[0] > MAX_DIM:
        raise StateError("embedded dimension exceeds cap")
    return np.kron(signal, other)


def project_signal(rho_full, signal_dim: int, basis_vector) -> tuple[float, np.ndarray]:
    """Apply |z><z| on the signal factor; return (probability, normalized other-DOF state)."""
    rho_full = np.asarray(rho_full, dtype=complex)
    d_other = rho_full.shape[0] // signal_dim
    z = as_pure_state(basis_vector)
    proj = np.kron(np.outer(z, z.conj()), np.eye(d_other))
    post = proj @ rho_full @ proj
    prob = float(np.trace(post).real)
    reduced = post.reshape(signal_dim, d_other, signal_dim, d_other).trace(axis1=0, axis2=2)
    if prob <= 0:
        return 0.0, reduced
    return prob, reduced / prob


def search_modulation_counterexample(d: int, n_trials: int, rng: np.random.Generator) -> dict:
    """Look for Tr(U rho1 U^dag rho2) > Tr(rho1 rho2) with rho1 != rho2.

    The inequality holds for identically sourced states but is not universal;
    this reports the worst excess found rather than assuming it.
    """
    worst, example = -np.inf, None
    for _ in range(n_trials):
        r1, r2 = random_density_matrix(d, rng), random_density_matrix(d, rng)
        u = random_unitary(d, rng)
        excess = relative_modulation_trace(u, np.eye(d), r1, r2) - trace_product(r1, r2)
        if excess > worst:
            worst, example = excess, (r1, r2, u)
    return {"max_excess": float(worst), "violated": bool(worst > 1e-10), "example": example}
