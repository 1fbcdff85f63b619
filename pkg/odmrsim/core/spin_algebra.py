"""
Dense complex linear algebra shared by every module.

Matrices are plain torch tensors of dtype complex128 (``ComplexMatrix``). The
spin basis is fixed once for the whole package: index 0 is |+1>, index 1 is
|0>, index 2 is |-1>.

Units: energies in MHz (h = 1), times in microseconds, fields in mT.
"""

import logging
import math
import os
from typing import List, NamedTuple, Sequence, Tuple

import torch

from odmrsim.core.exceptions import DimensionMismatch, NotHermitian, NumericalError

logger = logging.getLogger(__name__)

device = torch.device(os.environ.get("ODMR_SIM_DEVICE", "cpu"))
DTYPE = torch.complex128
RDTYPE = torch.float64

ComplexMatrix = torch.Tensor

HERMITIAN_RTOL = 1e-12

# basis labels of the spin-1 space, in index order
SPIN1_BASIS = ("+1", "0", "-1")


class SpinOps(NamedTuple):
    sx: ComplexMatrix
    sy: ComplexMatrix
    sz: ComplexMatrix
    splus: ComplexMatrix
    sminus: ComplexMatrix


def as_matrix(a) -> ComplexMatrix:
    """Convert ``a`` to a complex128 tensor on the package device."""
    return torch.as_tensor(a, dtype=DTYPE, device=device)


def _check_square(a: ComplexMatrix) -> int:
    if a.dim() < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"Expected a square matrix, got shape {tuple(a.shape)}.")
    return a.shape[-1]


def _check_same_dim(a: ComplexMatrix, b: ComplexMatrix) -> None:
    if _check_square(a) != _check_square(b):
        raise DimensionMismatch(
            f"Dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}."
        )


def identity(dim: int) -> ComplexMatrix:
    return torch.eye(dim, dtype=DTYPE, device=device)


def zeros(dim: int) -> ComplexMatrix:
    return torch.zeros((dim, dim), dtype=DTYPE, device=device)


def transfer(target: int, source: int, dim: int) -> ComplexMatrix:
    """
    Single-entry matrix |target><source|.

    :param target: Row index of the nonzero entry.
    :param source: Column index of the nonzero entry.
    :param dim: Matrix dimension.
    """
    op = zeros(dim)
    op[target, source] = 1.0
    return op


def spin1_operators() -> SpinOps:
    """
    Spin-1 operators in the {|+1>, |0>, |-1>} basis.

    :return: SpinOps with S_x, S_y, S_z and the ladder operators S_+, S_-.
    """
    r2 = math.sqrt(2.0)
    splus = as_matrix([[0.0, r2, 0.0], [0.0, 0.0, r2], [0.0, 0.0, 0.0]])
    sminus = dagger(splus)
    sx = 0.5 * (splus + sminus)
    sy = -0.5j * (splus - sminus)
    sz = as_matrix(torch.diag(torch.tensor([1.0, 0.0, -1.0], dtype=RDTYPE)))
    return SpinOps(sx=sx, sy=sy, sz=sz, splus=splus, sminus=sminus)


def dagger(a: ComplexMatrix) -> ComplexMatrix:
    return a.conj().transpose(-2, -1)


def multiply(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    _check_same_dim(a, b)
    return a @ b


def add(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    _check_same_dim(a, b)
    return a + b


def scale(a: ComplexMatrix, factor: complex) -> ComplexMatrix:
    return a * factor


def trace(a: ComplexMatrix) -> torch.Tensor:
    _check_square(a)
    return a.diagonal(dim1=-2, dim2=-1).sum(-1)


def expect(op: ComplexMatrix, rho: ComplexMatrix) -> complex:
    """Expectation value trace(op @ rho)."""
    _check_same_dim(op, rho)
    return trace(op @ rho).item()


def commutator(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    _check_same_dim(a, b)
    return a @ b - b @ a


def kron(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    """
    Kronecker product of two square matrices.

    :return: Matrix of dimension dim(a) * dim(b).
    """
    _check_square(a)
    _check_square(b)
    return torch.kron(a, b)


def kron_all(factors: Sequence[ComplexMatrix]) -> ComplexMatrix:
    out = factors[0]
    for factor in factors[1:]:
        out = kron(out, factor)
    return out


def embed(op: ComplexMatrix, position: int, dims: Sequence[int]) -> ComplexMatrix:
    """
    Embed ``op`` acting on subsystem ``position`` into the product space ``dims``.
    """
    factors = [op if i == position else identity(d) for i, d in enumerate(dims)]
    return kron_all(factors)


def max_abs(a: ComplexMatrix) -> float:
    return a.abs().max().item() if a.numel() else 0.0


def is_hermitian(a: ComplexMatrix, rtol: float = HERMITIAN_RTOL) -> bool:
    """max|A - A^dagger| <= rtol * max|A|."""
    _check_square(a)
    return max_abs(a - dagger(a)) <= rtol * max_abs(a)


def hermitian_part(a: ComplexMatrix) -> ComplexMatrix:
    return 0.5 * (a + dagger(a))


def _jacobi_rotate(
    work: ComplexMatrix, vecs: ComplexMatrix, p: int, q: int, threshold: float
) -> None:
    # zero work[p, q] with a unitary acting on columns p and q
    apq = work[p, q].item()
    g = abs(apq)
    if g <= threshold:
        return
    app = work[p, p].real.item()
    aqq = work[q, q].real.item()
    phase = (apq / g).conjugate()
    theta = (aqq - app) / (2.0 * g)
    t = math.copysign(1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0)), theta)
    c = 1.0 / math.sqrt(t * t + 1.0)
    s = t * c
    rot = torch.tensor(
        [[c, s], [-s * phase, c * phase]], dtype=DTYPE, device=work.device
    )
    idx = torch.tensor([p, q], device=work.device)
    work[:, idx] = work[:, idx] @ rot
    work[idx, :] = dagger(rot) @ work[idx, :]
    work[p, q] = 0.0
    work[q, p] = 0.0
    vecs[:, idx] = vecs[:, idx] @ rot


def eig_hermitian(
    a: ComplexMatrix, tol: float = 1e-13, max_sweeps: int = 64
) -> Tuple[torch.Tensor, ComplexMatrix]:
    """
    Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.

    Pairs whose off-diagonal element is already below threshold are skipped, so
    block-diagonal inputs are never mixed across blocks.

    :param a: Hermitian matrix.
    :param tol: Convergence threshold on the largest off-diagonal modulus,
        relative to max|A|.
    :param max_sweeps: Maximum number of cyclic sweeps.
    :return: Ascending real eigenvalues and the matrix whose columns are the
        orthonormal eigenvectors.
    :raises NotHermitian: If ``a`` fails the Hermiticity tolerance.
    """
    n = _check_square(a)
    if a.dim() != 2:
        raise DimensionMismatch("eig_hermitian expects a single matrix.")
    if not is_hermitian(a):
        raise NotHermitian(
            f"Matrix is not Hermitian: max|A - A^dagger| = {max_abs(a - dagger(a)):.3e}"
        )
    work = hermitian_part(as_matrix(a)).clone()
    vecs = identity(n)
    scale_ = max_abs(work)
    if scale_ == 0.0:
        return torch.zeros(n, dtype=RDTYPE, device=device), vecs

    threshold = tol * scale_
    for sweep in range(max_sweeps):
        upper = torch.triu(work.abs(), diagonal=1)
        if upper.max().item() <= threshold:
            break
        pairs: List[List[int]] = torch.nonzero(upper > threshold).tolist()
        for p, q in pairs:
            _jacobi_rotate(work, vecs, p, q, threshold)
    else:
        raise NumericalError(f"Jacobi iteration did not converge in {max_sweeps} sweeps.")
    logger.debug("Jacobi converged after %d sweeps (dim %d)", sweep, n)

    evals = work.diagonal().real
    order = torch.argsort(evals)
    return evals[order].clone(), vecs[:, order].clone()
