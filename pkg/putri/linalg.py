# Copyright 2024 Tarkan Al-Kazily
"""
Dense matrix kernels.

A Matrix is a 2-D row-major torch tensor stored in float32. Every reduction (products, Gram
matrices, Cholesky) runs in float64 and is cast back to float32 storage on output.
"""

import dataclasses
import logging
import typing

import torch

from putri.errors import NonFiniteError, ShapeError, SingularSystemError

logger = logging.getLogger(__name__)

Matrix = torch.Tensor

STORAGE_DTYPE = torch.float32
ACCUM_DTYPE = torch.float64

MAX_ESCALATIONS = 6
ESCALATION_FACTOR = 10.0
RELATIVE_RIDGE_START = 1e-8
RIDGE_FLOOR = 1e-12
PIVOT_TOLERANCE = 1e-12


def matrix(rows: typing.Sequence[typing.Sequence[float]] | torch.Tensor) -> Matrix:
    """
    Build a Matrix from nested rows (or an existing tensor).

    Raises:
        ShapeError: Input is not 2-D.
        NonFiniteError: Input holds NaN or Inf.

    Returns:
        float32 contiguous 2-D tensor
    """
    result = torch.as_tensor(rows, dtype=STORAGE_DTYPE)
    if result.dim() != 2:
        raise ShapeError(f"Matrix must be 2-D, got shape {tuple(result.shape)}")
    check_finite(result)
    return result.contiguous()


def check_finite(x: torch.Tensor, name: str = "matrix"):
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{name} with shape {tuple(x.shape)} holds NaN or Inf")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product with float64 accumulation.

    Raises:
        ShapeError: a.cols != b.rows
    """
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"Cannot multiply {tuple(a.shape)} by {tuple(b.shape)}: inner dimensions differ"
        )
    return (a.to(ACCUM_DTYPE) @ b.to(ACCUM_DTYPE)).to(STORAGE_DTYPE)


def column_sq_norms(x: Matrix) -> torch.Tensor:
    """
    Returns:
        float64 vector with result[j] = sum_i x[i, j]^2
    """
    if x.dim() != 2 or x.shape[0] == 0:
        raise ShapeError(f"column_sq_norms needs a nonempty 2-D input, got {tuple(x.shape)}")
    x64 = x.to(ACCUM_DTYPE)
    return (x64 * x64).sum(dim=0)


def squared_residual(xp: torch.Tensor, weights: torch.Tensor, target: torch.Tensor) -> float:
    """
    Returns:
        ||xp @ weights - target||_F^2 evaluated in float64
    """
    diff = xp.to(ACCUM_DTYPE) @ weights.to(ACCUM_DTYPE) - target.to(ACCUM_DTYPE)
    return float((diff * diff).sum())


@dataclasses.dataclass(frozen=True)
class RidgeSolution:
    """
    Result of a regularized normal-equation solve.

    Attributes:
        weights: Solution in float32 storage, shape (P, M2)
        ridge: Ridge value of the successful factorization
        escalations: How many times the ridge was escalated (0 when the first attempt worked)
    """

    weights: Matrix
    ridge: float
    escalations: int


def _factorize(gram: torch.Tensor, ridge: float) -> torch.Tensor | None:
    system = gram + ridge * torch.eye(gram.shape[0], dtype=ACCUM_DTYPE)
    factor, info = torch.linalg.cholesky_ex(system)
    if int(info) != 0 or not bool(torch.isfinite(factor).all()):
        return None
    pivots = torch.diagonal(factor) ** 2
    scale = float(torch.diagonal(system).max())
    if scale <= 0.0 or float(pivots.min()) <= PIVOT_TOLERANCE * scale:
        return None
    return factor


def cholesky_solve(gram: torch.Tensor, rhs: torch.Tensor, ridge: float = 0.0) -> RidgeSolution:
    """
    Solve (gram + ridge * I) W = rhs by Cholesky factorization in float64.

    When the factorization fails (not positive definite, or a numerically vanishing pivot) the
    ridge restarts from max(ridge, 1e-8 * mean(diag(gram))) and grows by 10x for up to six
    attempts.

    Args:
        gram: Symmetric (P, P) matrix
        rhs: (P, M2) right hand side
        ridge: Initial ridge, >= 0

    Raises:
        SingularSystemError: Every escalation failed.
    """
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    gram = gram.to(ACCUM_DTYPE)
    rhs = rhs.to(ACCUM_DTYPE)
    size = gram.shape[0]
    if size == 0:
        return RidgeSolution(
            torch.zeros((0, rhs.shape[1]), dtype=STORAGE_DTYPE), ridge, 0
        )

    current = ridge
    factor = _factorize(gram, current)
    escalations = 0
    if factor is None:
        mean_diag = float(torch.diagonal(gram).mean())
        current = max(ridge, RELATIVE_RIDGE_START * mean_diag)
        if current <= 0.0:
            current = RIDGE_FLOOR
        while escalations < MAX_ESCALATIONS:
            escalations += 1
            factor = _factorize(gram, current)
            if factor is not None:
                break
            current *= ESCALATION_FACTOR
        if factor is None:
            raise SingularSystemError(
                f"Normal equations of size {size} stayed singular after "
                f"{MAX_ESCALATIONS} ridge escalations",
                ridge=current / ESCALATION_FACTOR,
            )
        logger.warning(
            "Gram matrix of size %d needed ridge %.3g after %d escalations",
            size,
            current,
            escalations,
        )

    solution = torch.cholesky_solve(rhs, factor)
    return RidgeSolution(solution.to(STORAGE_DTYPE), current, escalations)


def solve_normal_equations_info(
    xp: Matrix, target: Matrix, ridge: float = 0.0
) -> RidgeSolution:
    """
    Least squares fit of target by xp, returning the solve bookkeeping alongside the weights.

    Raises:
        ShapeError: Row counts differ.
        SingularSystemError: See cholesky_solve.
    """
    if xp.dim() != 2 or target.dim() != 2 or xp.shape[0] != target.shape[0]:
        raise ShapeError(
            f"Normal equations need matching rows, got {tuple(xp.shape)} and {tuple(target.shape)}"
        )
    check_finite(xp, "xp")
    check_finite(target, "target")
    xp64 = xp.to(ACCUM_DTYPE)
    gram = xp64.T @ xp64
    rhs = xp64.T @ target.to(ACCUM_DTYPE)
    return cholesky_solve(gram, rhs, ridge)


def solve_normal_equations(xp: Matrix, target: Matrix, ridge: float = 0.0) -> Matrix:
    """
    Returns the minimizer of ||xp W - target||^2 (+ ridge ||W||^2), i.e.

        W = (xp^T xp + ridge I)^-1 xp^T target

    Args:
        xp: (N, P) inputs of the kept nodes
        target: (N, M2) reconstruction target
        ridge: Initial regularizer, escalated on singular systems

    Returns:
        (P, M2) Matrix
    """
    return solve_normal_equations_info(xp, target, ridge).weights
