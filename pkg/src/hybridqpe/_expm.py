"""Batched matrix exponential via Pade scaling-and-squaring.

GRAPE evaluates hundreds of step propagators exp(dt * L) per iteration,
all of the same small dimension.  Calling a general-purpose expm in a
Python loop is overhead-bound at these sizes, so this module implements
the classic Higham order-13 scaling-and-squaring scheme (with the lower
-order short-cuts for small norms) vectorized over a leading batch axis.

The order and the scaling power are chosen once from the largest 1-norm
in the batch; correctness is independent of that choice, it only costs
a few extra squarings for the small members.  Liouvillians are non-normal,
which rules out eigendecomposition-based shortcuts.
"""

from __future__ import annotations

import numpy as np

__all__ = ["expm"]

# Order thresholds theta_m from Higham, "The scaling and squaring method
# for the matrix exponential revisited" (2005).
_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}

_B = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
         960960.0, 16380.0, 182.0, 1.0),
}


def _pade_uv(a: np.ndarray, order: int):
    """Return (U, V) of the [order/order] Pade approximant, batched."""
    b = _B[order]
    n = a.shape[-1]
    ident = np.broadcast_to(np.eye(n, dtype=a.dtype), a.shape).copy()
    a2 = a @ a
    if order == 13:
        a4 = a2 @ a2
        a6 = a2 @ a4
        u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
        v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
             + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
        return u, v
    powers = [ident, a2]
    for _ in range((order - 3) // 2):
        powers.append(powers[-1] @ a2)
    u_poly = sum(b[2 * k + 1] * powers[k] for k in range(len(powers)))
    v = sum(b[2 * k] * powers[k] for k in range(len(powers)))
    return a @ u_poly, v


def expm(a: np.ndarray) -> np.ndarray:
    """exp(a) for a single matrix or a (..., n, n) batch."""
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite entries in expm input")
    a = a.astype(complex, copy=False)

    norm = np.max(np.abs(a).sum(axis=-2)) if a.size else 0.0
    squarings = 0
    order = 13
    for m in (3, 5, 7, 9):
        if norm <= _THETA[m]:
            order = m
            break
    else:
        if norm > _THETA[13]:
            squarings = max(0, int(np.ceil(np.log2(norm / _THETA[13]))))
            a = a / (2.0 ** squarings)

    u, v = _pade_uv(a, order)
    result = np.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        result = result @ result
    return result
