"""Real spherical harmonics (degree <= 2) for view-dependent voxel color.

Coefficient layout used throughout the package and the on-disk format:
27 values per voxel, channel-major -- 9 coefficients for R, then 9 for G,
then 9 for B. Within a channel the coefficients are ordered by (l, m):
(0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
"""

from __future__ import annotations

import numpy as np

SH_DEGREE = 2
N_BASIS = 9
N_COEFFS = 3 * N_BASIS

# Real SH constants without the Condon-Shortley phase (graphics convention).
SH_C0 = 0.28209479177387814    # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199     # sqrt(3 / (4 pi))
SH_C2_0 = 1.0925484305920792   # sqrt(15 / (4 pi))
SH_C2_2 = 0.31539156525252005  # sqrt(5 / (16 pi))
SH_C2_4 = 0.5462742152960396   # sqrt(15 / (16 pi))


def normalize_dirs(v: np.ndarray) -> np.ndarray:
    """Normalize direction vectors (..., 3); raises on near-zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize zero-length direction")
    return v / n


def eval_sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 9 degree-2 basis functions at unit directions.

    Args:
        dirs: (..., 3) unit vectors.
    Returns:
        (..., 9) basis values in the fixed (l, m) order.
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (N_BASIS,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2_0 * x * y
    out[..., 5] = -SH_C2_0 * y * z
    out[..., 6] = SH_C2_2 * (2.0 * z * z - x * x - y * y)
    out[..., 7] = -SH_C2_0 * x * z
    out[..., 8] = SH_C2_4 * (x * x - y * y)
    return out


def sh_to_rgb(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Combine coefficients (..., 27) with the basis at `dirs` into rgb.

    Negative channel values are clipped to zero after the basis dot product;
    there is no upper clamp and no sigmoid, so color stays linear in the
    coefficients wherever it is positive.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape[-1] != N_COEFFS:
        raise ValueError(f"expected {N_COEFFS} coefficients, got {c.shape[-1]}")
    basis = eval_sh_basis(dirs)
    rgb = np.einsum("...b,...cb->...c", basis, c.reshape(c.shape[:-1] + (3, N_BASIS)))
    return np.maximum(rgb, 0.0)
