"""Dense float64 kernels, a deterministic RNG, and text serialization.

Conventions used package-wide:

* ``Vector`` is a 1-D ``numpy.float64`` array, ``Matrix`` a 2-D one stored
  row-major (C order).  Every signal and weight in the package lives in one
  of the two.
* All arithmetic is double precision; there is no float32 path.  Gradient
  verification needs ~1e-6 relative agreement, which float32 cannot supply.
* Public kernels reject shape mismatches with :class:`ShapeError` naming
  both shapes, and never emit NaN/Inf for finite input.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

Vector = np.ndarray
Matrix = np.ndarray

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


def as_vector(x) -> Vector:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def as_matrix(a) -> Matrix:
    m = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite entries in {name}")
    return arr


def matvec(a: Matrix, x: Vector) -> Vector:
    """Matrix-vector product ``y_j = sum_k a_jk x_k``."""
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError(
            f"matvec shape mismatch: matrix {a.shape} vs vector {x.shape}"
        )
    return a @ x


def outer(u: Vector, v: Vector) -> Matrix:
    """Rank-one matrix ``M_jk = u_j v_k``."""
    return np.outer(u, v)


def hadamard(u: Vector, v: Vector) -> Vector:
    """Element-wise product of two equal-length vectors."""
    if u.shape != v.shape:
        raise ShapeError(f"hadamard shape mismatch: {u.shape} vs {v.shape}")
    return u * v


def tanh_vec(x: Vector) -> Vector:
    return np.tanh(x)


def sigmoid_vec(x: Vector) -> Vector:
    """Element-wise logistic function, computed without overflow for any x.

    Preserves a floating input dtype (the finite-difference oracle runs the
    forward pass in extended precision); everything else computes in fp64.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def spectral_radius(
    a: Matrix,
    tol: float = 1e-10,
    max_iter: int = 2000,
    restarts: int = 3,
    rng: "Rng | None" = None,
) -> tuple[float, bool]:
    """Estimate max |eigenvalue| of a square matrix by power iteration.

    Block (orthogonal) iteration with a small subspace and Ritz values from
    the projected matrix, so dominant complex-conjugate pairs — even two
    pairs of nearly equal modulus — still converge in magnitude; random
    restarts guard against unlucky starting subspaces.  Exactly diagonal
    input short-circuits to max |diagonal|.

    Returns ``(estimate, converged)``.  On non-convergence the best estimate
    seen is still returned, flagged False.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"spectral_radius needs a square matrix, got {a.shape}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    n = a.shape[0]
    if n == 0:
        return 0.0, True
    if np.count_nonzero(a - np.diag(np.diagonal(a))) == 0:
        return float(np.max(np.abs(np.diagonal(a)))), True
    rng = rng if rng is not None else Rng(0x5EED)

    best = 0.0
    k = min(6, n)
    for _ in range(max(1, restarts)):
        q, _ = np.linalg.qr(rng.normal_array((n, k)))
        est_prev = math.inf
        for _ in range(max_iter):
            w = a @ q
            q, _ = np.linalg.qr(w)
            b = q.T @ (a @ q)
            est = float(np.max(np.abs(np.linalg.eigvals(b))))
            if abs(est - est_prev) <= tol * max(est, 1.0):
                return est, True
            est_prev = est
        best = max(best, est_prev)
    return float(best), False


# ---------------------------------------------------------------------------
# Deterministic random number generation
# ---------------------------------------------------------------------------


def _splitmix64(s: int) -> tuple[int, int]:
    s = (s + 0x9E3779B97F4A7C15) & _MASK64
    z = s
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return s, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator with splitmix64 seeding.

    The algorithm is fixed: a given seed yields the identical stream on any
    platform and any numpy version, which is what makes every experiment in
    the package bit-reproducible.  State is four 64-bit words (256 bits).
    Instances are single-owner: never share one across threads.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s, word = _splitmix64(s)
            state.append(word)
        self._s = state
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * self.random()

    def normal(self) -> float:
        """Standard normal via Box-Muller (pairs cached)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        while True:
            u1 = self.random()
            if u1 > 0.0:
                break
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n).  Modulo bias is < n / 2^64."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        flat = np.array(
            [self.uniform(lo, hi) for _ in range(int(np.prod(shape)))],
            dtype=np.float64,
        )
        return flat.reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        flat = np.array(
            [self.normal() for _ in range(int(np.prod(shape)))], dtype=np.float64
        )
        return flat.reshape(shape)

    def spawn(self, tag: str) -> "Rng":
        """Child generator keyed by the construction seed and a string tag.

        Independent of how many draws this generator has made, so fan-out
        is order-insensitive.
        """
        return Rng(derive_seed(self.seed, tag))


def derive_seed(root_seed: int, tag: str) -> int:
    """Stable 64-bit child seed from a root seed and a string tag.

    The rule is sha256 of the decimal root seed, a colon, and the tag;
    the first 8 digest bytes are read big-endian.
    """
    digest = hashlib.sha256(f"{root_seed & _MASK64}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Text serialization
# ---------------------------------------------------------------------------
#
# Matrices serialize as a "rows cols" line followed by one line per row of
# space-separated decimals with 17 significant digits (round-trip exact for
# float64).  Vectors serialize as a single "len" line plus one value line.


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def format_matrix(a: Matrix) -> str:
    a = as_matrix(a)
    check_finite("matrix", a)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    for row in a:
        lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines)


def format_vector(v: Vector) -> str:
    v = as_vector(v)
    check_finite("vector", v)
    body = " ".join(_fmt(x) for x in v)
    return f"{v.shape[0]}\n{body}" if v.shape[0] else "0\n"


def parse_matrix(text: str) -> Matrix:
    lines = [ln for ln in text.strip().splitlines()]
    rows, cols = (int(tok) for tok in lines[0].split())
    if len(lines) - 1 != rows:
        raise ValueError(f"expected {rows} data rows, found {len(lines) - 1}")
    data = np.array(
        [[float(tok) for tok in ln.split()] for ln in lines[1:]], dtype=np.float64
    ).reshape(rows, cols) if rows else np.zeros((0, cols))
    if rows and data.shape != (rows, cols):
        raise ValueError(f"row width mismatch parsing {rows}x{cols} matrix")
    return check_finite("matrix", data)


def parse_vector(text: str) -> Vector:
    lines = text.strip().splitlines()
    n = int(lines[0])
    vals = [float(tok) for tok in lines[1].split()] if n else []
    if len(vals) != n:
        raise ValueError(f"expected {n} values, found {len(vals)}")
    return check_finite("vector", np.array(vals, dtype=np.float64))


def write_sections(header: dict[str, str], sections) -> str:
    """Serialize a parameter bundle: ``key=value`` header lines, then named
    sections each holding one matrix or vector block."""
    lines = []
    if header:
        lines.append(" ".join(f"{k}={v}" for k, v in header.items()))
    for name, arr in sections:
        lines.append(name)
        lines.append(format_matrix(arr) if arr.ndim == 2 else format_vector(arr))
    return "\n".join(lines) + "\n"


def read_sections(text: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Inverse of :func:`write_sections`."""
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    if lines and "=" in lines[0]:
        for item in lines[0].split():
            k, _, v = item.partition("=")
            header[k] = v
        i = 1
    sections: dict[str, np.ndarray] = {}
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        dims = lines[i + 1].split()
        if len(dims) == 2:
            rows = int(dims[0])
            block = lines[i + 1 : i + 2 + rows]
            sections[name] = parse_matrix("\n".join(block))
            i += 2 + rows
        else:
            block = lines[i + 1 : i + 3]
            sections[name] = parse_vector("\n".join(block))
            i += 3
    return header, sections
