"""Separable Dirichlet-Laplacian eigenbases on the square and the scale interval.

Spatial modes are ``psi_{p,q}(u1, u2) = s_p(u1) s_q(u2)`` with
``s_p(w) = sin(p*pi*(w + 1)/2)`` on ``[-1, 1]`` (zero outside), eigenvalue
``(pi/2)^2 (p^2 + q^2)``. ``u1`` runs along array rows, ``u2`` along columns.

Filters live on a fixed ``L x L`` tap grid in pixel units: tap ``i`` sits at
offset ``i - (L-1)/2``, i.e. at the cell centres of the window
``[-L/2, L/2]^2``. At scale ``alpha`` the mode is stretched to the support
``2^(j+alpha) * [-1, 1]^2`` and multiplied by ``2^(-2(j+alpha))``, so a plain
sum over taps approximates the integral over pixels.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError

SAMPLINGS = ("point", "area")


@dataclass(frozen=True)
class ScaleGrid:
    """Uniform endpoint-inclusive grid on the truncated interval ``[-T, T]``."""

    T: float
    N_s: int

    def __post_init__(self):
        if self.N_s < 1:
            raise ConfigurationError(f"N_s must be >= 1, got {self.N_s}")
        if not self.T > 0:
            raise ConfigurationError(f"T must be > 0, got {self.T}")

    @property
    def delta(self):
        return 2.0 * self.T / (self.N_s - 1) if self.N_s > 1 else 2.0 * self.T

    @property
    def values(self):
        if self.N_s == 1:
            return np.zeros(1)
        return np.linspace(-self.T, self.T, self.N_s)

    @classmethod
    def from_spacing(cls, T, delta):
        """Grid on ``[-T, T]`` with a fixed spacing; ``2T/delta`` must be an integer."""
        n = 2.0 * T / delta
        if abs(n - round(n)) > 1e-9:
            raise ConfigurationError(f"2T/delta = {n} is not an integer")
        return cls(T, int(round(n)) + 1)


@lru_cache(maxsize=None)
def dirichlet_modes(K):
    """First ``K`` index pairs ``(p, q)`` ordered by eigenvalue, then ``p``, then ``q``."""
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    n = K + 1
    pairs = [(p, q) for p in range(1, n + 1) for q in range(1, n + 1)]
    pairs.sort(key=lambda pq: (pq[0] ** 2 + pq[1] ** 2, pq[0], pq[1]))
    return tuple(pairs[:K])


def spatial_eigenvalues(K):
    return np.array([(np.pi / 2) ** 2 * (p * p + q * q) for p, q in dirichlet_modes(K)])


def eigenvalue_of(k):
    """Eigenvalue ``mu_k`` of the ``k``-th mode, ``k`` counted from 1."""
    if int(k) != k or k < 1:
        raise IndexError(f"mode index must be a positive integer, got {k}")
    return float(spatial_eigenvalues(int(k))[-1])


def sine_mode(p, w):
    """``s_p(w)``; zero outside ``[-1, 1]``."""
    w = np.asarray(w, dtype=np.float64)
    return np.where(np.abs(w) <= 1.0, np.sin(p * np.pi * (w + 1.0) / 2.0), 0.0)


def sine_mode_deriv(p, w):
    w = np.asarray(w, dtype=np.float64)
    return np.where(np.abs(w) <= 1.0, (p * np.pi / 2.0) * np.cos(p * np.pi * (w + 1.0) / 2.0), 0.0)


def sine_mode_integral(p, a, b):
    """``int_a^b s_p(w) dw`` with the integrand clipped to ``[-1, 1]``."""
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), -1.0, 1.0)

    def prim(w):
        return -2.0 / (p * np.pi) * np.cos(p * np.pi * (w + 1.0) / 2.0)

    return np.where(b > a, prim(b) - prim(a), 0.0)


def tap_offsets(L):
    return np.arange(L, dtype=np.float64) - (L - 1) / 2.0


def default_support_exponent(L, scale_grid):
    """``j`` such that the coarsest scale's support exactly fills the window."""
    return float(np.log2(L / 2.0) - scale_grid.values.max())


@dataclass(frozen=True, eq=False)
class SpatialBasis:
    K: int
    L: int
    j: float
    modes: tuple
    eigenvalues: np.ndarray
    offsets: np.ndarray      # tap offsets in pixels
    grid: np.ndarray         # offsets normalised to the window, in (-1, 1)
    scale_grid: ScaleGrid
    sampling: str
    samples: np.ndarray      # [K, N_s, L, L]
    factors: np.ndarray      # [n_max, N_s, L]; samples[k, s] = outer(factors[p-1, s], factors[q-1, s])
    dc: np.ndarray           # [n_max, N_s]; tap sum of each factor, in closed form for area sampling


def _axis_taps(p, offsets, s, sampling):
    # per-axis factor of 2^-s * s_p(2^-s u); the product of two gives 2^-2s
    if sampling == "point":
        return 2.0 ** (-s) * sine_mode(p, offsets * 2.0 ** (-s))
    lo = (offsets - 0.5) * 2.0 ** (-s)
    hi = (offsets + 0.5) * 2.0 ** (-s)
    return sine_mode_integral(p, lo, hi)


def _axis_dc(p, L, s, taps, sampling):
    # area cells tile the window, so their sum is the window integral; it is
    # the same number at every scale whose support fits inside the window
    if sampling == "point":
        return float(taps.sum())
    return float(sine_mode_integral(p, -L / 2.0 * 2.0 ** (-s), L / 2.0 * 2.0 ** (-s)))


def make_spatial_basis(K, L, scale_grid, j=None, sampling="point"):
    """Sample the ``K`` lowest modes at every scale of ``scale_grid``.

    ``sampling="point"`` evaluates ``2^(-2s) psi_k(2^(-s) u)`` at the tap centres
    (``s = j + alpha``). ``sampling="area"`` integrates the same function over
    each unit pixel cell instead, which stays a faithful discretisation when the
    support shrinks below a pixel.
    """
    if L < 1:
        raise ConfigurationError(f"L must be >= 1, got {L}")
    if sampling not in SAMPLINGS:
        raise ConfigurationError(f"sampling must be one of {SAMPLINGS}, got {sampling!r}")
    if j is None:
        j = default_support_exponent(L, scale_grid)
    modes = dirichlet_modes(K)
    offsets = tap_offsets(L)
    alphas = scale_grid.values
    n_max = max(max(pq) for pq in modes)
    factors = np.empty((n_max, len(alphas), L))
    dc = np.empty((n_max, len(alphas)))
    for p in range(1, n_max + 1):
        for n, alpha in enumerate(alphas):
            factors[p - 1, n] = _axis_taps(p, offsets, j + alpha, sampling)
            dc[p - 1, n] = _axis_dc(p, L, j + alpha, factors[p - 1, n], sampling)
    samples = np.empty((K, len(alphas), L, L))
    for k, (p, q) in enumerate(modes):
        for n in range(len(alphas)):
            samples[k, n] = np.outer(factors[p - 1, n], factors[q - 1, n])
    samples.setflags(write=False)
    factors.setflags(write=False)
    dc.setflags(write=False)
    return SpatialBasis(K=K, L=L, j=float(j), modes=modes, eigenvalues=spatial_eigenvalues(K),
                        offsets=offsets, grid=offsets / (L / 2.0), scale_grid=scale_grid,
                        sampling=sampling, samples=samples, factors=factors, dc=dc)


@dataclass(frozen=True, eq=False)
class ScaleBasis:
    K_alpha: int
    L_alpha: int
    grid: np.ndarray         # sample points in (-1, 1), cell centred
    eigenvalues: np.ndarray
    samples: np.ndarray      # [K_alpha, L_alpha]


def make_scale_basis(K_alpha, L_alpha):
    """``phi_m(t) = sin(m*pi*(t+1)/2)`` at the ``L_alpha`` cell centres of ``[-1, 1]``."""
    if K_alpha < 1 or L_alpha < 1:
        raise ConfigurationError("K_alpha and L_alpha must be >= 1")
    t = -1.0 + (np.arange(L_alpha) + 0.5) * 2.0 / L_alpha
    m = np.arange(1, K_alpha + 1)
    samples = np.sin(m[:, None] * np.pi * (t[None, :] + 1.0) / 2.0)
    samples.setflags(write=False)
    return ScaleBasis(K_alpha=K_alpha, L_alpha=L_alpha, grid=t,
                      eigenvalues=(m * np.pi / 2.0) ** 2, samples=samples)


def unit_mode_values(K, u1, u2):
    """``psi_k`` and its gradient on the canonical square at points ``(u1, u2)``.

    Returns ``(values[K, ...], d_u1[K, ...], d_u2[K, ...])``.
    """
    vals, g1, g2 = [], [], []
    for p, q in dirichlet_modes(K):
        a, b = sine_mode(p, u1), sine_mode(q, u2)
        vals.append(a * b)
        g1.append(sine_mode_deriv(p, u1) * b)
        g2.append(a * sine_mode_deriv(q, u2))
    return np.array(vals), np.array(g1), np.array(g2)
