"""Expansion coefficients, filter synthesis and the regularity norms ``A, B, C, D``."""
from dataclasses import dataclass, replace

import numpy as np

from .basis import spatial_eigenvalues, unit_mode_values
from .errors import ConfigurationError, DimensionError


@dataclass(eq=False)
class CoefficientBlock:
    """Coefficients of one layer.

    ``a`` is ``[M_in, M_out, K]`` for the first layer and
    ``[M_in, M_out, K, K_alpha]`` for joint layers; ``b`` is ``[M_out]``;
    ``j`` is the physical support exponent used for bound evaluation.
    """

    layer: int
    a: np.ndarray
    b: np.ndarray
    j: float = 0.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        expected = 3 if self.layer == 1 else 4
        if self.a.ndim != expected:
            raise DimensionError(f"layer {self.layer} coefficients need ndim={expected}, got {self.a.ndim}")
        if self.b.shape != (self.a.shape[1],):
            raise DimensionError(f"bias axis: expected ({self.a.shape[1]},), got {self.b.shape}")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ConfigurationError("coefficients must be finite")

    @property
    def M_in(self):
        return self.a.shape[0]

    @property
    def M_out(self):
        return self.a.shape[1]

    @property
    def K(self):
        return self.a.shape[2]

    @property
    def K_alpha(self):
        return 1 if self.layer == 1 else self.a.shape[3]

    def _as4(self):
        return self.a[..., None] if self.layer == 1 else self.a


@dataclass(frozen=True)
class RegularityReport:
    A: float
    B: float
    C: float
    D: float
    j: float

    def inequalities_hold(self, tol=1e-3):
        return (self.B <= self.A + tol and self.C <= self.A + tol
                and 2.0 ** self.j * self.D <= self.A + tol)


def synthesize_filters(block, spatial, scale=None):
    """Discrete filters from coefficients.

    First layer: ``[M_in, M_out, N_s, L, L]``. Joint layers:
    ``[M_in, M_out, N_s, L_alpha, L, L]``.
    """
    if spatial.K != block.K:
        raise DimensionError(f"K axis: block has {block.K}, basis has {spatial.K}")
    psi = spatial.samples
    if block.layer == 1:
        return np.einsum("iok,ksxy->iosxy", block.a, psi)
    if scale is None or scale.K_alpha != block.K_alpha:
        raise DimensionError("K_alpha axis: scale basis missing or mismatched")
    return np.einsum("iokm,ksxy,mt->iostxy", block.a, psi, scale.samples)


def weighted_mu_norm(a, eigenvalues=None):
    """``sqrt(sum_k mu_k a_k^2)`` along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    mu = spatial_eigenvalues(a.shape[-1]) if eigenvalues is None else np.asarray(eigenvalues)
    # scaled by the largest entry so tiny or huge coefficients neither underflow nor overflow
    big = np.abs(a).max(axis=-1, keepdims=True)
    safe = np.where(big > 0, big, 1.0)
    return np.sqrt(np.sum(mu * (a / safe) ** 2, axis=-1)) * safe[..., 0]


def _combine(vals, layer):
    # vals[M_in, M_out, m] -> layer constant with the channel max/sum structure
    M_in, M_out = vals.shape[:2]
    if layer == 1:
        v = vals[..., 0]
        return max(v.sum(axis=0).max(), (M_in / M_out) * v.sum(axis=1).max())
    first = vals.sum(axis=(0, 2)).max()
    second = (2.0 * M_in / M_out) * vals.sum(axis=1).max(axis=0).sum()
    return max(first, second)


def compute_A_l(block):
    """The layer constant ``A_l``; the non-expansive and stability results need ``A_l <= 1``."""
    norms = weighted_mu_norm(np.moveaxis(block._as4(), 2, -1))  # [M_in, M_out, m]
    return float(np.pi * _combine(norms, block.layer))


def _trapezoid_weights(n):
    w = np.full(n, 2.0 / (n - 1))
    w[0] = w[-1] = 1.0 / (n - 1)
    return np.outer(w, w)


def compute_regularity(block, n_grid=101):
    """``A`` together with ``B, C, D`` by trapezoid quadrature of the continuous filters.

    ``B`` and ``C`` are invariant under the support dilation; ``D`` scales as
    ``2^-j`` and is evaluated from the canonical integral.
    """
    t = np.linspace(-1.0, 1.0, n_grid)
    u1, u2 = np.meshgrid(t, t, indexing="ij")
    vals, g1, g2 = unit_mode_values(block.K, u1, u2)
    wts = _trapezoid_weights(n_grid)
    radius = np.hypot(u1, u2)
    a4 = block._as4()
    M_in, M_out, _, Ka = a4.shape
    Bv = np.empty((M_in, M_out, Ka))
    Cv = np.empty_like(Bv)
    Dv = np.empty_like(Bv)
    for i in range(M_in):
        F = np.einsum("okm,kxy->omxy", a4[i], vals)
        G1 = np.einsum("okm,kxy->omxy", a4[i], g1)
        G2 = np.einsum("okm,kxy->omxy", a4[i], g2)
        grad = np.hypot(G1, G2)
        Bv[i] = np.sum(np.abs(F) * wts, axis=(-2, -1))
        Cv[i] = np.sum(radius * grad * wts, axis=(-2, -1))
        Dv[i] = np.sum(grad * wts, axis=(-2, -1))
    Dv *= 2.0 ** (-block.j)
    return RegularityReport(A=compute_A_l(block), B=float(_combine(Bv, block.layer)),
                            C=float(_combine(Cv, block.layer)),
                            D=float(_combine(Dv, block.layer)), j=float(block.j))


def project_to_A2(block):
    """Rescale ``a`` (not ``b``) by ``1/A_l`` when ``A_l > 1``."""
    A = compute_A_l(block)
    if A <= 1.0:
        return block
    return replace(block, a=block.a / A)


def init_coefficients(seed, layer, M_in, M_out, K, K_alpha=1, target_A=1.0, j=0.0):
    """Gaussian coefficients rescaled so that ``A_l == target_A``; zero bias."""
    if not target_A > 0:
        raise ConfigurationError(f"target_A must be > 0, got {target_A}")
    rng = np.random.default_rng(seed)
    shape = (M_in, M_out, K) if layer == 1 else (M_in, M_out, K, K_alpha)
    a = rng.standard_normal(shape)
    block = CoefficientBlock(layer=layer, a=a, b=np.zeros(M_out), j=j)
    block.a *= target_A / compute_A_l(block)
    return block


def decomposed_param_count(M_in, M_out, K, K_alpha=1):
    return M_in * M_out * K * K_alpha


def undecomposed_param_count(M_in, M_out, L, L_alpha=1):
    return M_in * M_out * L * L * L_alpha
