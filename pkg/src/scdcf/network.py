"""Scale-equivariant layers, their backward passes, and model assembly.

Batched layouts: inputs ``[B, M_0, H, W]``, scale features ``[B, M, N_s, H, W]``.
The first layer zero-pads the input spatially; later layers replicate edges.
The joint layer reads scale taps ``t = 0 .. L_alpha-1`` at padded index
``s + t``, where the padding prepends ``L_alpha - 1`` slices at the fine
(``alpha = -T``) end; tap ``L_alpha - 1`` is the unshifted one.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .basis import ScaleGrid, default_support_exponent, make_scale_basis, make_spatial_basis
from .errors import ConfigurationError, DimensionError, StateError
from .filterbank import CoefficientBlock, init_coefficients, project_to_A2, synthesize_filters
from .tensor import correlate_batch, correlate_batch_backward, pad_spatial, unpad_spatial_grad

PADDINGS = ("zero", "replicate")
BN_MODES = ("scale_space", "per_scale")
# Spatial padding of hidden features. The input is zero outside the image, but
# a hidden feature tends to a per-channel constant there, which edge copies
# reproduce exactly.
HIDDEN_SPATIAL_PADDING = "edge"
# "A": coefficients scaled so that A_l equals init_A (needed by the norm bounds);
# "he": synthesized filter taps get variance 2 / fan_in, which suits Adam training.
INITS = ("he", "A")


# ---------------------------------------------------------------- flop formulas

def first_layer_flops(H, W, N_s, M_in, M_out, L):
    return 2 * H * W * L * L * N_s * M_in * M_out + 2 * H * W * N_s * M_out


def naive_step_flops(H, W, N_s, M_in, M_out, L, L_alpha):
    return (2 * H * W * L * L * N_s * L_alpha * M_out * M_in,
            L_alpha * N_s * H * W * M_out * M_in,
            H * W * N_s * M_out * (2 + M_in))


def decomposed_step_flops(H, W, N_s, M_in, M_out, L, L_alpha, K, K_alpha):
    return (2 * L_alpha * N_s * H * W * K_alpha * M_in,
            2 * H * W * L * L * N_s * M_in * K_alpha * K,
            2 * H * W * N_s * M_out * (1 + K * K_alpha * M_in))


def _count(counter, n):
    if counter is not None:
        counter.add(n)


def _relu(x):
    return np.maximum(x, 0.0)


_ACTIVATIONS = {"relu": _relu, "identity": lambda x: x, None: lambda x: x}


def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise DimensionError(f"expected ndim {ndim - 1} or {ndim}, got {x.ndim}")
    return x, False


# ---------------------------------------------------------------- functional ops

def pad_scale(x, taps, mode, axis=-3):
    """Extend the scale axis by ``taps - 1`` slices at the fine end.

    ``zero`` prepends zeros; ``replicate`` repeats the ``alpha = -T`` slice.
    The coarse end is never read by the joint layer, so nothing is appended.
    """
    if mode not in PADDINGS:
        raise ConfigurationError(f"padding must be one of {PADDINGS}, got {mode!r}")
    P = taps - 1
    if P == 0:
        return x
    x = np.moveaxis(x, axis, 0)
    if mode == "zero":
        pad = np.zeros((P,) + x.shape[1:])
    else:
        pad = np.repeat(x[:1], P, axis=0)
    return np.moveaxis(np.concatenate([pad, x], axis=0), 0, axis)


def _unpad_scale_grad(gxp, taps, mode):
    # adjoint of pad_scale on axis 2 of [B, M, N_s + P, H, W]
    P = taps - 1
    g = gxp[:, :, P:].copy()
    if mode == "replicate" and P:
        g[:, :, 0] += gxp[:, :, :P].sum(axis=2)
    return g


def first_layer_forward(x0, block, spatial, counter=None, activation="relu"):
    """Multiscale first layer: per-scale same-padded correlation, bias, activation."""
    x, single = _batched(x0, 4)
    B, M0, H, W = x.shape
    if block.layer != 1 or block.M_in != M0:
        raise DimensionError(f"channel axis: block expects {block.M_in} inputs, got {M0}")
    F = synthesize_filters(block, spatial)          # [M0, M1, N_s, L, L]
    M1, Ns, L = F.shape[1], F.shape[2], F.shape[-1]
    w = F.transpose(1, 2, 0, 3, 4).reshape(M1 * Ns, M0, L, L)
    out, _ = correlate_batch(x, w, pad=(L - 1) // 2)
    out = out.reshape(B, M1, Ns, H, W) + block.b[None, :, None, None, None]
    _count(counter, B * first_layer_flops(H, W, Ns, M0, M1, L))
    out = _ACTIVATIONS[activation](out)
    return out[0] if single else out


def joint_filter_forward(x, filters, bias, padding, counter=None, activation="relu"):
    """Joint correlation with an explicit filter tensor ``[M_in, M_out, N_s, L_alpha, L, L]``."""
    x, single = _batched(x, 5)
    B, Mi, Ns, H, W = x.shape
    if filters.shape[0] != Mi or filters.shape[2] != Ns:
        raise DimensionError(f"channel/scale axis: filters {filters.shape[:3]} vs input {(Mi, Ns)}")
    Mo, La, L = filters.shape[1], filters.shape[3], filters.shape[-1]
    xp = pad_scale(x, La, padding, axis=2)
    out = np.empty((B, Mo, Ns, H, W))
    for s in range(Ns):
        slab = xp[:, :, s:s + La].reshape(B, Mi * La, H, W)
        w = filters[:, :, s].transpose(1, 0, 2, 3, 4).reshape(Mo, Mi * La, L, L)
        out[:, :, s], _ = correlate_batch(slab, w, pad=(L - 1) // 2, pad_mode=HIDDEN_SPATIAL_PADDING)
    out += np.asarray(bias)[None, :, None, None, None]
    _count(counter, B * sum(naive_step_flops(H, W, Ns, Mi, Mo, L, La)))
    out = _ACTIVATIONS[activation](out)
    return out[0] if single else out


def joint_layer_forward_naive(x, block, spatial, scale, padding, counter=None, activation="relu"):
    """Synthesize the full joint filters, then correlate directly."""
    F = synthesize_filters(block, spatial, scale)
    return joint_filter_forward(x, F, block.b, padding, counter, activation)


def _scale_step(xp, phi, Ns):
    # y[b, i, m, s] = sum_t phi[m, t] xp[b, i, s + t]
    La = phi.shape[1]
    win = np.stack([xp[:, :, t:t + Ns] for t in range(La)], axis=0)
    return np.einsum("mt,tbisxy->bimsxy", phi, win)


def _spatial_step(y, psi):
    # z[b, i, m, k, s] = corr(y[b, i, m, s], psi[k, s])
    B, Mi, Ka, Ns, H, W = y.shape
    K, L = psi.shape[0], psi.shape[-1]
    z = np.empty((B, Mi, Ka, K, Ns, H, W))
    for s in range(Ns):
        ys = y[:, :, :, s].reshape(B * Mi * Ka, 1, H, W)
        zs, _ = correlate_batch(ys, psi[:, s][:, None], pad=(L - 1) // 2,
                                pad_mode=HIDDEN_SPATIAL_PADDING)
        z[:, :, :, :, s] = zs.reshape(B, Mi, Ka, K, H, W)
    return z


def _contract(z, a):
    # pre[b, o, s] = sum_{i, k, m} a[i, o, k, m] z[b, i, m, k, s]
    return np.tensordot(z, a, axes=([1, 2, 3], [0, 3, 2])).transpose(0, 4, 1, 2, 3)


def _band_matrix(f, n):
    """``T[i + l, c, i] = f[c, l]``: a 1-D valid correlation of length ``n`` as a matrix."""
    C, L = f.shape
    T = np.zeros((n + L - 1, C, n))
    for l in range(L):
        T[np.arange(n) + l, :, np.arange(n)] = f[:, l]
    return T.reshape(n + L - 1, C * n)


class _SeparablePlan:
    """Banded matrices for evaluating the spatial step as column then row filtering.

    Edge replication commutes with both 1-D passes and with the channel
    contraction, so columns are padded before the column pass and rows only
    before the row pass, on the much smaller contracted tensor. Each pass
    filters the input minus its first sample and adds that sample times the
    tap sum ``dc`` back, so a constant input never meets the per-scale bands
    and gives the same bits at every pixel and every scale.
    """

    def __init__(self, spatial, H, W):
        if HIDDEN_SPATIAL_PADDING != "edge":
            raise ConfigurationError("separable plan assumes edge padding")
        modes = spatial.modes
        self.qs = sorted({q for _, q in modes})
        self.ps = sorted({p for p, _ in modes})
        self.nq, self.np_ = len(self.qs), len(self.ps)
        self.qslot = np.array([self.qs.index(q) for _, q in modes])
        self.pslot = np.array([self.ps.index(p) for p, _ in modes])
        self.pad = (spatial.L - 1) // 2
        f = spatial.factors
        Hp = H + 2 * self.pad
        self.Tq, self.Rp = [], []
        for s in range(f.shape[1]):
            self.Tq.append(_band_matrix(f[np.array(self.qs) - 1, s], W))             # [Wp, nq*W]
            T = _band_matrix(f[np.array(self.ps) - 1, s], H).reshape(Hp, self.np_, H)
            self.Rp.append(np.ascontiguousarray(T.transpose(1, 0, 2)).reshape(self.np_ * Hp, H))
        self.RpT = [np.ascontiguousarray(R.T) for R in self.Rp]                      # [H, np*Hp]
        self.dcq = np.repeat(spatial.dc[np.array(self.qs) - 1], W, axis=0).T          # [N_s, nq*W]
        self.dcp = spatial.dc[np.array(self.ps) - 1].T                                # [N_s, np]

    def expand(self, a):
        """``a[i, o, k, m]`` as ``[o*np, i*m*nq]`` with zeros for absent ``(p, q)`` pairs."""
        Mi, Mo, K, Ka = a.shape
        full = np.zeros((Mo, self.np_, Mi, Ka, self.nq))
        full[:, self.pslot, :, :, self.qslot] = a.transpose(2, 1, 0, 3)
        return full.reshape(Mo * self.np_, Mi * Ka * self.nq)

    def collapse(self, g, Mi, Ka):
        """Adjoint of :meth:`expand`, returning ``[i, o, k, m]``."""
        Mo = g.shape[0] // self.np_
        g = g.reshape(Mo, self.np_, Mi, Ka, self.nq)
        return g[:, self.pslot, :, :, self.qslot].transpose(2, 1, 0, 3)


def _pad_axis(x, p, axis):
    """Edge replication of ``p`` entries on both ends of ``axis``."""
    idx = np.clip(np.arange(-p, x.shape[axis] + p), 0, x.shape[axis] - 1)
    return np.take(x, idx, axis=axis)


def _unpad_axis(g, p, axis):
    """Adjoint of :func:`_pad_axis`."""
    axis %= g.ndim
    n = g.shape[axis]

    def sl(lo, hi):
        return (slice(None),) * axis + (slice(lo, hi),)

    out = g[sl(p, n - p)].copy()
    out[sl(0, 1)] += g[sl(0, p)].sum(axis=axis, keepdims=True)
    out[sl(n - 2 * p - 1, n - 2 * p)] += g[sl(n - p, n)].sum(axis=axis, keepdims=True)
    return out


def _separable_forward(y, plan, a_exp):
    """Steps 2 and 3 re-associated: column filtering, channel contraction, then row filtering.

    Returns the pre-activation ``[B, M_out, N_s, H, W]`` and the column-filtered
    inputs ``[B, M_in*K_alpha*nq, H*W]`` needed by the backward pass.
    """
    B, Mi, Ka, Ns, H, W = y.shape
    p, nq, np_ = plan.pad, plan.nq, plan.np_
    Mo = a_exp.shape[0] // np_
    out = np.empty((B, Mo, Ns, H, W))
    cols = []
    for s in range(Ns):
        ys = _pad_axis(y[:, :, :, s], p, -1).reshape(-1, W + 2 * p)                # [B*Mi*Ka*H, Wp]
        r = ys[:, :1]
        A = (ys - r) @ plan.Tq[s] + r * plan.dcq[s]                                # [B*Mi*Ka*H, nq*W]
        A = A.reshape(B, Mi * Ka, H, nq, W).transpose(0, 1, 3, 2, 4).reshape(B, Mi * Ka * nq, H * W)
        G = np.matmul(a_exp, A).reshape(B, Mo, np_, H, W)
        r = G[:, :, :, 0]                                                          # [B, Mo, np, W]
        G = _pad_axis(G - r[:, :, :, None], p, 3).reshape(B, Mo, np_ * (H + 2 * p), W)
        out[:, :, s] = np.matmul(plan.RpT[s], G) + np.einsum("p,bopw->bow", plan.dcp[s], r)[:, :, None]
        cols.append(A)
    return out, cols


def _separable_backward(g, cols, plan, a_exp, Mi, Ka):
    B, Mo, Ns, H, W = g.shape
    p, nq, np_ = plan.pad, plan.nq, plan.np_
    Hp = H + 2 * p
    ga = np.zeros_like(a_exp)
    gy = np.empty((B, Mi, Ka, Ns, H, W))
    for s in range(Ns):
        gG = np.matmul(plan.Rp[s], g[:, :, s])                                     # [B, Mo, np*Hp, W]
        gG = _unpad_axis(gG.reshape(B, Mo, np_, Hp, W), p, 3).reshape(B, Mo * np_, H * W)
        ga += np.matmul(gG, cols[s].transpose(0, 2, 1)).sum(axis=0)
        gA = np.matmul(a_exp.T, gG).reshape(B, Mi * Ka, nq, H, W).transpose(0, 1, 3, 2, 4)
        gys = gA.reshape(-1, nq * W) @ plan.Tq[s].T                                # [B*Mi*Ka*H, Wp]
        gy[:, :, :, s] = _unpad_axis(gys.reshape(B, Mi, Ka, H, W + 2 * p), p, -1)
    return ga, gy


def joint_layer_forward_decomposed(x, block, spatial, scale, padding, counter=None,
                                   activation="relu", cache=None):
    """Scale correlation with ``phi_m``, spatial correlation with ``psi_k``, then contraction."""
    x, single = _batched(x, 5)
    B, Mi, Ns, H, W = x.shape
    if block.M_in != Mi:
        raise DimensionError(f"channel axis: block expects {block.M_in} inputs, got {Mi}")
    if spatial.samples.shape[1] != Ns:
        raise DimensionError(f"scale axis: basis has {spatial.samples.shape[1]}, input has {Ns}")
    La, K, Ka, L, Mo = scale.L_alpha, block.K, block.K_alpha, spatial.L, block.M_out
    xp = pad_scale(x, La, padding, axis=2)
    y = _scale_step(xp, scale.samples, Ns)
    z = _spatial_step(y, spatial.samples)
    pre = _contract(z, block.a) + block.b[None, :, None, None, None]
    _count(counter, B * sum(decomposed_step_flops(H, W, Ns, Mi, Mo, L, La, K, Ka)))
    if cache is not None:
        cache["z"] = z
    out = _ACTIVATIONS[activation](pre)
    return out[0] if single else out


# ---------------------------------------------------------------- layers

class Layer:
    """Base class: ``forward`` caches what ``backward`` needs; ``backward`` fills ``grads``."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward pass")
        return self._cache

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class FirstScaleConv(Layer):
    def __init__(self, block, spatial):
        super().__init__()
        self.block, self.spatial = block, spatial
        self.params = {"a": block.a, "b": block.b}

    def forward(self, x, training=False):
        B, M0, H, W = x.shape
        F = synthesize_filters(self.block, self.spatial)
        M1, Ns, L = F.shape[1], F.shape[2], F.shape[-1]
        w = F.transpose(1, 2, 0, 3, 4).reshape(M1 * Ns, M0, L, L)
        out, cols = correlate_batch(x, w, pad=(L - 1) // 2)
        self._cache = (cols, w, (H, W))
        return out.reshape(B, M1, Ns, H, W) + self.block.b[None, :, None, None, None]

    def backward(self, g):
        cols, w, hw = self._need_cache()
        B, M1, Ns, H, W = g.shape
        gw, gx = correlate_batch_backward(g.reshape(B, M1 * Ns, H, W), cols, w, hw,
                                          pad=(w.shape[-1] - 1) // 2)
        M0, L = w.shape[1], w.shape[-1]
        gw = gw.reshape(M1, Ns, M0, L, L)
        self.grads = {"a": np.einsum("osixy,ksxy->iok", gw, self.spatial.samples),
                      "b": g.sum(axis=(0, 2, 3, 4))}
        return gx


class JointScaleConv(Layer):
    """Joint layer evaluated through the three decomposed steps.

    The spatial step uses the separability of the sampled modes; it matches
    :func:`joint_layer_forward_decomposed` up to round-off.
    """

    def __init__(self, block, spatial, scale, padding):
        super().__init__()
        if padding not in PADDINGS:
            raise ConfigurationError(f"padding must be one of {PADDINGS}, got {padding!r}")
        self.block, self.spatial, self.scale, self.padding = block, spatial, scale, padding
        self.params = {"a": block.a, "b": block.b}
        self._plans = {}

    def _plan(self, H, W):
        if (H, W) not in self._plans:
            self._plans[(H, W)] = _SeparablePlan(self.spatial, H, W)
        return self._plans[(H, W)]

    def forward(self, x, training=False):
        Ns = x.shape[2]
        plan = self._plan(*x.shape[3:])
        a_exp = plan.expand(self.block.a)
        xp = pad_scale(x, self.scale.L_alpha, self.padding, axis=2)
        y = _scale_step(xp, self.scale.samples, Ns)
        out, cols = _separable_forward(y, plan, a_exp)
        self._cache = (cols, a_exp)
        return out + self.block.b[None, :, None, None, None]

    def backward(self, g):
        cols, a_exp = self._need_cache()
        Mi, _, _, Ka = self.block.a.shape
        phi = self.scale.samples
        La, Ns = phi.shape[1], g.shape[2]
        plan = self._plan(*g.shape[3:])
        ga, gy = _separable_backward(g, cols, plan, a_exp, Mi, Ka)
        B = gy.shape[0]
        gxp = np.zeros((B, Mi, Ns + La - 1) + g.shape[3:])
        for t in range(La):
            gxp[:, :, t:t + Ns] += np.einsum("m,bimsxy->bisxy", phi[:, t], gy)
        self.grads = {"a": plan.collapse(ga, Mi, Ka), "b": g.sum(axis=(0, 2, 3, 4))}
        return _unpad_scale_grad(gxp, La, self.padding)

    def num_params(self):
        return self.block.a.size

    def num_params_undecomposed(self):
        """Trainable weights of a free ``L x L x L_alpha`` filter bank with the same channels."""
        return self.block.M_in * self.block.M_out * self.spatial.L ** 2 * self.scale.L_alpha


class Conv2d(Layer):
    """Plain same-padded spatial correlation for the baseline CNN."""

    def __init__(self, w, b, pad_mode="zero"):
        super().__init__()
        self.params = {"w": np.asarray(w, dtype=np.float64), "b": np.asarray(b, dtype=np.float64)}
        self.pad_mode = pad_mode

    def forward(self, x, training=False):
        w = self.params["w"]
        out, cols = correlate_batch(x, w, pad=(w.shape[-1] - 1) // 2, pad_mode=self.pad_mode)
        self._cache = (cols, x.shape[2:])
        return out + self.params["b"][None, :, None, None]

    def backward(self, g):
        cols, hw = self._need_cache()
        w = self.params["w"]
        gw, gx = correlate_batch_backward(g, cols, w, hw, pad=(w.shape[-1] - 1) // 2,
                                          pad_mode=self.pad_mode)
        self.grads = {"w": gw, "b": g.sum(axis=(0, 2, 3))}
        return gx


class BatchNorm(Layer):
    """Batch normalisation per unstructured channel.

    ``mode="scale_space"`` pools statistics over (batch, alpha, u);
    ``mode="per_scale"`` keeps separate statistics for each scale channel.
    """

    def __init__(self, M, N_s=None, mode="scale_space", eps=1e-5, momentum=0.1):
        super().__init__()
        if mode not in BN_MODES:
            raise ConfigurationError(f"batch-norm mode must be one of {BN_MODES}, got {mode!r}")
        self.mode, self.eps, self.momentum = mode, eps, momentum
        shape = (M, N_s) if (mode == "per_scale" and N_s is not None) else (M,)
        self.params = {"gamma": np.ones(shape), "beta": np.zeros(shape)}
        self.running_mean = np.zeros(shape)
        self.running_var = np.ones(shape)

    def _view(self, x):
        """``x`` as ``[B, C, R]`` with ``C`` matching the parameter layout."""
        C = self.params["gamma"].size
        if x.shape[1] * (x.shape[2] if x.ndim == 5 and self.mode == "per_scale" else 1) != C:
            raise DimensionError(f"batch norm expects {C} channels, got shape {x.shape}")
        return x.reshape(x.shape[0], C, -1)

    def forward(self, x, training=False):
        v = self._view(x)
        shape = self.params["gamma"].shape
        if training:
            n = v.shape[0] * v.shape[2]
            # shifted by the first sample: a constant channel centres to exact zeros
            ref = v[0, :, 0]
            vs = v - ref[None, :, None]
            shift = vs.sum(axis=2).sum(axis=0) / n
            mean = ref + shift
            xc = vs - shift[None, :, None]
            var = np.einsum("bcr,bcr->c", xc, xc) / n
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.reshape(shape)
            self.running_var = (1 - m) * self.running_var + m * var.reshape(shape) * (n / max(n - 1, 1))
        else:
            mean, var = self.running_mean.ravel(), self.running_var.ravel()
            xc = v - mean[None, :, None]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv[None, :, None]
        self._cache = (xhat, inv, training, x.shape)
        gamma, beta = self.params["gamma"].ravel(), self.params["beta"].ravel()
        return (xhat * gamma[None, :, None] + beta[None, :, None]).reshape(x.shape)

    def backward(self, g):
        xhat, inv, training, shape = self._need_cache()
        pshape = self.params["gamma"].shape
        gv = g.reshape(xhat.shape)
        sum_g = gv.sum(axis=2).sum(axis=0)
        sum_gx = np.einsum("bcr,bcr->c", gv, xhat)
        self.grads = {"gamma": sum_gx.reshape(pshape), "beta": sum_g.reshape(pshape)}
        gamma = self.params["gamma"].ravel()
        if not training:
            return (gv * (gamma * inv)[None, :, None]).reshape(shape)
        n = xhat.shape[0] * xhat.shape[2]
        k = (gamma * inv)[None, :, None]
        gx = k * (gv - (sum_g / n)[None, :, None] - xhat * (sum_gx / n)[None, :, None])
        return gx.reshape(shape)


class ReLU(Layer):
    def forward(self, x, training=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, g):
        return np.where(self._need_cache(), g, 0.0)


class AvgPool2(Layer):
    """2x2 spatial average pooling on the last two axes (odd edges dropped)."""

    def forward(self, x, training=False):
        H, W = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
        self._cache = x.shape
        v = x[..., :H, :W]
        return 0.25 * (v[..., 0::2, 0::2] + v[..., 1::2, 0::2] + v[..., 0::2, 1::2] + v[..., 1::2, 1::2])

    def backward(self, g):
        shape = self._need_cache()
        gx = np.zeros(shape)
        q = 0.25 * g
        for dr in (0, 1):
            for dc in (0, 1):
                gx[..., dr:2 * g.shape[-2]:2, dc:2 * g.shape[-1]:2] = q
        return gx


class ScaleMaxPool(Layer):
    def forward(self, x, training=False):
        idx = np.argmax(x, axis=2)
        self._cache = (idx, x.shape)
        return np.take_along_axis(x, idx[:, :, None], axis=2)[:, :, 0]

    def backward(self, g):
        idx, shape = self._need_cache()
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return gx


class Flatten(Layer):
    def forward(self, x, training=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())


class Dense(Layer):
    def __init__(self, w, b):
        super().__init__()
        self.params = {"w": np.asarray(w, dtype=np.float64), "b": np.asarray(b, dtype=np.float64)}

    def forward(self, x, training=False):
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, g):
        x = self._need_cache()
        self.grads = {"w": x.T @ g, "b": g.sum(axis=0)}
        return g @ self.params["w"].T


def scale_maxpool(x):
    """Max over the scale axis of ``[M, N_s, H, W]`` (or batched ``[B, M, N_s, H, W]``)."""
    return np.max(x, axis=-3)


# ---------------------------------------------------------------- models

@dataclass
class NetworkSpec:
    """Topology of a ScDCF network or its plain-CNN counterpart.

    ``pool`` lists, per conv block, whether a 2x2 average pool follows it.
    ``n_classes = 0`` builds a feature extractor without a classifier head.
    ``j = None`` places the coarsest scale's support exactly on the tap window.
    """

    kind: str = "scdcf"
    in_channels: int = 1
    widths: tuple = (8, 16)
    L: int = 7
    L_alpha: int = 3
    K: int = 15
    K_alpha: int = 3
    T: float = 1.0
    N_s: int = 5
    j: float = None
    padding: str = "replicate"
    pool: tuple = (True, True)
    batchnorm: bool = True
    bn_mode: str = "scale_space"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    hidden: tuple = (64,)
    n_classes: int = 10
    input_hw: tuple = (28, 28)
    sampling: str = "area"
    activation: str = "relu"
    init: str = "he"
    init_A: float = 1.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.input_hw = tuple(int(h) for h in self.input_hw)
        if isinstance(self.pool, (bool, np.bool_)):
            self.pool = (bool(self.pool),) * len(self.widths)
        self.pool = tuple(bool(p) for p in self.pool)
        self.validate()

    def validate(self):
        if self.kind not in ("scdcf", "cnn"):
            raise ConfigurationError(f"kind must be 'scdcf' or 'cnn', got {self.kind!r}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigurationError("widths must be a non-empty list of positive ints")
        if self.L < 1 or self.L % 2 == 0:
            raise ConfigurationError(f"L must be odd, got {self.L}")
        if self.L_alpha < 1:
            raise ConfigurationError(f"L_alpha must be >= 1, got {self.L_alpha}")
        if self.padding not in PADDINGS:
            raise ConfigurationError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        if self.bn_mode not in BN_MODES:
            raise ConfigurationError(f"bn_mode must be one of {BN_MODES}, got {self.bn_mode!r}")
        if self.activation not in ("relu", "identity"):
            raise ConfigurationError(f"activation must be 'relu' or 'identity', got {self.activation!r}")
        if self.init not in INITS:
            raise ConfigurationError(f"init must be one of {INITS}, got {self.init!r}")
        if len(self.pool) != len(self.widths):
            raise ConfigurationError("pool needs one entry per conv block")
        ScaleGrid(self.T, self.N_s)

    @property
    def scale_grid(self):
        return ScaleGrid(self.T, self.N_s)

    @property
    def support_exponent(self):
        return default_support_exponent(self.L, self.scale_grid) if self.j is None else float(self.j)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Network:
    """Ordered list of layers with named parameters ``"<index>.<name>"``."""

    def __init__(self, spec, layers, block_ends, spatial=None, scale=None):
        self.spec, self.layers, self.block_ends = spec, layers, block_ends
        self.spatial, self.scale = spatial, scale

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def features(self, x, training=False):
        """Outputs of every conv block (after activation and pooling)."""
        x, single = _batched(x, 4)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training)
            if i in self.block_ends:
                feats.append(x[0] if single else x)
                if len(feats) == len(self.block_ends):
                    break
        return feats

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = layer.grads.get(k, np.zeros_like(v))
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def set_buffer(self, name, value):
        i, k = name.split(".", 1)
        setattr(self.layers[int(i)], k, np.array(value, dtype=np.float64))

    def num_params(self):
        return int(sum(v.size for v in self.parameters().values()))

    def conv_blocks(self):
        return [l.block for l in self.layers if isinstance(l, (FirstScaleConv, JointScaleConv))]

    def project_to_A2(self):
        """Rescale every coefficient block in place so that ``A_l <= 1``."""
        for block in self.conv_blocks():
            np.copyto(block.a, project_to_A2(block).a)
        return self

    def support_exponents(self):
        """Physical support exponent of every conv block, in input-pixel units."""
        j0 = self.spec.support_exponent
        out, pools = [], 0
        for p in self.spec.pool:
            out.append(j0 + pools)
            pools += int(p)
        return out

    def calibrate_batchnorm(self, x):
        """Set every batch-norm's running statistics to those of batch ``x``."""
        saved = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                saved.append((layer, layer.momentum))
                layer.momentum = 1.0
        self.forward(x, training=True)
        for layer, m in saved:
            layer.momentum = m


def _spawn(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _head(spec, flat, rng, layers):
    dims = [flat] + list(spec.hidden) + [spec.n_classes]
    layers.append(Flatten())
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append(Dense(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in), np.zeros(d_out)))
        layers.append(ReLU())
    layers.pop()  # no activation on the logits


def _he_rescale(block, spatial, scale, fan_in):
    F = synthesize_filters(block, spatial, scale if block.layer > 1 else None)
    rms = np.sqrt(np.mean(F * F))
    if rms > 0:
        block.a *= np.sqrt(2.0 / fan_in) / rms


def build_network(spec, seed=0):
    """Instantiate a network with seeded random parameters."""
    seeds = _spawn(seed, len(spec.widths) + 1)
    H, W = spec.input_hw
    layers, ends = [], []
    spatial = scale = None
    if spec.kind == "scdcf":
        spatial = make_spatial_basis(spec.K, spec.L, spec.scale_grid, spec.support_exponent,
                                     sampling=spec.sampling)
        scale = make_scale_basis(spec.K_alpha, spec.L_alpha)
    m_in, pools = spec.in_channels, 0
    for l, (m_out, pool) in enumerate(zip(spec.widths, spec.pool), start=1):
        if spec.kind == "scdcf":
            j_l = spec.support_exponent + pools
            block = init_coefficients(seeds[l - 1], l, m_in, m_out, spec.K, spec.K_alpha,
                                      target_A=spec.init_A, j=j_l)
            if spec.init == "he":
                _he_rescale(block, spatial, scale, m_in * spec.L ** 2 * (spec.L_alpha if l > 1 else 1))
            layers.append(FirstScaleConv(block, spatial) if l == 1
                          else JointScaleConv(block, spatial, scale, spec.padding))
        else:
            rng = np.random.default_rng(seeds[l - 1])
            fan = m_in * spec.L ** 2
            layers.append(Conv2d(rng.standard_normal((m_out, m_in, spec.L, spec.L)) * np.sqrt(2.0 / fan),
                                 np.zeros(m_out), "zero" if l == 1 else HIDDEN_SPATIAL_PADDING))
        if spec.batchnorm:
            layers.append(BatchNorm(m_out, spec.N_s, spec.bn_mode, spec.bn_eps, spec.bn_momentum))
        if spec.activation == "relu":
            layers.append(ReLU())
        if pool:
            layers.append(AvgPool2())
            H, W, pools = H // 2, W // 2, pools + 1
        ends.append(len(layers) - 1)
        m_in = m_out
    if spec.n_classes > 0:
        if spec.kind == "scdcf":
            layers.append(ScaleMaxPool())
        _head(spec, m_in * H * W, np.random.default_rng(seeds[-1]), layers)
    return Network(spec, layers, ends, spatial, scale)
