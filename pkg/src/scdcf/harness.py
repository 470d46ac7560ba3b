"""Equivariance, truncation and deformation-stability experiments with CSV output."""
import csv
from dataclasses import dataclass, fields, replace

import numpy as np

from .actions import GroupElement, apply_D, apply_T, apply_deformation, make_smooth_tau
from .errors import PreconditionError, UndefinedError
from .filterbank import compute_A_l
from .network import NetworkSpec, build_network

CSV_COLUMNS = ("experiment", "id", "seed", "depth", "L_alpha", "N_s", "T", "padding", "K",
               "K_alpha", "beta", "v_x", "v_y", "grad_inf", "tau_inf", "measured_error",
               "theoretical_bound")


@dataclass
class ExperimentRecord:
    experiment: str
    id: int
    seed: int
    depth: int
    L_alpha: int
    N_s: int
    T: float
    padding: str
    K: int
    K_alpha: int
    beta: float
    v_x: float
    v_y: float
    grad_inf: float
    tau_inf: float
    measured_error: float
    theoretical_bound: float = None

    def __post_init__(self):
        if not self.measured_error >= 0:
            raise ValueError(f"measured_error must be >= 0, got {self.measured_error}")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def emit_csv(records, path):
    """Header plus one row per record; floats with 9 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_csv(path):
    types = {f.name: f.type for f in fields(ExperimentRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                t = types[k]
                if v == "":
                    vals[k] = None
                elif t in (int, "int"):
                    vals[k] = int(v)
                elif t in (float, "float"):
                    vals[k] = float(v)
                else:
                    vals[k] = v
            out.append(ExperimentRecord(**vals))
    return out


# ---------------------------------------------------------------- inputs

def smooth_blobs(seed, shape=(56, 56), n_blobs=4, sigma=(2.5, 5.0), radius=0.22, channels=1):
    """Sum of Gaussians centred within ``radius * min(H, W)`` of the image centre."""
    rng = np.random.default_rng(seed)
    H, W = shape
    r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    out = np.zeros((channels, H, W))
    for ch in range(channels):
        for _ in range(n_blobs):
            rho = radius * min(H, W) * np.sqrt(rng.uniform())
            th = rng.uniform(0, 2 * np.pi)
            s = rng.uniform(*sigma)
            cy, cx = (H - 1) / 2 + rho * np.sin(th), (W - 1) / 2 + rho * np.cos(th)
            out[ch] += rng.uniform(0.5, 1.0) * np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2 * s * s))
    return out


# ---------------------------------------------------------------- measurements

def feature_norm(x, valid=None, pixel_area=1.0):
    """``sup_alpha sqrt(mean_lambda sum_u x^2 * pixel_area)`` over valid scale channels.

    ``x`` is ``[M, N_s, H, W]``; ``[M, H, W]`` is treated as a single scale.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    per = np.sqrt((x ** 2).sum(axis=(2, 3)).mean(axis=0) * pixel_area)
    if valid is None:
        valid = np.ones(x.shape[1], dtype=bool)
    if not np.any(valid):
        raise PreconditionError("feature_norm needs at least one valid scale channel")
    return float(per[valid].max())


def _pools_upto(net, layer):
    return sum(net.spec.pool[:layer])


def background(net, shape, layer):
    """Response of block ``layer`` to a blank input: one value per (channel, scale)."""
    f = net.features(np.zeros(shape))[layer - 1]
    return f[..., 0, 0]


def transform_feature(net, feat, g, layer, fill=None):
    """``T_{beta,v}`` for scale features, ``D_{beta,v}`` for plain CNN features; returns ``(out, valid)``.

    Outside the image the feature takes the value ``fill``, normally
    :func:`background`, since a zero-extended input maps to that constant there.
    """
    stride = 2.0 ** _pools_upto(net, layer)
    if feat.ndim == 4:
        return apply_T(feat, g, net.spec.scale_grid.delta, stride, fill)
    return apply_D(feat, g, stride, fill)[:, None], np.ones(1, dtype=bool)


def _as_scale(f):
    return f if f.ndim == 4 else f[:, None]


def _relative(diff, ref, valid, per_scale):
    num = (diff[:, valid] ** 2).sum(axis=(0, 2, 3))
    den = (ref[:, valid] ** 2).sum(axis=(0, 2, 3))
    if per_scale:
        if np.any(den == 0):
            raise UndefinedError("equivariance error undefined: zero reference at some scale")
        return np.sqrt(num / den)
    if den.sum() == 0:
        raise UndefinedError("equivariance error undefined: zero reference feature")
    return float(np.sqrt(num.sum() / den.sum()))


def equivariance_error(net, x0, g, layer=None, per_scale=False):
    """Relative L2 error between ``x^(l)[D_g x0]`` and ``T_g x^(l)[x0]`` on common valid scales.

    ``layer`` counts conv blocks from 1 (default: the last one).
    """
    layer = len(net.block_ends) if layer is None else layer
    f0 = net.features(x0)[layer - 1]
    fg = net.features(apply_D(x0, g))[layer - 1]
    tf, valid = transform_feature(net, f0, g, layer, background(net, x0.shape, layer))
    return _relative(_as_scale(fg) - tf, tf, valid, per_scale)


def _record(exp, rid, seed, spec, depth, g, err, bound=None, grad_inf=0.0, tau_inf=0.0):
    return ExperimentRecord(exp, rid, seed, depth, spec.L_alpha, spec.N_s, float(spec.T), spec.padding,
                            spec.K, spec.K_alpha, float(g.beta), float(g.v[0]), float(g.v[1]),
                            float(grad_inf), float(tau_inf), float(err),
                            None if bound is None else float(bound))


def verification_spec(kind="scdcf", widths=(8, 8), L=17, cnn_L=5, L_alpha=3, K=8, K_alpha=3, T=1.5,
                      N_s=13, padding="replicate", size=56):
    """Random two-block verification net: conv, batch norm (calibrated, eval mode), no nonlinearity.

    Pooling is left out because a fixed 2x2 box is not itself scale
    equivariant and would dominate the measured error.
    """
    return NetworkSpec(kind=kind, widths=tuple(widths), L=L if kind == "scdcf" else cnn_L, L_alpha=L_alpha,
                       K=K, K_alpha=K_alpha, T=T, N_s=N_s, padding=padding, pool=(False,) * len(widths),
                       batchnorm=True, activation="identity", n_classes=0, input_hw=(size, size))


def verify_equivariance(specs, steps, seeds, v=(0.0, 0.0)):
    """Equivariance error at every block for each spec, seed and scale shift.

    ``steps`` are multiples of the ScDCF grid spacing; the CNN specs are
    tested with the same ``beta`` values. One record per
    (spec, seed, step, layer); ``depth`` holds the layer index.
    """
    delta = next(sp.scale_grid.delta for sp in specs if sp.kind == "scdcf")
    records, rid = [], 0
    for sp in specs:
        for seed in seeds:
            net = build_network(sp, seed)
            if sp.batchnorm:
                net.calibrate_batchnorm(_calibration_batch(seed, sp.input_hw, sp.in_channels))
            x0 = smooth_blobs(seed, sp.input_hw, channels=sp.in_channels)
            for step in steps:
                g = GroupElement(step * delta, tuple(v))
                for layer in range(1, len(sp.widths) + 1):
                    err = equivariance_error(net, x0, g, layer)
                    rec = _record(f"verify_{sp.kind}", rid, seed, sp, layer, g, err)
                    records.append(rec)
                    rid += 1
    return records


def depth_sweep(template, depths, paddings, seeds, beta, v=(0.0, 0.0), input_shape=(56, 56)):
    """Equivariance error at the deepest block for every (depth, padding, seed).

    Layer widths repeat ``template.widths[0]``; the input blob is drawn from the seed.
    """
    g = GroupElement(beta, tuple(v))
    records, rid = [], 0
    for depth in depths:
        for padding in paddings:
            for seed in seeds:
                spec = replace(template, widths=(template.widths[0],) * depth,
                               pool=(False,) * depth, padding=padding, n_classes=0)
                net = build_network(spec, seed)
                x0 = smooth_blobs(seed, input_shape, channels=spec.in_channels)
                if spec.batchnorm:
                    net.calibrate_batchnorm(_calibration_batch(seed, input_shape, spec.in_channels))
                err = equivariance_error(net, x0, g)
                records.append(_record("depth", rid, seed, spec, depth, g, err))
                rid += 1
    return records


def _calibration_batch(seed, shape, channels, n=8):
    return np.stack([smooth_blobs(10_000 + seed * 97 + i, shape, channels=channels) for i in range(n)])


def truncation_error(template, T, delta, seed, beta, depth, padding, input_shape=(40, 40)):
    """Extra equivariance error caused by cutting the scale axis at ``-T``.

    A reference net with the same coefficients and physical scales but
    ``(L_alpha - 1) * (depth - 1)`` additional fine channels is exact on the
    truncated net's channels; the error is the equivariance defect of the
    difference between the two, relative to the reference output, both
    measured with the sup-over-scales :func:`feature_norm`.
    """
    n_s = int(round(2 * T / delta)) + 1
    extra = (template.L_alpha - 1) * (depth - 1)
    j = template.support_exponent
    spec = replace(template, T=T, N_s=n_s, widths=(template.widths[0],) * depth,
                   pool=(False,) * depth, padding=padding, n_classes=0, batchnorm=False, j=j)
    # the reference grid is shifted by extra*delta/2 so its channels contain spec's grid
    T_ref = T + extra * delta / 2.0
    ref_spec = replace(spec, T=T_ref, N_s=n_s + extra, j=j - extra * delta / 2.0)
    net = build_network(spec, seed)
    ref = build_network(ref_spec, seed)
    for b_net, b_ref in zip(net.conv_blocks(), ref.conv_blocks()):
        np.copyto(b_ref.a, b_net.a)
        np.copyto(b_ref.b, b_net.b)
    g = GroupElement(beta)
    x0 = smooth_blobs(seed, input_shape, channels=spec.in_channels)
    xg = apply_D(x0, g)
    a0, ag = net.features(x0)[-1], net.features(xg)[-1]
    r0, rg = ref.features(x0)[-1][:, extra:], ref.features(xg)[-1][:, extra:]
    d0, dg = a0 - r0, ag - rg
    td, valid = apply_T(d0, g, delta)
    tr, _ = apply_T(r0, g, delta)
    den = feature_norm(tr, valid)
    if den == 0:
        raise UndefinedError("truncation error undefined: zero reference feature")
    return feature_norm(dg - td, valid) / den


FINEST_SUPPORT_PX = 1.5


def truncation_sweep(template, T_values, beta, seeds, paddings=("replicate", "zero"), depth=2,
                     input_shape=(40, 40), finest_support=FINEST_SUPPORT_PX):
    """Truncation error over increasing ``T`` at fixed scale spacing; returns ``(records, slopes)``.

    The support exponent is held fixed across the sweep. Unless the template
    sets ``j``, it is chosen so that the finest reference filter at the largest
    ``T`` still spans ``finest_support`` pixels; below a pixel the sampled
    filters stop changing with scale and the decay is no longer visible.
    ``slopes[padding]`` is the least-squares slope of ``log2(seed-mean error)`` against ``T``.
    """
    T_values = [float(t) for t in T_values]
    if len(set(T_values)) != len(T_values):
        raise ValueError("duplicate T values")
    if sorted(T_values) != T_values:
        raise ValueError("T values must be increasing")
    delta = template.scale_grid.delta
    if template.j is None:
        template = replace(template, j=max(T_values) + float(np.log2(finest_support)))
    records, rid, slopes = [], 0, {}
    for padding in paddings:
        means = []
        for T in T_values:
            errs = []
            for seed in seeds:
                err = truncation_error(template, T, delta, seed, beta, depth, padding, input_shape)
                spec = replace(template, T=T, N_s=int(round(2 * T / delta)) + 1, padding=padding)
                records.append(_record("truncation", rid, seed, spec, depth, GroupElement(beta), err))
                rid += 1
                errs.append(err)
            means.append(np.mean(errs))
        slopes[padding] = float(np.polyfit(T_values, np.log2(means), 1)[0])
    return records, slopes


def stability_bound(depth, j_L, beta, grad_inf, tau_inf, x0_norm):
    """``2^(beta+1) (4 L |grad tau| + 2^-j_L |tau|) ||x0||`` with ``L`` the depth."""
    return 2.0 ** (beta + 1) * (4 * depth * grad_inf + 2.0 ** (-j_L) * tau_inf) * x0_norm


def stability_spec(widths=(4, 4), L=13, T=1.0, N_s=9, K=8, K_alpha=3, L_alpha=3, size=56):
    """ReLU ScDCF net without batch norm or pooling, initialised with ``A_l = 1``."""
    return NetworkSpec(widths=tuple(widths), L=L, T=T, N_s=N_s, K=K, K_alpha=K_alpha, L_alpha=L_alpha,
                       pool=(False,) * len(widths), batchnorm=False, activation="relu", init="A",
                       init_A=1.0, n_classes=0, input_hw=(size, size))


def stability_sweep(template, grad_infs, triples, seed=0, max_steps=1):
    """``triples`` random (net, tau, beta) draws cycling through ``grad_infs``.

    ``beta`` is a random multiple of the grid spacing in ``[-max_steps, max_steps]``.
    """
    delta = template.scale_grid.delta
    records = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(triples)):
        s_net, s_blob, s_tau, s_beta = (int(v) for v in child.generate_state(4))
        gi = grad_infs[i % len(grad_infs)]
        net = build_network(template, s_net).project_to_A2()
        x0 = smooth_blobs(s_blob, template.input_hw, channels=template.in_channels)
        field = make_smooth_tau(s_tau, gi, shape=template.input_hw)
        g = GroupElement(int(np.random.default_rng(s_beta).integers(-max_steps, max_steps + 1)) * delta)
        records.append(stability_check(net, x0, g, field, seed=s_net, rid=i))
    return records


def stability_check(net, x0, g, field, seed=0, rid=0):
    """Measured deformation error against the bound, both under the feature norm."""
    for l, block in enumerate(net.conv_blocks(), start=1):
        A = compute_A_l(block)
        if A > 1.0 + 1e-12:
            raise PreconditionError(f"layer {l} has A_l={A:.6g} > 1; apply project_to_A2 first")
    depth = len(net.block_ends)
    stride = 2.0 ** _pools_upto(net, depth)
    f0 = net.features(x0)[-1]
    fg = net.features(apply_D(apply_deformation(x0, field), g))[-1]
    tf, valid = transform_feature(net, f0, g, depth, background(net, x0.shape, depth))
    measured = feature_norm(_as_scale(fg) - tf, valid, pixel_area=stride ** 2)
    j_L = net.support_exponents()[-1]
    bound = stability_bound(depth, j_L, g.beta, field.grad_inf, field.tau_inf,
                            feature_norm(x0, pixel_area=1.0))
    return _record("stability", rid, seed, net.spec, depth, g, measured, bound,
                   field.grad_inf, field.tau_inf)
