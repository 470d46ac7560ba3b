"""Group actions, smooth deformations, scaled-digit synthesis and IDX ingestion.

Spatial vectors follow image convention: ``v = (v_x, v_y)`` with ``x`` along
columns and ``y`` along rows; displacement fields are ``tau[0] = tau_x`` and
``tau[1] = tau_y``. All rescalings are about the image centre.
"""
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError
from .tensor import resample_bilinear


@dataclass(frozen=True)
class GroupElement:
    beta: float = 0.0
    v: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.beta) and np.all(np.isfinite(self.v))):
            raise ConfigurationError("group element must be finite")

    def inverse(self):
        s = 2.0 ** (-self.beta)
        return GroupElement(-self.beta, (-s * self.v[0], -s * self.v[1]))


def _center(H, W):
    return (H - 1) / 2.0, (W - 1) / 2.0


def _scaled_coords(H, W, beta, v, stride=1.0):
    # source coordinates 2^-beta (u - v) measured from the centre
    cr, cc = _center(H, W)
    r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    s = 2.0 ** (-beta)
    return cr + s * (r - cr - v[1] / stride), cc + s * (c - cc - v[0] / stride)


def apply_D(x0, g, stride=1.0, fill=None):
    """``x0(2^-beta (u - v))`` on the last two axes.

    ``stride`` converts ``v`` to feature pixels. Reads outside the image give
    ``fill`` (broadcast against the leading axes; default 0).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if g.beta == 0 and g.v[0] == 0 and g.v[1] == 0:
        return x0.copy()
    if fill is not None:
        fill = np.asarray(fill, dtype=np.float64)[..., None, None]
        return apply_D(x0 - fill, g, stride) + fill
    rows, cols = _scaled_coords(x0.shape[-2], x0.shape[-1], g.beta, g.v, stride)
    lead = x0.shape[:-2]
    out = resample_bilinear(x0.reshape((-1,) + x0.shape[-2:]), rows, cols)
    return out.reshape(lead + out.shape[-2:])


def scale_shift_index(beta, delta):
    n = beta / delta
    if abs(n - round(n)) > 1e-9:
        raise ConfigurationError(f"beta={beta} is not a multiple of the scale spacing {delta}")
    return int(round(n))


def apply_T(x, g, delta, stride=1.0, fill=None):
    """Scale-channel shift plus spatial resampling of a feature ``[..., N_s, H, W]``.

    Returns ``(out, valid)``: output channel ``i`` holds input channel ``i - n``
    (``n = beta/delta``) and ``valid[i]`` is False where that index falls
    outside the grid. Invalid channels are zero-filled. ``fill`` is the value
    of the feature outside the image, per leading index (e.g. ``[M, N_s]``).
    """
    n = scale_shift_index(g.beta, delta)
    x = np.asarray(x, dtype=np.float64)
    Ns = x.shape[-3]
    r = apply_D(x, g, stride, fill)
    out = np.zeros_like(r)
    idx = np.arange(Ns) - n
    valid = (idx >= 0) & (idx < Ns)
    out[..., valid, :, :] = r[..., idx[valid], :, :]
    return out, valid


@dataclass(frozen=True, eq=False)
class DeformationField:
    tau: np.ndarray
    grad_inf: float
    tau_inf: float


def _measure(tau, jac):
    tau_inf = float(np.sqrt((tau ** 2).sum(axis=0)).max())
    # largest singular value of the 2x2 Jacobian at every pixel
    J = np.moveaxis(jac, (0, 1), (-2, -1))
    grad_inf = float(np.linalg.norm(J, ord=2, axis=(-2, -1)).max()) if J.size else 0.0
    return grad_inf, tau_inf


def constant_tau(c, shape):
    """Constant displacement ``c = (c_x, c_y)``."""
    H, W = shape
    tau = np.empty((2, H, W))
    tau[0], tau[1] = c[0], c[1]
    return DeformationField(tau, 0.0, float(np.hypot(*c)))


def make_smooth_tau(seed, amplitude, smoothness=3, shape=(56, 56)):
    """Random sine-series displacement whose sup-norm Jacobian equals ``amplitude``.

    ``tau_c = sum_{p, q <= smoothness} c_pq sin(p pi X) sin(q pi Y)`` with
    ``X, Y`` the column/row coordinates mapped to ``[0, 1]``; the Jacobian is
    evaluated analytically on the pixel grid.
    """
    if amplitude < 0:
        raise ConfigurationError(f"amplitude must be >= 0, got {amplitude}")
    H, W = shape
    if amplitude == 0:
        return DeformationField(np.zeros((2, H, W)), 0.0, 0.0)
    rng = np.random.default_rng(seed)
    n = int(smoothness)
    coef = rng.standard_normal((2, n, n)) / np.arange(1, n + 1)[None, :, None] / np.arange(1, n + 1)[None, None, :]
    X = np.arange(W) / max(W - 1, 1)
    Y = np.arange(H) / max(H - 1, 1)
    p = np.arange(1, n + 1)
    sx, cx = np.sin(np.pi * p[:, None] * X), np.cos(np.pi * p[:, None] * X)   # [n, W]
    sy, cy = np.sin(np.pi * p[:, None] * Y), np.cos(np.pi * p[:, None] * Y)   # [n, H]
    tau = np.einsum("cpq,pw,qh->chw", coef, sx, sy)
    dX = np.einsum("cpq,pw,qh->chw", coef * p[None, :, None] * np.pi, cx, sy) / max(W - 1, 1)
    dY = np.einsum("cpq,pw,qh->chw", coef * p[None, None, :] * np.pi, sx, cy) / max(H - 1, 1)
    jac = np.stack([dX, dY], axis=1)            # jac[c, d] = d tau_c / d (x, y)_d
    grad_inf, _ = _measure(tau, jac)
    scale = amplitude / grad_inf
    tau *= scale
    grad_inf, tau_inf = _measure(tau, jac * scale)
    return DeformationField(tau, grad_inf, tau_inf)


def apply_deformation(x0, field):
    """``x0(u - tau(u))`` with zero extension."""
    x0 = np.asarray(x0, dtype=np.float64)
    H, W = x0.shape[-2:]
    if field.tau.shape != (2, H, W):
        raise DimensionError(f"deformation field shape {field.tau.shape} does not match image {(H, W)}")
    r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    lead = x0.shape[:-2]
    out = resample_bilinear(x0.reshape((-1, H, W)), r - field.tau[1], c - field.tau[0])
    return out.reshape(lead + (H, W))


# ---------------------------------------------------------------- datasets

@dataclass(eq=False)
class LabeledDataset:
    images: np.ndarray          # [N, 1, H, W] in [0, 1]
    labels: np.ndarray          # [N] int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DimensionError(f"images must be [N, 1, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"count mismatch: {len(self.images)} images, {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], dict(self.meta))


def rescale_about_center(img, factor, out_hw):
    """Zoom ``img[H, W]`` by ``factor`` about its centre onto an ``out_hw`` canvas."""
    H, W = img.shape
    Ho, Wo = out_hw
    r, c = np.meshgrid(np.arange(Ho, dtype=np.float64), np.arange(Wo, dtype=np.float64), indexing="ij")
    cr, cc = _center(H, W)
    ro, co = _center(Ho, Wo)
    return resample_bilinear(img, cr + (r - ro) / factor, cc + (c - co) / factor)


def synth_scaled_dataset(source, seed, size=28, low=0.3, high=1.0):
    """Rescale every image by an i.i.d. ``U[low, high]`` factor onto a ``size x size`` canvas."""
    rng = np.random.default_rng(seed)
    factors = rng.uniform(low, high, size=len(source))
    H = source.images.shape[2]
    out = np.empty((len(source), 1, size, size))
    for n, s in enumerate(factors):
        out[n, 0] = rescale_about_center(source.images[n, 0], s * size / H, (size, size))
    np.clip(out, 0.0, 1.0, out=out)
    meta = dict(source.meta, rescale_seed=int(seed), size=int(size))
    return LabeledDataset(out, source.labels.copy(), meta)


IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path, magic):
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    n = int(np.prod(dims))
    payload = raw[4 + 4 * ndim:]
    if len(payload) < n:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {n} bytes)")
    return np.frombuffer(payload[:n], dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Write an unsigned-byte IDX file (gzipped when the name ends in ``.gz``)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with _open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path):
    """MNIST-style image and label files as a dataset with pixels in ``[0, 1]``."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    imgs = images.astype(np.float64)[:, None] / 255.0
    return LabeledDataset(imgs, labels.astype(np.int64), {"source": str(images_path)})


DATASET_MAGIC = "scdcf-dataset 1"


def save_dataset(ds, path):
    """Text header (``key=value`` lines, closed by ``end``) then float32 LE images and uint8 labels."""
    N, _, H, W = ds.images.shape
    header = [DATASET_MAGIC, f"count={N}", f"height={H}", f"width={W}",
              f"seed={ds.meta.get('rescale_seed', '')}", f"source={ds.meta.get('source', '')}", "end"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, pos = {}, 0
    first = True
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: unterminated header")
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if first:
            if line != DATASET_MAGIC:
                raise FormatError(f"{path}: not a dataset container")
            first = False
            continue
        if line == "end":
            break
        k, _, v = line.partition("=")
        meta[k] = v
    N, H, W = int(meta["count"]), int(meta["height"]), int(meta["width"])
    nimg = N * H * W * 4
    if len(raw) - pos != nimg + N:
        raise FormatError(f"{path}: payload size {len(raw) - pos}, expected {nimg + N}")
    images = np.frombuffer(raw[pos:pos + nimg], dtype="<f4").reshape(N, 1, H, W).astype(np.float64)
    labels = np.frombuffer(raw[pos + nimg:], dtype=np.uint8).astype(np.int64)
    info = {"source": meta.get("source", "")}
    if meta.get("seed"):
        info["rescale_seed"] = int(meta["seed"])
    return LabeledDataset(images, labels, info)
