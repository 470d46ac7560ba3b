"""Loss, optimizers, the training loop, evaluation and checkpoints."""
import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .actions import synth_scaled_dataset
from .errors import ConfigurationError, FormatError, ScdcfError
from .network import NetworkSpec, build_network

DESK_SPLITS = (2000, 500, 2000)


class DivergenceError(ScdcfError, FloatingPointError):
    """The training loss became non-finite."""


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


class SGD:
    kind = "sgd"

    def __init__(self, lr):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        for k, w in params.items():
            w -= self.lr * grads[k]
        self.t += 1

    def state(self):
        return {}


class Adam:
    kind = "adam"

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, w in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k], self.v[k] = np.zeros_like(w), np.zeros_like(w)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        out = {}
        for k in self.m:
            out[f"m:{k}"], out[f"v:{k}"] = self.m[k], self.v[k]
        return out


def make_optimizer(kind, lr, betas=(0.9, 0.999), eps=1e-8):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, betas, eps)
    raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {kind!r}")


def scheduled_lr(epoch, lr, decay_epochs, decay_factor):
    """Rate for 1-based ``epoch``: multiplied by ``decay_factor`` after each decay epoch."""
    return lr * decay_factor ** sum(1 for d in decay_epochs if epoch > d)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.01
    decay_epochs: tuple = (5, 10)
    decay_factor: float = 0.1
    seed: int = 0


def desk_splits(source, seed, sizes=DESK_SPLITS, low=0.3, high=1.0, size=28):
    """Disjoint train/eval/test draws from ``source``, each rescaled by ``U[low, high]``.

    The draw and the rescale factors both derive from ``seed``; each split
    gets its own child stream.
    """
    if sum(sizes) > len(source):
        raise ConfigurationError(f"need {sum(sizes)} source images, have {len(source)}")
    perm_seq, *split_seqs = np.random.SeedSequence(seed).spawn(1 + len(sizes))
    perm = np.random.default_rng(perm_seq).permutation(len(source))
    out, start = [], 0
    for n, sq in zip(sizes, split_seqs):
        part = source.subset(perm[start:start + n])
        out.append(synth_scaled_dataset(part, int(sq.generate_state(1)[0]), size=size, low=low, high=high))
        start += n
    return tuple(out)


def predict(net, images, batch_size=50):
    out = []
    for s in range(0, len(images), batch_size):
        out.append(net.forward(images[s:s + batch_size], training=False))
    return np.concatenate(out) if out else np.zeros((0, net.spec.n_classes))


def evaluate(net, dataset, batch_size=50):
    """Fraction of items whose arg-max logit equals the label."""
    if len(dataset) == 0:
        return float("nan")
    logits = predict(net, dataset.images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


LOG_COLUMNS = ("epoch", "train_loss", "eval_accuracy", "lr")


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], f"{r['train_loss']:.9g}", f"{r['eval_accuracy']:.9g}", f"{r['lr']:.9g}"])


def train(net, train_set, eval_set, cfg, checkpoint_path=None, log_path=None, optimizer=None,
          rng=None, start_epoch=0, progress=None):
    """Mini-batch training; deterministic given ``cfg.seed``.

    Row 0 of the log is the evaluation before any update. A checkpoint is
    written after every decay epoch and after the final one.
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    opt = optimizer or make_optimizer(cfg.optimizer, cfg.lr)
    rng = rng or np.random.default_rng(cfg.seed)
    rows = []
    if start_epoch == 0:
        rows.append({"epoch": 0, "train_loss": float("nan"), "eval_accuracy": evaluate(net, eval_set),
                     "lr": scheduled_lr(1, cfg.lr, cfg.decay_epochs, cfg.decay_factor)})
    params = net.parameters()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        opt.lr = scheduled_lr(epoch, cfg.lr, cfg.decay_epochs, cfg.decay_factor)
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = net.forward(train_set.images[idx], training=True)
            loss, g = cross_entropy(logits, train_set.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            net.backward(g)
            opt.step(params, net.gradients())
            total += loss * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": total / seen, "eval_accuracy": evaluate(net, eval_set),
               "lr": opt.lr}
        rows.append(row)
        if progress:
            progress(row)
        if checkpoint_path and (epoch in cfg.decay_epochs or epoch == cfg.epochs):
            save_checkpoint(checkpoint_path, net, opt, rng, epoch)
    if log_path:
        write_log(rows, log_path)
    return rows


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "scdcf-checkpoint"
CHECKPOINT_VERSION = 1


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, net, optimizer=None, rng=None, epoch=0):
    """Text header followed by little-endian float64 tensors in header order."""
    tensors = [(f"param:{k}", v) for k, v in net.parameters().items()]
    tensors += [(f"buffer:{k}", v) for k, v in net.buffers().items()]
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"kind": optimizer.kind, "lr": optimizer.lr, "t": optimizer.t}
        if optimizer.kind == "adam":
            opt_meta.update(betas=list(optimizer.betas), eps=optimizer.eps)
        tensors += [(f"opt:{k}", v) for k, v in optimizer.state().items()]
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"spec={_json(net.spec.to_dict())}",
             f"epoch={int(epoch)}",
             f"optimizer={_json(opt_meta)}",
             f"rng={_json(rng.bit_generator.state if rng is not None else None)}",
             f"tensors={len(tensors)}"]
    for name, v in tensors:
        lines.append(f"tensor {name} <f8 {','.join(str(d) for d in v.shape)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def _read_header(raw, path):
    pos, lines = 0, []
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: unterminated header")
        line = raw[pos:end].decode("utf-8")
        pos = end + 1
        if line == "end":
            return lines, pos
        lines.append(line)


def load_checkpoint(path):
    """Returns ``(net, optimizer, rng, epoch)``; optimizer and rng may be ``None``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    lines, pos = _read_header(raw, path)
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}":
        raise FormatError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    meta, specs = {}, []
    for line in lines[1:]:
        if line.startswith("tensor "):
            _, name, dtype, shape = line.split(" ")
            if dtype != "<f8":
                raise FormatError(f"{path}: unsupported dtype {dtype}")
            specs.append((name, tuple(int(d) for d in shape.split(",")) if shape else ()))
        else:
            k, _, v = line.partition("=")
            meta[k] = v
    d = json.loads(meta["spec"])
    for k in ("widths", "pool", "hidden", "input_hw"):
        d[k] = tuple(d[k])
    net = build_network(NetworkSpec.from_dict(d), 0)
    params = net.parameters()
    opt_meta = json.loads(meta["optimizer"])
    optimizer = None
    if opt_meta is not None:
        optimizer = make_optimizer(opt_meta["kind"], opt_meta["lr"],
                                   opt_meta.get("betas", (0.9, 0.999)), opt_meta.get("eps", 1e-8))
        optimizer.t = opt_meta["t"]
    for name, shape in specs:
        n = int(np.prod(shape)) * 8
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated payload at {name}")
        arr = np.frombuffer(raw[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
        kind, _, key = name.partition(":")
        if kind == "param":
            if params[key].shape != arr.shape:
                raise FormatError(f"{path}: shape mismatch for {key}")
            np.copyto(params[key], arr)
        elif kind == "buffer":
            net.set_buffer(key, arr)
        elif kind == "opt":
            which, _, pname = key.partition(":")
            getattr(optimizer, which)[pname] = arr
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    rng = None
    rng_state = json.loads(meta["rng"])
    if rng_state is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
    return net, optimizer, rng, int(meta["epoch"])


def match_cnn_widths(spec, tol=0.05, max_scale=4.0):
    """CNN spec whose parameter count is closest to the ScDCF one, scaling all widths together."""
    target = build_network(spec, 0).num_params()
    best = None
    base = np.array(spec.widths, dtype=np.float64)
    for c in np.arange(0.25, max_scale + 1e-9, 0.01):
        widths = tuple(max(1, int(round(w))) for w in base * c)
        cnn = replace(spec, kind="cnn", widths=widths)
        n = build_network(cnn, 0).num_params()
        err = abs(n - target) / target
        if best is None or err < best[0]:
            best = (err, cnn)
    if best[0] > tol:
        raise ConfigurationError(f"no CNN width within {tol:.0%} of {target} parameters")
    return best[1]


def desk_comparison(source, seeds, spec=None, cfg=None, progress=None):
    """Test accuracy of ScDCF and its parameter-matched CNN on the desk splits of every seed.

    Returns ``{"scdcf": [...], "cnn": [...]}`` in seed order.
    """
    spec = spec or NetworkSpec()
    cfg = cfg or TrainConfig()
    cnn = match_cnn_widths(spec)
    out = {"scdcf": [], "cnn": []}
    for seed in seeds:
        tr, ev, te = desk_splits(source, seed)
        for sp in (spec, cnn):
            net = build_network(sp, seed)
            train(net, tr, ev, replace(cfg, seed=seed))
            acc = evaluate(net, te)
            out[sp.kind].append(acc)
            if progress:
                progress(sp.kind, seed, acc)
    return out
