"""Flat ``section.key = value`` configuration documents.

A config file holds one assignment per line; ``#`` starts a comment. Keys
are dotted (``net.K``, ``grid.T``, ``train.lr``). Values given with
``--set`` on the command line override the file. Every key is declared in
:data:`KEYS` with a parser and a default; keys declared with ``REQUIRED``
must be supplied by the user for the subcommands that read them.
"""
from dataclasses import dataclass

from .errors import ConfigurationError


class ConfigKeyError(ConfigurationError):
    """A key is unknown, missing or malformed; ``key`` names it."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


REQUIRED = object()


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _list(parse):
    def inner(s):
        return tuple(parse(p) for p in s.replace(",", " ").split())
    inner.__name__ = f"list of {parse.__name__}"
    return inner


def _choice(*options):
    def inner(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    inner.__name__ = "|".join(options)
    return inner


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str


def _k(name, parse, default, help):
    return Key(name, parse, default, help)


_ints, _floats, _strs, _bools = _list(int), _list(float), _list(str), _list(_bool)

KEYS = {k.name: k for k in [
    # network template
    _k("net.kind", _choice("scdcf", "cnn"), "scdcf", "model family"),
    _k("net.widths", _ints, (8, 16), "output channels per conv block"),
    _k("net.L", int, 7, "spatial filter size in pixels (odd)"),
    _k("net.L_alpha", int, 3, "scale filter taps"),
    _k("net.K", int, 15, "spatial basis modes kept"),
    _k("net.K_alpha", int, 3, "scale basis modes kept"),
    _k("net.padding", _choice("replicate", "zero"), "replicate", "scale-axis padding"),
    _k("net.pool", _bools, (True, True), "2x2 average pooling after each block"),
    _k("net.batchnorm", _bool, True, "batch normalisation after each conv"),
    _k("net.bn_mode", _choice("scale_space", "per_scale"), "scale_space", "batch-norm statistics"),
    _k("net.hidden", _ints, (64,), "hidden widths of the dense head"),
    _k("net.j", _opt_float, None, "support exponent of the finest grid scale (auto fills the window)"),
    _k("net.sampling", _choice("area", "point"), "area", "how basis modes are sampled on pixels"),
    _k("net.init_A", float, 1.0, "A_l of every block when net.init = A"),
    _k("net.init", _choice("he", "A"), "he", "coefficient initialisation"),
    _k("grid.T", float, 1.0, "scale range is [-T, T]"),
    _k("grid.N_s", int, 5, "number of scale channels"),
    # basis dump
    _k("basis.which", _choice("spatial", "scale", "both"), "both", "which basis to write"),
    # equivariance verification
    _k("verify.widths", _ints, (8, 8), "verification net widths"),
    _k("verify.L", int, 17, "ScDCF filter size"),
    _k("verify.cnn_L", int, 5, "filter size of the comparison CNN"),
    _k("verify.L_alpha", int, 3, "scale filter taps"),
    _k("verify.K", int, 8, "spatial modes"),
    _k("verify.K_alpha", int, 3, "scale modes"),
    _k("verify.T", float, 1.5, "scale range"),
    _k("verify.N_s", int, 13, "scale channels"),
    _k("verify.padding", _choice("replicate", "zero"), "replicate", "scale-axis padding"),
    _k("verify.size", int, 56, "input side length"),
    _k("verify.steps", _ints, (-1, 0, 1), "scale shifts in grid steps (0 checks the identity)"),
    _k("verify.v", _floats, (0.0, 0.0), "translation (v_x, v_y) in pixels"),
    _k("verify.seeds", int, 3, "random nets and inputs, counted from --seed"),
    # sweeps
    _k("sweep.width", int, 4, "channels of every layer"),
    _k("sweep.L", int, 13, "filter size"),
    _k("sweep.L_alpha", int, 3, "scale filter taps"),
    _k("sweep.K", int, 8, "spatial modes"),
    _k("sweep.K_alpha", int, 3, "scale modes"),
    _k("sweep.T", float, 1.0, "scale range of the depth sweep (sets the grid spacing of both sweeps)"),
    _k("sweep.N_s", int, 9, "scale channels of the depth sweep"),
    _k("sweep.size", int, 40, "input side length"),
    _k("sweep.seeds", int, 5, "seeds per sweep point, counted from --seed"),
    _k("sweep.depths", _ints, (1, 2, 3, 4, 5, 6), "depths of the depth sweep"),
    _k("sweep.paddings", _list(_choice("replicate", "zero")), ("replicate", "zero"), "scale paddings compared"),
    _k("sweep.steps", int, 1, "scale shift in grid steps"),
    _k("truncation.T_values", _floats, (0.5, 1.0, 1.5, 2.0), "truncation ranges T (increasing)"),
    _k("truncation.depth", int, 2, "layers of the truncation net"),
    _k("truncation.finest_support", float, 1.5, "finest filter half-width in pixels at the largest T"),
    # stability
    _k("stability.widths", _ints, (4, 4), "net widths"),
    _k("stability.L", int, 13, "filter size"),
    _k("stability.K", int, 8, "spatial modes"),
    _k("stability.K_alpha", int, 3, "scale modes"),
    _k("stability.T", float, 1.0, "scale range"),
    _k("stability.N_s", int, 9, "scale channels"),
    _k("stability.size", int, 56, "input side length"),
    _k("stability.grad_inf", _floats, (0.02, 0.1), "deformation Jacobian sizes, cycled over the triples"),
    _k("stability.triples", int, 20, "random (net, tau, beta) triples"),
    _k("stability.max_steps", int, 1, "largest |beta| in grid steps"),
    _k("stability.slack", float, 0.5, "allowed relative excess of measured error over the bound"),
    # data
    _k("data.images", str, REQUIRED, "IDX image file of the source digits"),
    _k("data.labels", str, REQUIRED, "IDX label file of the source digits"),
    _k("data.count", int, 0, "source digits to rescale (0 takes all)"),
    _k("data.low", float, 0.3, "smallest rescale factor"),
    _k("data.high", float, 1.0, "largest rescale factor"),
    _k("data.size", int, 28, "output canvas side length"),
    _k("data.splits", _ints, (2000, 500, 2000), "train/eval/test sizes of the desk protocol"),
    # training
    _k("train.epochs", int, 15, "epochs"),
    _k("train.batch_size", int, 64, "mini-batch size"),
    _k("train.optimizer", _choice("adam", "sgd"), "adam", "optimizer"),
    _k("train.lr", float, 0.01, "initial learning rate"),
    _k("train.decay_epochs", _ints, (5, 10), "epochs after which the rate decays"),
    _k("train.decay_factor", float, 0.1, "rate multiplier at each decay"),
    _k("train.match_cnn", _bool, True, "for net.kind=cnn, rescale widths to match the ScDCF parameter count"),
    # evaluation
    _k("eval.checkpoint", str, REQUIRED, "checkpoint to evaluate"),
    _k("eval.split", _choice("train", "eval", "test"), "test", "desk split to score"),
    # run directory
    _k("run.label", str, "run", "prefix of the run directory name"),
]}

SECTIONS = {
    "basis": ("net", "grid", "basis", "run"),
    "verify": ("verify", "run"),
    "sweep-depth": ("sweep", "run"),
    "sweep-truncation": ("sweep", "truncation", "run"),
    "stability": ("stability", "run"),
    "synth-data": ("data", "run"),
    "train": ("net", "grid", "data", "train", "run"),
    "eval": ("data", "eval", "run"),
}


def keys_for(command):
    secs = SECTIONS[command]
    return [k for k in KEYS.values() if k.name.split(".")[0] in secs]


def parse_text(text, source="<config>"):
    """Raw ``{key: string}`` pairs from a config document."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigKeyError(line, f"{source} line {n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigKeyError(item, "--set expects key=value")
        out[key.strip()] = value.strip()
    return out


def resolve(command, raw):
    """Typed values for every key ``command`` reads.

    Unknown keys, keys belonging to another subcommand's sections,
    unparsable values and missing required keys all raise
    :class:`ConfigKeyError`.
    """
    allowed = {k.name: k for k in keys_for(command)}
    for name in raw:
        if name not in KEYS:
            raise ConfigKeyError(name, "unknown key")
        if name not in allowed:
            raise ConfigKeyError(name, f"not used by '{command}'")
    cfg = {}
    for name, key in allowed.items():
        if name in raw:
            try:
                cfg[name] = key.parse(raw[name])
            except ValueError as exc:
                raise ConfigKeyError(name, f"invalid value {raw[name]!r} ({exc})") from None
        elif key.default is REQUIRED:
            raise ConfigKeyError(name, "required key missing")
        else:
            cfg[name] = key.default
    return cfg


def format_value(v):
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if v is None:
        return "auto"
    return str(v).lower() if isinstance(v, bool) else str(v)


def dump(cfg):
    """Canonical text form, one sorted ``key = value`` line per entry."""
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in sorted(cfg))


def help_text(command):
    rows = []
    for k in keys_for(command):
        d = "(required)" if k.default is REQUIRED else f"[{format_value(k.default)}]"
        rows.append(f"  {k.name:24s} {k.help} {d}")
    return "config keys:\n" + "\n".join(rows)
