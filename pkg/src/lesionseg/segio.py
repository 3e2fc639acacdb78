"""On-disk formats: SEG1 slice containers, parameter dumps, result tables, configs.

SEG1 layout (little-endian)::

    offset  size  field
    0       4     magic b"SEG1"
    4       2     u16 version (1)
    6       2     u16 phenotype code (0 iph, 1 contusion, 2 extra_axial)
    8       4     u32 case_id
    12      4     u32 slice_idx
    16      4     u32 h
    20      4     u32 w
    24      4hw   float32 image, row-major
    24+4hw  hw    uint8 mask, row-major
"""
from __future__ import annotations

import csv
import dataclasses
import io
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossConfig
from .models import ModelConfig
from .nn import ParamEntry, ParamStore, TrainConfig
from .synthdata import PHENOTYPES, PhantomSpec, SliceSample

SEG1_MAGIC = b"SEG1"
SEG1_VERSION = 1
SEG1_HEADER = struct.Struct("<4sHHIIII")  # 24 bytes


class FormatError(ValueError):
    """Base class for malformed files."""


class NotSEG1Error(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# -- SEG1 ---------------------------------------------------------------------


def encode_slice(s: SliceSample) -> bytes:
    img = np.asarray(s.image)
    msk = np.asarray(s.mask)
    if img.ndim != 4 or img.shape[:2] != (1, 1):
        raise ValueError(f"image must have shape [1, 1, h, w], got {img.shape}")
    if msk.shape != img.shape:
        raise ValueError(f"mask shape {msk.shape} != image shape {img.shape}")
    h, w = img.shape[2:]
    header = SEG1_HEADER.pack(
        SEG1_MAGIC, SEG1_VERSION, PHENOTYPES.index(s.phenotype), s.case_id, s.slice_idx, h, w
    )
    return header + img.astype("<f4").tobytes() + msk.astype(np.uint8).tobytes()


def decode_slice(buf: bytes, name: str = "<buffer>") -> SliceSample:
    if len(buf) < 4 or buf[:4] != SEG1_MAGIC:
        raise NotSEG1Error(f"{name}: not a SEG1 file")
    if len(buf) < SEG1_HEADER.size:
        raise TruncatedFileError(f"{name}: truncated header ({len(buf)} of {SEG1_HEADER.size} bytes)")
    _, version, pheno, case_id, slice_idx, h, w = SEG1_HEADER.unpack_from(buf)
    if version != SEG1_VERSION:
        raise UnsupportedVersionError(f"{name}: unsupported SEG1 version {version}")
    if pheno >= len(PHENOTYPES):
        raise FormatError(f"{name}: unknown phenotype code {pheno}")
    need = SEG1_HEADER.size + 5 * h * w
    if len(buf) < need:
        raise TruncatedFileError(f"{name}: truncated payload ({len(buf)} of {need} bytes)")
    if len(buf) > need:
        raise FormatError(f"{name}: {len(buf) - need} trailing bytes after payload")
    off = SEG1_HEADER.size
    img = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).astype(np.float32)
    msk = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off + 4 * h * w).copy()
    return SliceSample(
        image=img.reshape(1, 1, h, w),
        mask=msk.reshape(1, 1, h, w),
        phenotype=PHENOTYPES[pheno],
        case_id=case_id,
        slice_idx=slice_idx,
    )


def write_slice(path, s: SliceSample) -> None:
    Path(path).write_bytes(encode_slice(s))


def read_slice(path) -> SliceSample:
    return decode_slice(Path(path).read_bytes(), str(path))


# -- parameter dumps ----------------------------------------------------------
#
# "LSP1", u16 version, u16 dtype code (0 float32, 1 float64),
# model config as u16 length + ascii "arch,depth,base,in_channels",
# u32 entry count, then per entry: u16 name length + name,
# u8 ndim + u32 dims, weight data, u32 bias length, bias data.

PARAMS_MAGIC = b"LSP1"
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


def encode_params(params: ParamStore, model: ModelConfig) -> bytes:
    dt = np.dtype(params.dtype).newbyteorder("<")
    if dt not in _DTYPES:
        raise ValueError(f"unsupported parameter dtype {params.dtype}")
    out = io.BytesIO()
    out.write(PARAMS_MAGIC + struct.pack("<HH", 1, _DTYPES.index(dt)))
    desc = f"{model.arch},{model.depth},{model.base_channels},{model.in_channels}".encode()
    out.write(struct.pack("<H", len(desc)) + desc)
    out.write(struct.pack("<I", len(params)))
    for e in params:
        name = e.layer_id.encode()
        out.write(struct.pack("<H", len(name)) + name)
        out.write(struct.pack("<B", e.weight.ndim) + struct.pack(f"<{e.weight.ndim}I", *e.weight.shape))
        out.write(e.weight.astype(dt).tobytes())
        out.write(struct.pack("<I", e.bias.size) + e.bias.astype(dt).tobytes())
    return out.getvalue()


def decode_params(buf: bytes, name: str = "<buffer>") -> tuple[ParamStore, ModelConfig]:
    if buf[:4] != PARAMS_MAGIC:
        raise FormatError(f"{name}: not a parameter dump")
    try:
        version, code = struct.unpack_from("<HH", buf, 4)
        if version != 1:
            raise UnsupportedVersionError(f"{name}: unsupported parameter dump version {version}")
        pos = 8
        (n,) = struct.unpack_from("<H", buf, pos)
        arch, depth, base, cin = buf[pos + 2 : pos + 2 + n].decode().split(",")
        pos += 2 + n
        model = ModelConfig(arch=arch, depth=int(depth), base_channels=int(base), in_channels=int(cin))
        dt = _DTYPES[code]
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            layer_id = buf[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            if pos + size * dt.itemsize > len(buf):
                raise TruncatedFileError(f"{name}: truncated weight data for {layer_id}")
            weight = np.frombuffer(buf, dt, size, pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += size * dt.itemsize
            (nb,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + nb * dt.itemsize > len(buf):
                raise TruncatedFileError(f"{name}: truncated bias data for {layer_id}")
            bias = np.frombuffer(buf, dt, nb, pos).astype(dt.newbyteorder("="))
            pos += nb * dt.itemsize
            entries.append(ParamEntry(layer_id, weight, bias, np.zeros_like(weight), np.zeros_like(bias)))
    except struct.error as exc:
        raise TruncatedFileError(f"{name}: truncated parameter dump") from exc
    if pos != len(buf):
        raise FormatError(f"{name}: {len(buf) - pos} trailing bytes")
    return ParamStore(entries), model


def write_params(path, params: ParamStore, model: ModelConfig) -> None:
    Path(path).write_bytes(encode_params(params, model))


def read_params(path) -> tuple[ParamStore, ModelConfig]:
    return decode_params(Path(path).read_bytes(), str(path))


# -- result tables ------------------------------------------------------------

RESULT_FIELDS = ("architecture", "loss", "seed", "dice", "sensitivity", "specificity", "epochs", "params")
ARCH_LABELS = {"unet": "UNet 2D", "unetpp": "UNet++ 2D"}
LOSS_LABELS = {
    "bce": "Binary Cross-Entropy",
    "dice": "Dice Loss",
    "focal": "Focal Loss",
    "focal_tversky": "Focal Tversky Loss",
}


@dataclass
class ResultRow:
    architecture: str
    loss: str
    seed: int
    dice: float
    sensitivity: float
    specificity: float
    epochs: int
    params: int

    @property
    def failed(self) -> bool:
        return not np.isfinite(self.dice)


def fmt4(x: float) -> str:
    """Four decimals, round-half-even on the binary value; failed metrics render as ``nan``."""
    return "nan" if not np.isfinite(x) else f"{x:.4f}"


def results_csv(rows) -> str:
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([r.architecture, r.loss, r.seed, fmt4(r.dice), fmt4(r.sensitivity),
                    fmt4(r.specificity), r.epochs, r.params])
    return buf.getvalue()


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != RESULT_FIELDS:
            raise FormatError(f"{path}: unexpected header {rd.fieldnames}")
        return [
            ResultRow(r["architecture"], r["loss"], int(r["seed"]), float(r["dice"]),
                      float(r["sensitivity"]), float(r["specificity"]), int(r["epochs"]), int(r["params"]))
            for r in rd
        ]


def summarize_rows(rows):
    """Average over seeds per (architecture, loss), in first-appearance order.

    Returns ``[(arch, loss, dice, sens, spec, n_ok, n_failed), ...]``; metric
    means are ``nan`` when every seed of a cell failed.
    """
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.architecture, r.loss), []).append(r)
    out = []
    for (arch, loss), rs in groups.items():
        ok = [r for r in rs if not r.failed]
        means = [float(np.mean([getattr(r, k) for r in ok])) if ok else float("nan")
                 for k in ("dice", "sensitivity", "specificity")]
        out.append((arch, loss, *means, len(ok), len(rs) - len(ok)))
    return out


def summary_text(rows, title: str = "") -> str:
    """Aligned plain-text table of seed means; the best mean Dice is wrapped in ``**``."""
    summ = summarize_rows(rows)
    dices = [s[2] for s in summ if np.isfinite(s[2])]
    best = max(f"{d:.4f}" for d in dices) if dices else None
    header = ("Architecture", "Objective Function", "Dice Coefficient", "Sensitivity", "Specificity", "Seeds")
    body = []
    for arch, loss, d, se, sp, n_ok, n_fail in summ:
        dice = fmt4(d)
        if best is not None and dice == best:
            dice = f"**{dice}**"
        seeds = f"{n_ok}" + (f" ({n_fail} failed)" if n_fail else "")
        body.append((ARCH_LABELS.get(arch, arch), LOSS_LABELS.get(loss, loss), dice, fmt4(se), fmt4(sp), seeds))
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = [title] if title else []
    fmt = lambda r: "  ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip()
    lines.append(fmt(header))
    lines.append("  ".join("-" * wd for wd in widths))
    lines.extend(fmt(r) for r in body)
    return "\n".join(lines) + "\n"


def summary_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + "_summary.txt")


def write_results(path, rows, title: str = "") -> tuple[Path, Path]:
    """Write the per-seed CSV at ``path`` and the seed-averaged table next to it."""
    rows = list(rows)
    text = results_csv(rows)
    p = Path(path)
    p.write_text(text)
    s = summary_path(p)
    s.write_text(summary_text(rows, title))
    return p, s


# -- run configuration --------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Harness-level settings: which cells to run and how to evaluate them."""

    architectures: tuple[str, ...] = ("unet", "unetpp")
    losses: tuple[str, ...] = ("bce", "dice", "focal", "focal_tversky")
    seeds: tuple[int, ...] = (0, 1, 2)
    threshold: float = 0.5
    pooling: str = "slice"
    train_fraction: float = 0.8
    split_seed: int = 0
    triptych_every: int = 10

    def __post_init__(self):
        from .losses import LOSSES
        from .models import ARCHITECTURES

        if not self.architectures:
            raise ValueError("architectures must be non-empty")
        if not self.losses:
            raise ValueError("losses must be non-empty")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for a in self.architectures:
            if a not in ARCHITECTURES:
                raise ValueError(f"unknown architecture {a!r}; expected one of {ARCHITECTURES}")
        for l in self.losses:
            if l not in LOSSES:
                raise ValueError(f"unknown loss {l!r}; expected one of {LOSSES}")
        if len(set(self.architectures)) != len(self.architectures) or len(set(self.losses)) != len(self.losses):
            raise ValueError("architectures and losses must not repeat")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must not repeat")
        for s in self.seeds:
            if not 0 <= s < 2**64:
                raise ValueError(f"seed {s} is not an unsigned 64-bit integer")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.pooling not in ("slice", "global"):
            raise ValueError("pooling must be 'slice' or 'global'")
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.triptych_every < 0:
            raise ValueError("triptych_every must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: PhantomSpec = field(default_factory=PhantomSpec)
    grid: GridSpec = field(default_factory=GridSpec)

    def __iter__(self):
        return iter((self.model, self.loss, self.train, self.data, self.grid))


SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": PhantomSpec,
    "grid": GridSpec,
}

_DOCS = {
    "model.arch": "unet | unetpp",
    "model.depth": "number of 2x2 poolings; slice dims must be divisible by 2**depth",
    "model.base_channels": "filters at level 0, doubling per level",
    "model.in_channels": "input image channels",
    "loss.kind": "bce | dice | focal | focal_tversky (used by `train`)",
    "loss.alpha": "focal class weight, (0, 1)",
    "loss.gamma_focal": "focal exponent, >= 0",
    "loss.beta": "Tversky false-positive weight, [0, 1]",
    "loss.gamma_ftl": "focal-Tversky exponent, [1, 3]",
    "loss.epsilon": "probability clamp inside the bce/focal logs, > 0",
    "loss.dice_smoothing": "denominator | symmetric",
    "train.learning_rate": "SGD step size, > 0",
    "train.momentum": "[0, 1)",
    "train.epochs": ">= 0",
    "train.batch_size": ">= 1",
    "train.seed": "u64; initialisation and shuffling (matrix cells derive their own)",
    "train.clip_norm": "global gradient-norm cap, > 0, or none",
    "train.lr_schedule": "constant | cosine (decays to 0 after the warmup)",
    "train.warmup_epochs": "epochs of linear learning-rate ramp-up, >= 0",
    "train.head_prior": "initial foreground probability of the output, (0, 1), or none for a zero head bias",
    "data.h": "slice height",
    "data.w": "slice width",
    "data.n_cases": "number of synthetic cases",
    "data.slices_per_case": "slices per case",
    "data.phenotype": "iph | contusion | extra_axial",
    "data.noise_std": "additive Gaussian noise, >= 0",
    "data.seed": "u64; case seeds are derived from it",
    "grid.architectures": "comma-separated subset of unet, unetpp",
    "grid.losses": "comma-separated subset of bce, dice, focal, focal_tversky",
    "grid.seeds": "comma-separated u64 seeds",
    "grid.threshold": "binarisation threshold, (0, 1)",
    "grid.pooling": "slice | global metric pooling",
    "grid.train_fraction": "fraction of cases used for training, (0, 1]; 1 evaluates on the training set",
    "grid.split_seed": "u64; case shuffle for the train/validation split",
    "grid.triptych_every": "debug image interval in epochs for `train`; 0 disables",
}


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _convert(raw: str, default, name: str, line: int):
    try:
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(_scalar(x, elem) for x in items)
        if default is None or name in ("clip_norm", "head_prior"):
            return None if raw.lower() == "none" else float(raw)
        return _scalar(raw, type(default))
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} ({exc})", line) from None


def _scalar(raw: str, typ):
    if typ is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError("expected a boolean")
    if typ is int:
        return int(raw, 0)
    if typ is float:
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``[section]`` / ``key = value`` text; see :func:`default_config_text`."""
    values: dict[str, dict[str, tuple[object, int]]] = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, raw = (x.strip() for x in line.split("=", 1))
        fields = _field_types(SECTIONS[section])
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]; allowed: {', '.join(fields)}", lineno)
        if key in values[section]:
            warnings.warn(
                f"{source}:{lineno}: duplicate key {section}.{key}; the last value wins",
                stacklevel=2,
            )
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        values[section][key] = (_convert(raw, default, key, lineno), lineno)
    built = {}
    for sec, cls in SECTIONS.items():
        kwargs = {k: v for k, (v, _) in values[sec].items()}
        try:
            built[sec] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            lines = [ln for _, ln in values[sec].values()]
            # point at the offending key when the message names it
            where = next((ln for k, (_, ln) in values[sec].items() if k in str(exc)), None)
            raise ConfigError(f"[{sec}] {exc}", where if where is not None else (max(lines) if lines else None)) from None
    _cross_check(built)
    return RunConfig(**built)


def _cross_check(built):
    data, model = built["data"], built["model"]
    m = 2 ** model.depth
    if data.h % m or data.w % m:
        raise ConfigError(
            f"data.h={data.h} and data.w={data.w} must be divisible by 2**model.depth = {m}"
        )


def parse_config(path) -> RunConfig:
    """Read a run configuration file. A missing path means all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def _render(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def default_config_text() -> str:
    """Reference config with every key at its default, one comment per key."""
    cfg = RunConfig()
    out = ["# lesionseg run configuration (all keys optional; shown at their defaults)", ""]
    for sec, obj in zip(SECTIONS, cfg):
        out.append(f"[{sec}]")
        for f in dataclasses.fields(obj):
            doc = _DOCS.get(f"{sec}.{f.name}", "")
            out.append(f"{f.name} = {_render(getattr(obj, f.name))}" + (f"  # {doc}" if doc else ""))
        out.append("")
    return "\n".join(out)


def config_to_text(cfg: RunConfig) -> str:
    """Serialise ``cfg`` so that ``parse_config_text`` reproduces it."""
    out = []
    for sec, obj in zip(SECTIONS, cfg):
        out.append(f"[{sec}]")
        out.extend(f"{f.name} = {_render(getattr(obj, f.name))}" for f in dataclasses.fields(obj))
        out.append("")
    return "\n".join(out)


# -- debug images -------------------------------------------------------------


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary 8-bit portable graymap of a [h, w] array with values in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    px = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    return f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + px.tobytes()


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8, w * h).reshape(h, w)


def triptych(image: np.ndarray, truth: np.ndarray, pred: np.ndarray, gap: int = 2) -> np.ndarray:
    """Input | truth | prediction side by side, separated by white columns."""
    h = image.shape[-2]
    sep = np.ones((h, gap))
    parts = [np.asarray(image, float).reshape(h, -1), sep,
             np.asarray(truth, float).reshape(h, -1), sep,
             np.asarray(pred, float).reshape(h, -1)]
    return np.concatenate(parts, axis=1)


def ensure_empty_dir(path, force: bool) -> Path:
    """Create ``path``; refuse a non-empty existing directory unless ``force``."""
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise FileExistsError(f"{p} exists and is not a directory")
    if p.exists() and any(p.iterdir()) and not force:
        raise FileExistsError(f"output directory {p} is not empty (use --force to overwrite)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def atomic_write(path, data: bytes | str) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    if isinstance(data, str):
        data = data.encode()
    tmp.write_bytes(data)
    os.replace(tmp, p)
