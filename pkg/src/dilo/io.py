"""On-disk formats: tensor files, run configuration, checkpoint manifest, metrics CSV."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"DILOTNSR"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write to a sibling temp file and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- tensors ---------------------------------------------------------------------


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise UnsupportedDtypeError(f"only float32 and float64 are storable, got {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFileError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < len(MAGIC):
        raise TruncatedFileError(f"file has {len(buf)} bytes, shorter than the magic")
    if buf[:8] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:8]!r}")
    if len(buf) < 11:
        raise TruncatedFileError("header truncated")
    version, code, ndim = struct.unpack_from("<BBB", buf, 8)
    if version != VERSION:
        raise UnsupportedVersionError(f"tensor file version {version}, expected {VERSION}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    head = 11 + 8 * ndim
    if len(buf) < head:
        raise TruncatedFileError("shape header truncated")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 11)
    dt = _DTYPES[code]
    need = dt.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(buf) - head < need:
        raise TruncatedFileError(f"payload has {len(buf) - head} bytes, expected {need}")
    if len(buf) - head > need:
        raise TensorFileError(f"{len(buf) - head - need} trailing bytes after payload")
    return np.frombuffer(buf, dtype=dt, count=need // dt.itemsize, offset=head).reshape(shape).astype(dt.newbyteorder("="))


def write_tensor(path, arr) -> None:
    atomic_write(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- run configuration --------------------------------------------------------------


@dataclass
class ScheduleSection:
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_substeps: int = 50


@dataclass
class AeSection:
    latent_dim: int = 16
    hidden1: int = 128
    hidden2: int = 64
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 32


@dataclass
class LdmSection:
    hidden: int = 128
    temb_dim: int = 16
    epochs: int = 1500
    lr: float = 1e-3
    batch_size: int = 100


@dataclass
class SurrogateSection:
    modes: int = 6
    width: int = 16
    n_blocks: int = 3
    proj_width: int = 32
    epochs: int = 200
    lr: float = 2e-3
    batch_size: int = 16
    n_heldout: int = 100


@dataclass
class PhysicsSection:
    problem: str = "eit-blobs"
    grid: int = 16
    patterns: int = 8
    n_samples: int = 1100
    ns_time: float = 1.0
    ns_dt: float = 0.01


@dataclass
class InvertSection:
    iterations: int = 3000
    optimizer: str = "adam"
    lr: float = 5e-3
    weight_decay: float = 0.0
    noise: float = 0.0
    surrogate: str = "exact"
    target: str = "oracle"
    instance: int = 0
    guidance: float = 1e-3


_SECTIONS = {
    "schedule": ScheduleSection,
    "ae": AeSection,
    "ldm": LdmSection,
    "surrogate": SurrogateSection,
    "physics": PhysicsSection,
    "invert": InvertSection,
}


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    ae: AeSection = field(default_factory=AeSection)
    ldm: LdmSection = field(default_factory=LdmSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    invert: InvertSection = field(default_factory=InvertSection)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return asdict(self)


def _coerce(raw: str, typ: type, where: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str) -> RunConfig:
    """Parse sectioned ``key = value`` text; missing keys take defaults, unknown ones are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for name in cp.sections():
        cls = _SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"unknown section [{name}]")
        types = {f.name: type(f.default) for f in fields(cls)}
        section = getattr(cfg, name)
        for key, raw in cp.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(section, key, _coerce(raw, types[key], f"[{name}] {key}"))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        for key, value in asdict(getattr(cfg, name)).items():
            out.write(f"{key} = {value!r}\n" if isinstance(value, float) else f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


# --- checkpoints ---------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory, tensors: dict[str, np.ndarray], arch: dict[str, dict]) -> Path:
    """Write one tensor file per entry plus ``manifest.json`` with hashes and descriptors.

    Entry names look like ``component.k``; ``arch`` is keyed by component.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = f"{name}.tnsr"
        write_tensor(directory / fname, arr)
        comp = name.split(".", 1)[0]
        entries[name] = {"path": fname, "sha256": sha256_file(directory / fname), "arch": arch.get(comp, {})}
    manifest = directory / "manifest.json"
    atomic_write(manifest, (json.dumps({"version": 1, "entries": entries}, indent=1, sort_keys=True) + "\n").encode())
    return manifest


def read_manifest(directory) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ManifestError(f"no manifest.json in {directory}") from None
    tensors, arch = {}, {}
    for name, entry in meta["entries"].items():
        path = directory / entry["path"]
        if not path.exists():
            raise ManifestError(f"{name}: missing file {path}")
        if sha256_file(path) != entry["sha256"]:
            raise ManifestError(f"{name}: hash mismatch for {path}")
        tensors[name] = read_tensor(path)
        arch[name.split(".", 1)[0]] = entry["arch"]
    return tensors, arch


# --- metrics -------------------------------------------------------------------------

METRICS_HEADER = ("iter", "loss", "grad_norm", "grad_norm_exact", "mae", "wallclock_ms")


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def metrics_csv(diag, timing: bool = False) -> str:
    """Per-iteration CSV; optional columns are left empty. Wall-clock only when ``timing``."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for k in range(len(diag.loss)):
        w.writerow(
            [
                str(k),
                _fmt(diag.loss[k]),
                _fmt(diag.grad_norm[k]),
                _fmt(diag.grad_norm_exact[k]),
                _fmt(diag.mae[k]),
                _fmt(diag.wallclock_ms[k]) if timing else "",
            ]
        )
    return out.getvalue()


def emit_metrics(path, diag, timing: bool = False) -> None:
    atomic_write(path, metrics_csv(diag, timing).encode())


def read_metrics(path) -> dict[str, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    cols: dict[str, list] = {h: [] for h in METRICS_HEADER}
    for row in rows[1:]:
        for h, v in zip(METRICS_HEADER, row):
            cols[h].append(int(v) if h == "iter" else (None if v == "" else float(v)))
    return cols


# --- seeds ---------------------------------------------------------------------------


def derive_seed(seed: int, tag: str) -> int:
    """``seed XOR hash(tag)`` so per-component streams never alias."""
    h = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    return (int(seed) ^ h) & (2**64 - 1)


def thread_count() -> int:
    raw = os.environ.get("DILO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DILO_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)
