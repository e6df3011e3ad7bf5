"""File formats: PGM images, weight containers, measurement files, run config.

Weight container layout (all integers little-endian)::

    b"NLCS"  u32 version
    u32 n_phases  u32 block  u32 M  u32 N  f64 rate  u32 flags
    u32 patch_size  u32 patch_stride
    u32 n_tensors
    per tensor: u16 name_len, name (utf-8), u8 rank, u32 extents[rank],
                f64 payload[prod(extents)] (row-major)
    32-byte SHA-256 over everything above

Flags: bit 0 binary sampling, bit 1 measurement target ``b`` (else
``phi_u0``).  The scalars ``alpha``, ``beta``, ``theta`` and ``mu`` are
stored before their softplus.

Measurement file layout::

    b"NLCM"  u32 version
    f64 rate  u32 block  u32 M  u32 N
    u32 grid_rows  u32 grid_cols  u32 height  u32 width
    u8 matrix_kind (0 gaussian, 1 learned, 2 identity)  u8 binary
    u64 matrix_seed  64-byte ASCII hex SHA-256 of the sampling matrix
    f64 b[grid_rows * grid_cols, M]
"""

from __future__ import annotations

import configparser
import hashlib
import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .network import NetParams

WEIGHT_MAGIC = b"NLCS"
WEIGHT_VERSION = 1
MEAS_MAGIC = b"NLCM"
MEAS_VERSION = 1
MATRIX_KINDS = {"gaussian": 0, "learned": 1, "identity": 2}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images


def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary (P5) PGM to a float array in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _pgm_tokens(data, 3)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    px = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return px.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write ``img`` (values in [0, 1]) as 8-bit P5, rounding to nearest."""
    img = np.asarray(img, dtype=np.float64)
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """PGM natively; PNG and friends when Pillow is installed."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise FormatError(f"{path}: only PGM is supported without Pillow") from exc
    from .training import to_gray

    arr = np.asarray(Image.open(path), dtype=np.float64)
    return to_gray(arr / (65535.0 if arr.max() > 255 else 255.0))


# ---------------------------------------------------------------------------
# weights


def dumps_weights(params: NetParams, rate: float | None = None) -> bytes:
    named = params.named()
    buf = io.BytesIO()
    flags = (1 if params.binary else 0) | (2 if params.measurement_target == "b" else 0)
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<I", WEIGHT_VERSION))
    buf.write(struct.pack("<IIIIdI", params.n_phases, params.block, params.m, params.n,
                          params.m / params.n if rate is None else rate, flags))
    buf.write(struct.pack("<II", params.patch_size, params.patch_stride))
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


@dataclass
class WeightMeta:
    n_phases: int
    block: int
    m: int
    n: int
    rate: float
    flags: int
    patch_size: int
    patch_stride: int


def loads_weights(data: bytes) -> tuple[NetParams, WeightMeta]:
    if len(data) < 4 + 32 or data[:4] != WEIGHT_MAGIC:
        raise FormatError("not an NLCS weight container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("weight container checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight container version {version}")
    pos = 8
    head = struct.unpack_from("<IIIIdI", body, pos)
    pos += struct.calcsize("<IIIIdI")
    patch = struct.unpack_from("<II", body, pos)
    pos += 8
    meta = WeightMeta(*head, *patch)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode()
        pos += ln
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        if name in values:
            raise FormatError(f"tensor {name!r} stored twice")
        values[name] = arr.astype(np.float64)
    if pos != len(body):
        raise FormatError("trailing bytes in weight container")
    expected = set(inventory(meta.n_phases))
    if set(values) != expected:
        missing = sorted(expected - set(values))
        extra = sorted(set(values) - expected)
        raise FormatError(f"tensor inventory mismatch: missing {missing}, unexpected {extra}")
    params = NetParams.from_named(
        values, meta.n_phases, binary=bool(meta.flags & 1),
        measurement_target="b" if meta.flags & 2 else "phi_u0",
        patch_size=meta.patch_size, patch_stride=meta.patch_stride)
    if (params.m, params.n) != (meta.m, meta.n):
        raise FormatError("sampling matrix shape disagrees with header")
    return params, meta


def inventory(n_phases: int) -> list[str]:
    names = ["phi", "alpha", "beta", "theta", "mu"]
    per = ["e1", "e2.0", "e2.1", "f1", "rb1.0", "rb1.1", "rb2.0", "rb2.1", "f2",
           "f_q", "f_k", "f_v", "out", "eps"]
    return names + [f"phase{k}.{p}" for k in range(n_phases) for p in per]


def save_weights(path: str | Path, params: NetParams, rate: float | None = None) -> None:
    Path(path).write_bytes(dumps_weights(params, rate))


def load_weights(path: str | Path) -> tuple[NetParams, WeightMeta]:
    return loads_weights(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# measurements


@dataclass
class MeasurementFile:
    rate: float
    block: int
    m: int
    n: int
    grid: tuple[int, int]
    image_shape: tuple[int, int]
    matrix_kind: str
    binary: bool
    matrix_seed: int
    matrix_hash: str
    b: np.ndarray

    def dumps(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MEAS_MAGIC + struct.pack("<I", MEAS_VERSION))
        buf.write(struct.pack("<dIII", self.rate, self.block, self.m, self.n))
        buf.write(struct.pack("<IIII", *self.grid, *self.image_shape))
        buf.write(struct.pack("<BBQ", MATRIX_KINDS[self.matrix_kind], int(self.binary),
                              self.matrix_seed))
        h = self.matrix_hash.encode("ascii")
        if len(h) != 64:
            raise FormatError("matrix hash must be 64 hex characters")
        buf.write(h)
        b = np.asarray(self.b, dtype="<f8")
        if b.shape != (self.grid[0] * self.grid[1], self.m):
            raise FormatError(f"measurement array {b.shape} does not match header")
        buf.write(b.tobytes())
        return buf.getvalue()

    @classmethod
    def loads(cls, data: bytes) -> "MeasurementFile":
        if data[:4] != MEAS_MAGIC:
            raise FormatError("not an NLCM measurement file")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != MEAS_VERSION:
            raise FormatError(f"unsupported measurement file version {version}")
        pos = 8
        rate, block, m, n = struct.unpack_from("<dIII", data, pos)
        pos += struct.calcsize("<dIII")
        gr, gc, h, w = struct.unpack_from("<IIII", data, pos)
        pos += 16
        kind, binary, seed = struct.unpack_from("<BBQ", data, pos)
        pos += struct.calcsize("<BBQ")
        digest = data[pos:pos + 64].decode("ascii")
        pos += 64
        count = gr * gc * m
        if len(data) - pos != 8 * count:
            raise FormatError("measurement payload size does not match header")
        b = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(gr * gc, m)
        kinds = {v: k for k, v in MATRIX_KINDS.items()}
        return cls(rate, block, m, n, (gr, gc), (h, w), kinds[kind], bool(binary), seed,
                   digest, b.astype(np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "MeasurementFile":
        return cls.loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# run configuration


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(like)(value.strip())


def load_config(path: str | Path | None, sections: dict[str, object]) -> dict[str, object]:
    """Read an INI file into copies of the dataclass defaults in ``sections``.

    ``sections`` maps section names (``solver``, ``train``, ``attention``)
    to dataclass instances whose fields give the allowed keys and types.
    Unknown sections or keys raise :class:`FormatError`.
    """
    out = {}
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    for sec in parser.sections():
        if sec not in sections:
            raise FormatError(f"unknown config section [{sec}]")
    for sec, default in sections.items():
        values = {f.name: getattr(default, f.name) for f in fields(default)}
        if parser.has_section(sec):
            for key, raw in parser.items(sec):
                if key not in values:
                    raise FormatError(f"unknown key {key!r} in [{sec}]")
                values[key] = _coerce(raw, values[key])
        out[sec] = type(default)(**values)
    return out


def dump_config(sections: dict[str, object]) -> str:
    parser = configparser.ConfigParser()
    for sec, obj in sections.items():
        parser[sec] = {f.name: str(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
