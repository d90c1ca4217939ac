"""RGGB mosaic handling: packing, amplification, patching, augmentation, I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autograd import Rng

PathLike = Union[str, Path]

CHANNELS = ("R", "G1", "G2", "B")
GREEN = (1, 2)
CLAMP_MAX = 1.0


class MosaicError(ValueError):
    """Invalid mosaic geometry or sample range."""


class PNMHeaderError(ValueError):
    """Malformed or unsupported PGM/PPM header."""


class TruncatedPayloadError(ValueError):
    """File ends before the header's declared sample count."""


class MissingSidecarError(FileNotFoundError):
    """No ``<name>.json`` next to the mosaic."""


class SidecarError(ValueError):
    """Sidecar JSON present but missing or invalid fields."""


@dataclass
class RawMosaic:
    data: np.ndarray  # (H, W) uint16, RGGB phase at (0, 0)
    white_level: int = 65535
    black_level: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise MosaicError(f"mosaic must be 2-d, got shape {self.data.shape}")
        h, w = self.data.shape
        if h % 2 or w % 2:
            raise MosaicError(f"mosaic dims must be even (complete 2x2 CFA blocks), got {h}x{w}")
        if self.data.size and int(self.data.max()) > self.white_level:
            raise MosaicError(f"sample {int(self.data.max())} exceeds white level {self.white_level}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class SidecarMeta:
    exposure_in: Optional[float] = None
    exposure_ref: Optional[float] = None
    iso: Optional[int] = None
    ratio_override: Optional[float] = None
    black_level: int = 0
    white_level: Optional[int] = None
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        if self.ratio_override is not None:
            r = float(self.ratio_override)
        else:
            if self.exposure_in is None or self.exposure_ref is None:
                raise SidecarError("amplification ratio needs exposure_in and exposure_ref (or an explicit ratio)")
            if self.exposure_in <= 0:
                raise SidecarError(f"exposure_in must be > 0, got {self.exposure_in}")
            r = self.exposure_ref / self.exposure_in
        if not r > 0:
            raise ValueError(f"amplification ratio must be positive, got {r}")
        return r


@dataclass
class PackedRaw:
    """Half-resolution 4-channel image, channels ordered R, G1, G2, B."""

    data: np.ndarray  # (4, H/2, W/2) float32

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 4:
            raise MosaicError(f"packed raw must be (4, h, w), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# packing

def pack(m: RawMosaic) -> PackedRaw:
    """Map each 2x2 block [[R, G1], [G2, B]] to one pixel of a 4-channel image in [0, 1]."""
    h, w = m.data.shape
    if h % 2 or w % 2:
        raise MosaicError(f"mosaic dims must be even, got {h}x{w}")
    span = float(m.white_level - m.black_level)
    x = (m.data.astype(np.float64) - m.black_level) / span
    x = np.clip(x, 0.0, None).astype(np.float32)
    packed = np.stack([x[0::2, 0::2], x[0::2, 1::2], x[1::2, 0::2], x[1::2, 1::2]])
    return PackedRaw(packed)


def unpack(p: PackedRaw, white_level: int = 65535, black_level: int = 0) -> RawMosaic:
    """Inverse of :func:`pack`; samples are rounded to the nearest integer."""
    _, h, w = p.data.shape
    vals = np.rint(p.data.astype(np.float64) * (white_level - black_level) + black_level)
    vals = np.clip(vals, 0, white_level).astype(np.uint16)
    out = np.empty((2 * h, 2 * w), dtype=np.uint16)
    out[0::2, 0::2], out[0::2, 1::2], out[1::2, 0::2], out[1::2, 1::2] = vals
    return RawMosaic(out, white_level=white_level, black_level=black_level)


def mosaic_from_rgb(rgb: np.ndarray) -> np.ndarray:
    """Sample an (H, W, 3) image through an RGGB filter; returns (H, W) floats."""
    h, w, _ = rgb.shape
    out = np.empty((h, w), dtype=rgb.dtype)
    out[0::2, 0::2] = rgb[0::2, 0::2, 0]
    out[0::2, 1::2] = rgb[0::2, 1::2, 1]
    out[1::2, 0::2] = rgb[1::2, 0::2, 1]
    out[1::2, 1::2] = rgb[1::2, 1::2, 2]
    return out


def pack_float(mosaic: np.ndarray) -> PackedRaw:
    """Pack an already-normalized float mosaic without quantization."""
    x = np.asarray(mosaic, dtype=np.float32)
    return PackedRaw(np.stack([x[0::2, 0::2], x[0::2, 1::2], x[1::2, 0::2], x[1::2, 1::2]]))


# ---------------------------------------------------------------------------
# preprocessing

def amplify(p: PackedRaw, meta: SidecarMeta) -> PackedRaw:
    ratio = meta.ratio
    return PackedRaw(np.clip(p.data * np.float32(ratio), 0.0, CLAMP_MAX).astype(np.float32))


def crop_patches(p: PackedRaw, patch: int = 512) -> list[PackedRaw]:
    """Non-overlapping ``patch`` x ``patch`` tiles in row-major order; partial borders are dropped."""
    _, h, w = p.data.shape
    return [
        PackedRaw(p.data[:, y:y + patch, x:x + patch].copy())
        for y in range(0, h - patch + 1, patch)
        for x in range(0, w - patch + 1, patch)
    ]


def draw_augmentation(rng: Rng, square: bool = True) -> tuple[int, int]:
    """Draw (flip, quarter_turns): flip 0=none, 1=horizontal, 2=vertical."""
    flip = int(rng.integers(0, 3))
    turns = int(rng.integers(0, 4))
    if not square and turns % 2:
        turns = 2 * int(rng.integers(0, 2))
    return flip, turns


def apply_augmentation(arr: np.ndarray, flip: int, turns: int) -> np.ndarray:
    """Flip then rotate the last two axes of ``arr``; channel order is untouched."""
    if flip == 1:
        arr = arr[..., :, ::-1]
    elif flip == 2:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(arr, k=turns, axes=(-2, -1)))


def augment(p: PackedRaw, rng: Rng) -> PackedRaw:
    _, h, w = p.data.shape
    flip, turns = draw_augmentation(rng, square=(h == w))
    return PackedRaw(apply_augmentation(p.data, flip, turns))


def extract_green(p: PackedRaw) -> np.ndarray:
    """The G1, G2 planes as a (2, h, w) array."""
    return p.data[list(GREEN)].copy()


def channel_entropy(channel: np.ndarray, bins: int = 256) -> float:
    """Shannon entropy in bits of a [0, 1] plane histogrammed into ``bins`` equal buckets."""
    values = np.asarray(channel, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("channel_entropy: empty plane")
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / values.size
    return float(-(p * np.log2(p)).sum()) + 0.0


# ---------------------------------------------------------------------------
# PGM / PPM / sidecar I/O

def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise PNMHeaderError(f"expected magic {magic.decode()}, got {buf[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PNMHeaderError(f"malformed {magic.decode()} header near byte {pos}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PNMHeaderError("header must end with a single whitespace byte")
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval <= 65535:
        raise PNMHeaderError(f"invalid header values width={width} height={height} maxval={maxval}")
    return width, height, maxval, pos + 1


def _read_samples(buf: bytes, offset: int, count: int, maxval: int) -> np.ndarray:
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = count * dtype.itemsize
    if len(buf) - offset < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - offset} bytes, header declares {need}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def read_pgm(path: PathLike) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    width, height, maxval, offset = _read_header(buf, b"P5")
    data = _read_samples(buf, offset, width * height, maxval).reshape(height, width)
    return data.astype(np.uint16), maxval


def write_pgm(path: PathLike, data: np.ndarray, maxval: int = 65535) -> None:
    data = np.asarray(data)
    h, w = data.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + data.astype(dtype).tobytes())


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _positive(raw: dict, key: str, required: bool) -> Optional[float]:
    if key not in raw:
        if required:
            raise SidecarError(f"sidecar missing required field {key!r}")
        return None
    val = raw[key]
    if not isinstance(val, (int, float)) or not val > 0:
        raise SidecarError(f"sidecar field {key!r} must be a positive number, got {val!r}")
    return float(val)


def read_sidecar(path: PathLike, require_exposure: bool = True) -> SidecarMeta:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SidecarError(f"sidecar {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SidecarError(f"sidecar {path} must hold a JSON object")
    has_ratio = "ratio" in raw
    need = require_exposure and not has_ratio
    meta = SidecarMeta(
        exposure_in=_positive(raw, "exposure_in", need),
        exposure_ref=_positive(raw, "exposure_ref", need),
        iso=int(raw["iso"]) if "iso" in raw else None,
        ratio_override=_positive(raw, "ratio", False),
        black_level=int(raw.get("black_level", 0)),
        white_level=int(raw["white_level"]) if "white_level" in raw else None,
    )
    if require_exposure and meta.iso is None and "iso" not in raw:
        raise SidecarError("sidecar missing required field 'iso'")
    return meta


def write_sidecar(path: PathLike, meta: SidecarMeta) -> None:
    raw: dict = {}
    for key, val in (("exposure_in", meta.exposure_in), ("exposure_ref", meta.exposure_ref), ("iso", meta.iso),
                     ("ratio", meta.ratio_override), ("white_level", meta.white_level)):
        if val is not None:
            raw[key] = val
    if meta.black_level:
        raw["black_level"] = meta.black_level
    Path(path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")


def load_mosaic(path: PathLike, require_sidecar: bool = True) -> tuple[RawMosaic, SidecarMeta]:
    """Read a 16-bit P5 mosaic and its ``<name>.json`` sidecar.

    With ``require_sidecar=False`` a missing sidecar (or missing exposure
    fields) is tolerated; callers must then supply the ratio themselves.
    """
    data, maxval = read_pgm(path)
    side = sidecar_path(path)
    if side.exists():
        meta = read_sidecar(side, require_exposure=require_sidecar)
    elif require_sidecar:
        raise MissingSidecarError(f"missing sidecar {side}")
    else:
        meta = SidecarMeta()
    white = meta.white_level if meta.white_level is not None else maxval
    return RawMosaic(data, white_level=white, black_level=meta.black_level), meta


def save_mosaic(path: PathLike, m: RawMosaic, meta: Optional[SidecarMeta] = None) -> None:
    write_pgm(path, m.data, maxval=65535)
    if meta is not None:
        write_sidecar(sidecar_path(path), meta)


def quantize8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path: PathLike) -> None:
    """Write an (H, W, 3) image in [0, 1] as binary P6 with maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"save_image expects (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + quantize8(image).tobytes())


def load_image(path: PathLike) -> np.ndarray:
    """Read a P6 file into an (H, W, 3) float32 array in [0, 1]."""
    buf = Path(path).read_bytes()
    width, height, maxval, offset = _read_header(buf, b"P6")
    data = _read_samples(buf, offset, width * height * 3, maxval).reshape(height, width, 3)
    return (data.astype(np.float32) / np.float32(maxval))


def packed_entropies(p: PackedRaw, bins: int = 256) -> dict[str, float]:
    return {name: channel_entropy(p.data[i], bins) for i, name in enumerate(CHANNELS)}


def crop_window(h: int, w: int, multiple: int = 32) -> tuple[int, int, int, int]:
    """(y0, x0, height, width) of the largest centered crop with dims divisible by ``multiple``.

    Offsets are even so the crop starts on an R site.
    """
    nh, nw = (h // multiple) * multiple, (w // multiple) * multiple
    if nh == 0 or nw == 0:
        raise MosaicError(f"mosaic {h}x{w} is smaller than {multiple}x{multiple}")
    return ((h - nh) // 2) & ~1, ((w - nw) // 2) & ~1, nh, nw


def center_crop(m: RawMosaic, multiple: int = 32) -> RawMosaic:
    """Largest centered crop whose dims are multiples of ``multiple`` (keeps the RGGB phase)."""
    y0, x0, nh, nw = crop_window(*m.data.shape, multiple)
    return RawMosaic(m.data[y0:y0 + nh, x0:x0 + nw].copy(), m.white_level, m.black_level)
