"""
Dataset ingestion and the file formats the pipeline reads and writes.

GLIM container, little-endian throughout:

    "GLIM" | u16 version | u16 kind | body | u32 CRC32(body)

Inside the body, counts and dimensions are u32, numeric arrays are f64
row-major and strings are a u32 byte length followed by UTF-8. Kinds are
1 (ImageSet), 2 (GlimpseDataset) and 3 (GlimpseModel).
"""

import gzip
import json
import logging
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import ChecksumError, ContractViolation, DataFormatError, NumericalError
from .learning import GlimpseDataset
from .models import FAModel, GlimpseModel, MoFAModel
from .retina import Offset, RetinaSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

GLIM_MAGIC = b"GLIM"
GLIM_VERSION = 1
KIND_IMAGES = 1
KIND_GLIMPSES = 2
KIND_MODEL = 3
_HEADER = struct.Struct("<4sHH")
_U32 = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class ImageSet:
    """
    N images of rows x cols pixels, one flattened row-major image per row of
    `pixels`. `normalization` is (source_min, source_max, lo, hi) once the
    set has been rescaled.
    """

    pixels: np.ndarray
    rows: int
    cols: int
    provenance: str = ""
    normalization: Optional[Tuple[float, float, float, float]] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 1 and pixels.size == 0:
            pixels = pixels.reshape(0, self.rows * self.cols)
        if pixels.ndim != 2 or pixels.shape[1] != self.rows * self.cols:
            raise ContractViolation(f"pixels of shape {pixels.shape} do not hold {self.rows}x{self.cols} images")
        object.__setattr__(self, "pixels", pixels)

    @property
    def N(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    def __len__(self) -> int:
        return self.N

    def subset(self, indices, provenance: Optional[str] = None) -> "ImageSet":
        return replace(self, pixels=self.pixels[np.asarray(indices, dtype=np.int64)],
                       provenance=self.provenance if provenance is None else provenance)


def _read_bytes(path: PathLike) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataFormatError(f"corrupt gzip stream in {path}: {exc}", offset=0) from exc
    return raw


def _idx_header(raw: bytes, path) -> Tuple[int, Tuple[int, ...], int]:
    if len(raw) < 4:
        raise DataFormatError(f"{path} is too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataFormatError(f"bad IDX magic 0x{magic:08x} in {path}", offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataFormatError(f"{path} ends inside the IDX dimension table", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = end + int(np.prod(dims))
    if len(raw) < expected:
        raise DataFormatError(f"{path} is truncated: expected {expected} bytes, found {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise DataFormatError(f"{path} has {len(raw) - expected} trailing bytes", offset=expected)
    return magic, dims, end


def read_idx_labels(path: PathLike) -> np.ndarray:
    raw = _read_bytes(path)
    magic, dims, start = _idx_header(raw, path)
    if magic != IDX_LABELS:
        raise DataFormatError(f"{path} holds images, not labels", offset=0)
    return np.frombuffer(raw, dtype=np.uint8, count=dims[0], offset=start).copy()


def read_idx(path: PathLike, labels: Optional[PathLike] = None, digit: Optional[int] = None) -> ImageSet:
    """Raw 0..255 images from an IDX file, optionally keeping only one digit class."""
    raw = _read_bytes(path)
    magic, dims, start = _idx_header(raw, path)
    if magic != IDX_IMAGES:
        raise DataFormatError(f"{path} holds labels, not images", offset=0)
    N, rows, cols = dims
    pixels = np.frombuffer(raw, dtype=np.uint8, count=N * rows * cols, offset=start).reshape(N, rows * cols)
    provenance = f"idx:{Path(path).name}"
    if digit is not None:
        if labels is None:
            raise ContractViolation("filtering by digit needs a label file")
        y = read_idx_labels(labels)
        if y.shape[0] != N:
            raise DataFormatError(f"{labels} has {y.shape[0]} labels for {N} images", offset=4)
        pixels = pixels[y == digit]
        provenance += f":digit={digit}"
    logger.info("read %d %dx%d images from %s", pixels.shape[0], rows, cols, path)
    return ImageSet(pixels.astype(np.float64), rows, cols, provenance)


def normalize(
    images: ImageSet, lo: float = -1.0, hi: float = 1.0, source_range: Optional[Tuple[float, float]] = None
) -> ImageSet:
    """
    Affine map of the set's observed [min, max] onto [lo, hi]. A test set
    passes its training set's `source_range` so both share one map.
    """
    if hi <= lo:
        raise ContractViolation(f"normalization range needs hi > lo, got [{lo}, {hi}]")
    if source_range is not None:
        src_min, src_max = float(source_range[0]), float(source_range[1])
    else:
        src_min, src_max = float(images.pixels.min()), float(images.pixels.max())
    if src_max == src_min:
        logger.warning("image set is constant (%g); mapping it to the midpoint of [%g, %g]", src_min, lo, hi)
        pixels = np.full_like(images.pixels, 0.5 * (lo + hi))
    else:
        pixels = lo + (images.pixels - src_min) * (hi - lo) / (src_max - src_min)
    return replace(images, pixels=pixels, normalization=(src_min, src_max, float(lo), float(hi)))


def denormalize(images: ImageSet) -> ImageSet:
    if images.normalization is None:
        raise ContractViolation("image set carries no normalization to invert")
    src_min, src_max, lo, hi = images.normalization
    pixels = src_min + (images.pixels - lo) * (src_max - src_min) / (hi - lo)
    return replace(images, pixels=pixels, normalization=None)


def split(images: ImageSet, train_fraction: float, seed=0) -> Tuple[ImageSet, ImageSet]:
    """Seeded shuffle, then the first round(fraction * N) images train."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractViolation(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(images.N)
    n_train = int(round(train_fraction * images.N))
    return (
        images.subset(order[:n_train], f"{images.provenance}:train"),
        images.subset(order[n_train:], f"{images.provenance}:test"),
    )


class _Writer:
    def __init__(self):
        self._parts = []

    def u32(self, value: int) -> None:
        self._parts.append(_U32.pack(int(value)))

    def f64(self, values) -> None:
        self._parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self._parts.append(encoded)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, body: bytes, base: int):
        self._body = body
        self._base = base
        self.pos = 0

    @property
    def offset(self) -> int:
        return self._base + self.pos

    def _take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self._body):
            raise DataFormatError(f"GLIM body truncated while reading {what}", offset=self._base + self.pos)
        chunk = self._body[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self, what: str = "a count") -> int:
        return _U32.unpack(self._take(4, what))[0]

    def f64(self, count: int, what: str = "an array") -> np.ndarray:
        return np.frombuffer(self._take(8 * count, what), dtype="<f8").astype(np.float64)

    def text(self, what: str = "a string") -> str:
        size = self.u32(what)
        try:
            return self._take(size, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"invalid UTF-8 in {what}", offset=self._base + self.pos - size) from exc

    def finish(self) -> None:
        if self.pos != len(self._body):
            raise DataFormatError("unexpected bytes after GLIM payload", offset=self._base + self.pos)


def _write_offsets(w: _Writer, retina: RetinaSpec, image_shape, offsets) -> None:
    w.text(retina.model_dump_json())
    w.u32(image_shape[0])
    w.u32(image_shape[1])
    w.u32(len(offsets))
    w.f64(np.asarray(offsets, dtype=np.float64).reshape(-1))


def _read_offsets(r: _Reader):
    try:
        retina = RetinaSpec.model_validate_json(r.text("retina spec"))
    except ValueError as exc:
        raise DataFormatError(f"invalid retina spec: {exc}", offset=r.offset) from exc
    image_shape = (r.u32("rows"), r.u32("cols"))
    count = r.u32("offset count")
    table = r.f64(2 * count, "offset table").reshape(count, 2).astype(np.int64)
    return retina, image_shape, [Offset(int(dr), int(dc)) for dr, dc in table]


def _encode(payload) -> Tuple[int, bytes]:
    w = _Writer()
    if isinstance(payload, ImageSet):
        w.u32(payload.N)
        w.u32(payload.rows)
        w.u32(payload.cols)
        w.text(payload.provenance)
        w.u32(payload.normalization is not None)
        if payload.normalization is not None:
            w.f64(payload.normalization)
        w.f64(payload.pixels)
        return KIND_IMAGES, w.getvalue()
    if isinstance(payload, GlimpseDataset):
        _write_offsets(w, payload.retina, payload.image_shape, payload.offsets)
        w.u32(payload.grouped)
        w.u32(payload.n)
        w.f64(payload.offset_ids)
        w.f64(payload.image_ids)
        for g in payload.glimpses:
            w.u32(g.size)
            w.f64(g)
        return KIND_GLIMPSES, w.getvalue()
    if isinstance(payload, GlimpseModel):
        _write_offsets(w, payload.retina, payload.image_shape, payload.offsets)
        mixture = payload.mixture
        w.u32(mixture.M)
        w.u32(mixture.D)
        w.f64(mixture.pi)
        for m, fa in enumerate(mixture.components):
            w.u32(fa.K)
            w.f64(fa.mu)
            w.f64(fa.W)
            w.f64(fa.psi)
            for psi in payload.psi_y[m]:
                w.u32(psi.size)
                w.f64(psi)
        w.text(json.dumps(payload.metadata, sort_keys=True, default=str))
        return KIND_MODEL, w.getvalue()
    raise ContractViolation(f"cannot store {type(payload).__name__} in a GLIM container")


def _decode(kind: int, r: _Reader):
    if kind == KIND_IMAGES:
        N, rows, cols = r.u32("N"), r.u32("rows"), r.u32("cols")
        provenance = r.text("provenance")
        normalization = tuple(r.f64(4, "normalization").tolist()) if r.u32("normalization flag") else None
        pixels = r.f64(N * rows * cols, "pixels").reshape(N, rows * cols)
        return ImageSet(pixels, rows, cols, provenance, normalization)
    if kind == KIND_GLIMPSES:
        retina, image_shape, offsets = _read_offsets(r)
        grouped = bool(r.u32("grouped flag"))
        n = r.u32("record count")
        offset_ids = r.f64(n, "offset ids").astype(np.int64)
        image_ids = r.f64(n, "image ids").astype(np.int64)
        glimpses = tuple(r.f64(r.u32("glimpse length"), "glimpse") for _ in range(n))
        return GlimpseDataset(retina, image_shape, offsets, offset_ids, glimpses, image_ids, grouped)
    if kind == KIND_MODEL:
        retina, image_shape, offsets = _read_offsets(r)
        M, D = r.u32("component count"), r.u32("D")
        pi = r.f64(M, "mixing proportions")
        components, psi_y = [], []
        for _ in range(M):
            K = r.u32("K")
            mu = r.f64(D, "mu")
            W = r.f64(D * K, "W").reshape(D, K)
            psi = r.f64(D, "psi")
            components.append(FAModel(mu, W, psi))
            psi_y.append(tuple(r.f64(r.u32("psi_y length"), "psi_y") for _ in offsets))
        metadata = json.loads(r.text("metadata"))
        return GlimpseModel(MoFAModel(tuple(components), pi), retina, image_shape, offsets, tuple(psi_y), metadata)
    raise DataFormatError(f"unknown GLIM payload kind {kind}", offset=6)


def write_glim(path: PathLike, payload) -> Path:
    kind, body = _encode(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_HEADER.pack(GLIM_MAGIC, GLIM_VERSION, kind) + body + _U32.pack(zlib.crc32(body)))
    logger.debug("wrote %s payload (%d bytes) to %s", type(payload).__name__, len(body), path)
    return path


def read_glim(path: PathLike, expected: Optional[type] = None):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _U32.size:
        raise DataFormatError(f"{path} is too short for a GLIM container", offset=len(raw))
    magic, version, kind = _HEADER.unpack_from(raw, 0)
    if magic != GLIM_MAGIC:
        raise DataFormatError(f"{path} is not a GLIM container (magic {magic!r})", offset=0)
    if version != GLIM_VERSION:
        raise DataFormatError(f"unsupported GLIM version {version}", offset=4)
    body = raw[_HEADER.size:-_U32.size]
    (stored,) = _U32.unpack_from(raw, len(raw) - _U32.size)
    if zlib.crc32(body) != stored:
        raise ChecksumError(f"checksum mismatch in {path}", offset=len(raw) - _U32.size)
    reader = _Reader(body, _HEADER.size)
    try:
        payload = _decode(kind, reader)
    except (ContractViolation, NumericalError) as exc:
        raise DataFormatError(f"{path} holds an invalid payload: {exc}", offset=reader.offset) from exc
    reader.finish()
    if expected is not None and not isinstance(payload, expected):
        raise DataFormatError(f"{path} holds a {type(payload).__name__}, expected {expected.__name__}", offset=6)
    return payload


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(directory: PathLike) -> dict:
    """Paths of the four MNIST files in `directory`, plain or gzipped."""
    directory = Path(directory)
    found = {}
    for key, stem in MNIST_FILES.items():
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                found[key] = directory / name
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")
    return found


def load_images(path: PathLike) -> ImageSet:
    """An ImageSet from either a GLIM container or a raw IDX image file."""
    head = Path(path).read_bytes()[:4]
    if head == GLIM_MAGIC:
        return read_glim(path, ImageSet)
    return read_idx(path)


def write_pgm(
    image,
    path: PathLike,
    shape: Optional[Tuple[int, int]] = None,
    missing=None,
    value_range: Tuple[float, float] = (-1.0, 1.0),
) -> Path:
    """Binary P5 PGM; intensities mapped from `value_range` onto 0..255, missing pixels white."""
    image = np.asarray(image, dtype=np.float64)
    rows, cols = shape if shape is not None else image.shape
    flat = image.reshape(-1)
    if flat.size != rows * cols:
        raise ContractViolation(f"image of {flat.size} pixels does not fit {rows}x{cols}")
    lo, hi = value_range
    levels = np.clip(np.rint((flat - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    if missing is not None:
        levels[np.asarray(missing, dtype=bool).reshape(-1)] = 255
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + levels.tobytes())
    return path


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_json(document, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path
