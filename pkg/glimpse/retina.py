"""
Variable-resolution retina layouts and their placement-specific sparse
operators V.

A layout is a square grid of `grid_side` pixels tiled by concentric square
rings of coarse cells around a center of fine cells. Placing the layout on
an image at an offset gives a RetinalTransform: one sparse row per active
cell, averaging the pixels under it.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import sparse

from .exceptions import ContractViolation, LayoutError

logger = logging.getLogger(__name__)


class RetinaSpec(BaseModel):
    """Ring geometry of the retina, outermost ring first."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    grid_side: int = Field(20, gt=0)
    rings: Tuple[Tuple[int, int], ...] = ((4, 4), (2, 2))
    center_cell: int = Field(1, gt=0)

    @field_validator("rings")
    @classmethod
    def _check_rings(cls, rings):
        for cell_size, thickness in rings:
            if cell_size <= 0 or thickness <= 0:
                raise ValueError(f"ring ({cell_size}, {thickness}) must have positive size and thickness")
            if thickness % cell_size:
                raise ValueError(f"ring thickness {thickness} is not a multiple of its cell size {cell_size}")
        return rings

    @model_validator(mode="after")
    def _check_sizes_non_increasing(self):
        sizes = [cell for cell, _ in self.rings] + [self.center_cell]
        if any(inner > outer for outer, inner in zip(sizes, sizes[1:])):
            raise ValueError(f"cell sizes must not increase inward, got {sizes}")
        return self


class Offset(NamedTuple):
    """Row/column shift of the retina relative to its home (top-left) placement."""

    dr: int
    dc: int


class Cell(NamedTuple):
    row0: int
    col0: int
    size: int


@dataclass(frozen=True)
class CellLayout:
    grid_side: int
    cells: Tuple[Cell, ...]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def area(self) -> int:
        return sum(cell.size ** 2 for cell in self.cells)


def _ring_cells(start: int, side: int, size: int, thickness: int) -> Iterable[Cell]:
    stop = start + side
    for r in range(start, stop, size):
        for c in range(start, stop, size):
            in_band = (
                r < start + thickness
                or r >= stop - thickness
                or c < start + thickness
                or c >= stop - thickness
            )
            if in_band:
                yield Cell(r, c, size)


def build_layout(spec: RetinaSpec) -> CellLayout:
    """Enumerate cells ring by ring (outermost first, center last), row-major within each."""
    cells: List[Cell] = []
    start, side = 0, spec.grid_side
    for cell_size, thickness in spec.rings:
        if side < 2 * thickness or side % cell_size:
            raise LayoutError(
                f"spec does not tile grid: ring ({cell_size}, {thickness}) meets a residual of {side} pixels",
                residual=side,
            )
        cells.extend(_ring_cells(start, side, cell_size, thickness))
        start += thickness
        side -= 2 * thickness
    if side % spec.center_cell:
        raise LayoutError(
            f"spec does not tile grid: residual center of {side} pixels is not a multiple of {spec.center_cell}",
            residual=side,
        )
    cells.extend(_ring_cells(start, side, spec.center_cell, side))
    layout = CellLayout(spec.grid_side, tuple(cells))
    assert layout.area() == spec.grid_side ** 2
    return layout


@dataclass(frozen=True, eq=False)
class RetinalTransform:
    """
    Sparse operator V for one placement. `matrix` has one row per active cell
    (in layout order) and one column per image pixel (row-major).
    """

    image_shape: Tuple[int, int]
    offset: Offset
    active: np.ndarray
    cell_sizes: np.ndarray
    matrix: sparse.csr_matrix
    layout: Optional[CellLayout] = field(default=None, compare=False)

    @property
    def n_active(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_pixels(self) -> int:
        return self.image_shape[0] * self.image_shape[1]

    @cached_property
    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @cached_property
    def pixel_weight(self) -> np.ndarray:
        """Column sums of V: 1/size^2 on covered pixels, 0 elsewhere."""
        return np.asarray(self.matrix.sum(axis=0)).ravel()

    @cached_property
    def covered(self) -> np.ndarray:
        return self.pixel_weight > 0


def _sparse_rows(cells: Sequence[Cell], image_shape: Tuple[int, int], offset: Offset):
    rows, cols = image_shape
    indptr, indices, data = [0], [], []
    for cell in cells:
        r0, c0 = cell.row0 + offset.dr, cell.col0 + offset.dc
        rr, cc = np.meshgrid(np.arange(r0, r0 + cell.size), np.arange(c0, c0 + cell.size), indexing="ij")
        indices.append((rr * cols + cc).ravel())
        data.append(np.full(cell.size ** 2, 1.0 / cell.size ** 2))
        indptr.append(indptr[-1] + cell.size ** 2)
    n = len(cells)
    if n:
        indices, data = np.concatenate(indices), np.concatenate(data)
    else:
        indices, data = np.zeros(0, dtype=np.int64), np.zeros(0)
    return sparse.csr_matrix((data, indices, np.asarray(indptr)), shape=(n, rows * cols))


def place(layout: CellLayout, image_rows: int, image_cols: int, offset: Offset) -> RetinalTransform:
    """Place the layout; a cell is active only when all of its pixels lie inside the image."""
    offset = Offset(int(offset[0]), int(offset[1]))
    active = np.array(
        [
            0 <= cell.row0 + offset.dr
            and cell.row0 + offset.dr + cell.size <= image_rows
            and 0 <= cell.col0 + offset.dc
            and cell.col0 + offset.dc + cell.size <= image_cols
            for cell in layout.cells
        ],
        dtype=bool,
    )
    kept = [cell for cell, on in zip(layout.cells, active) if on]
    if not kept:
        logger.warning("retina at offset %s lies fully outside the %dx%d image", tuple(offset), image_rows, image_cols)
    return RetinalTransform(
        image_shape=(image_rows, image_cols),
        offset=offset,
        active=active,
        cell_sizes=np.array([cell.size for cell in kept], dtype=np.int64),
        matrix=_sparse_rows(kept, (image_rows, image_cols), offset),
        layout=layout,
    )


def identity_transform(image_rows: int, image_cols: int) -> RetinalTransform:
    """Every pixel observed on its own: the full-image condition."""
    D = image_rows * image_cols
    return RetinalTransform(
        image_shape=(image_rows, image_cols),
        offset=Offset(0, 0),
        active=np.ones(D, dtype=bool),
        cell_sizes=np.ones(D, dtype=np.int64),
        matrix=sparse.identity(D, format="csr", dtype=np.float64),
    )


def _flat_image(rt: RetinalTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape not in ((rt.n_pixels,), tuple(rt.image_shape)):
        raise ContractViolation(f"image of shape {x.shape} does not match transform for {rt.image_shape}")
    return x.ravel()


def apply(rt: RetinalTransform, x) -> np.ndarray:
    """Glimpse y = V x: the mean of each active cell's pixels."""
    return rt.matrix @ _flat_image(rt, x)


def upsample(rt: RetinalTransform, y) -> Tuple[np.ndarray, np.ndarray]:
    """
    Give every pixel under an active cell that cell's value. Returns the flat
    image (0 on unobserved pixels) and the boolean missing mask.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (rt.n_active,):
        raise ContractViolation(f"glimpse of length {y.size} does not match {rt.n_active} active cells")
    image = np.zeros(rt.n_pixels)
    covered = rt.covered
    image[covered] = (rt.matrix.T @ y)[covered] / rt.pixel_weight[covered]
    return image, ~covered


def enumerate_offsets(row_offsets: Sequence[int], col_offsets: Sequence[int]) -> List[Offset]:
    if not len(row_offsets) or not len(col_offsets):
        raise ContractViolation("offset lists must be non-empty")
    return [Offset(int(r), int(c)) for r in row_offsets for c in col_offsets]


class RetinaPlacements:
    """One retinal transform per offset of an offset table, built lazily."""

    def __init__(self, spec: RetinaSpec, image_shape: Tuple[int, int], offsets: Sequence[Offset]):
        self.spec = spec
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        self.offsets = tuple(Offset(int(o[0]), int(o[1])) for o in offsets)
        self.layout = build_layout(spec)
        self._transforms: dict = {}

    def __len__(self) -> int:
        return len(self.offsets)

    def __getitem__(self, offset_id: int) -> RetinalTransform:
        if not 0 <= offset_id < len(self.offsets):
            raise ContractViolation(f"offset id {offset_id} outside table of {len(self.offsets)}")
        if offset_id not in self._transforms:
            self._transforms[offset_id] = place(self.layout, *self.image_shape, self.offsets[offset_id])
        return self._transforms[offset_id]

    def __iter__(self):
        return (self[a] for a in range(len(self)))

    def active_counts(self) -> np.ndarray:
        return np.array([rt.n_active for rt in self], dtype=np.int64)

    def index_of(self, offset) -> int:
        try:
            return self.offsets.index(Offset(int(offset[0]), int(offset[1])))
        except ValueError:
            raise ContractViolation(f"offset {tuple(offset)} is not in the offset table") from None
