"""6x6 grid partitioning, focal/non-focal cell selection and the patch transforms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRID_SIZE = 6
N_PATCHES = GRID_SIZE * GRID_SIZE
FOCAL_SET_SIZE = 2 * GRID_SIZE - 1  # one full row plus one full column
NONFOCAL_SET_SIZE = N_PATCHES - FOCAL_SET_SIZE


@dataclass(frozen=True)
class PatchLayout:
    """Anchor cell (0-based row, col) with its focal row+column and the complement."""

    anchor: tuple[int, int]
    focal: frozenset[int]
    nonfocal: frozenset[int]


@dataclass
class PatchBundle:
    """36 tiles in row-major cell order plus the permutation that produced them.

    provenance[cell] is the source cell whose tile currently sits at `cell`;
    an untransformed bundle has identity provenance.
    """

    patches: list[np.ndarray]
    provenance: np.ndarray = field(
        default_factory=lambda: np.arange(N_PATCHES, dtype=np.int64)
    )

    def has_identity_provenance(self) -> bool:
        return bool(np.array_equal(self.provenance, np.arange(N_PATCHES)))


def select_focal_sets(rng: np.random.Generator) -> PatchLayout:
    """Pick a uniform anchor cell; focal = its row union its column."""
    cell = int(rng.integers(N_PATCHES))
    r, c = divmod(cell, GRID_SIZE)
    focal = {r * GRID_SIZE + j for j in range(GRID_SIZE)}
    focal |= {i * GRID_SIZE + c for i in range(GRID_SIZE)}
    nonfocal = set(range(N_PATCHES)) - focal
    return PatchLayout(anchor=(r, c), focal=frozenset(focal), nonfocal=frozenset(nonfocal))


def partition_grid(crop: np.ndarray) -> PatchBundle:
    """Cut a square crop into 36 equal tiles in row-major order."""
    h, w = crop.shape[:2]
    assert h == w and h % GRID_SIZE == 0, (
        f"crop must be square with side divisible by {GRID_SIZE}, got {crop.shape}"
    )
    t = h // GRID_SIZE
    patches = [
        np.ascontiguousarray(crop[i * t : (i + 1) * t, j * t : (j + 1) * t])
        for i in range(GRID_SIZE)
        for j in range(GRID_SIZE)
    ]
    return PatchBundle(patches=patches)


def assemble(bundle: PatchBundle) -> np.ndarray:
    """Render the tiles at their current cells (row-major) back into one image."""
    rows = []
    for i in range(GRID_SIZE):
        rows.append(np.concatenate(bundle.patches[i * GRID_SIZE : (i + 1) * GRID_SIZE], axis=1))
    return np.concatenate(rows, axis=0)


def restore(bundle: PatchBundle) -> np.ndarray:
    """Undo the positional permutation and render tiles at their source cells.

    Pixel-level changes (focal rotations) are not undone.
    """
    ordered: list[np.ndarray] = [np.empty(0)] * N_PATCHES
    for cell, src in enumerate(bundle.provenance):
        ordered[int(src)] = bundle.patches[cell]
    return assemble(PatchBundle(patches=ordered))


def _reverse_focal_row(assignment: list[int], anchor_row: int) -> None:
    cells = [anchor_row * GRID_SIZE + j for j in range(GRID_SIZE)]
    values = [assignment[c] for c in cells]
    for c, v in zip(cells, reversed(values)):
        assignment[c] = v


def _reverse_focal_col(assignment: list[int], anchor_col: int) -> None:
    cells = [i * GRID_SIZE + anchor_col for i in range(GRID_SIZE)]
    values = [assignment[c] for c in cells]
    for c, v in zip(cells, reversed(values)):
        assignment[c] = v


def transform_crosspatch(
    bundle: PatchBundle,
    layout: PatchLayout,
    rng: np.random.Generator,
    literal_focal_flips: bool = False,
) -> PatchBundle:
    """Shuffle non-focal tiles among non-focal cells and flip the focal cross.

    Default focal treatment: the anchor row's tile sequence is reversed, then
    the anchor column's sequence is reversed, then every focal tile is rotated
    180 degrees in pixel space. With literal_focal_flips, each focal tile is
    instead flipped horizontally, flipped vertically and rotated 180 degrees
    in place, which composes to the identity; the switch exists so that
    collapse can be demonstrated.
    """
    if len(bundle.patches) != N_PATCHES:
        raise ValueError(f"expected {N_PATCHES} patches, got {len(bundle.patches)}")
    if not bundle.has_identity_provenance():
        raise ValueError("transform requires an untransformed bundle")

    assignment = list(range(N_PATCHES))  # assignment[cell] = source cell of its tile
    nonfocal = sorted(layout.nonfocal)
    perm = rng.permutation(len(nonfocal))
    shuffled = [nonfocal[k] for k in perm]
    for cell, src in zip(nonfocal, shuffled):
        assignment[cell] = src

    if not literal_focal_flips:
        _reverse_focal_row(assignment, layout.anchor[0])
        _reverse_focal_col(assignment, layout.anchor[1])

    patches = [bundle.patches[src] for src in assignment]
    for cell in layout.focal:
        p = patches[cell]
        if literal_focal_flips:
            p = np.rot90(p[:, ::-1][::-1, :], 2)
        else:
            p = np.rot90(p, 2)
        patches[cell] = np.ascontiguousarray(p)
    return PatchBundle(patches=patches, provenance=np.asarray(assignment, dtype=np.int64))


def transform_jigsaw_baseline(bundle: PatchBundle, rng: np.random.Generator) -> PatchBundle:
    """Uniformly shuffle all 36 tile positions; no pixel-level change."""
    if len(bundle.patches) != N_PATCHES:
        raise ValueError(f"expected {N_PATCHES} patches, got {len(bundle.patches)}")
    if not bundle.has_identity_provenance():
        raise ValueError("transform requires an untransformed bundle")
    perm = rng.permutation(N_PATCHES)
    patches = [bundle.patches[int(src)] for src in perm]
    return PatchBundle(patches=patches, provenance=perm.astype(np.int64))
