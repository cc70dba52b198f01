"""Crown discretization: a four-channel 128x128 surface-model raster and
a four-image 64x64 view stack, plus rotational augmentation and the
binary tensor store that feeds network training.

Both representations cover 16x16 m centered on the crown apex. Grid
origins are chosen so the apex falls at the exact center of its pixel;
the half-pixel asymmetry this leaves at the extent edges is accepted.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import LEAF_OFF, LEAF_ON, CrownCloud

DSM_SIZE = 128
DSM_CELL = 0.125
VIEW_SIZE = 64
VIEW_CELL = 0.25
PROFILE_HALF_THICKNESS = 0.375

# Affine input scaling for network training (recorded in run manifests).
HEIGHT_SCALE = 50.0
INTENSITY_SCALE = 255.0
AREA_SCALE = 300.0
WIDTH_SCALE = 20.0

MAGIC = b"CRWN"
FORMAT_VERSION = 1
FLAG_DSM = 1
FLAG_VIEWS = 2


@dataclass
class Dsm4:
    """Channels: [leaf-on height, leaf-on intensity, leaf-off height,
    leaf-off intensity] of the highest point per 12.5-cm pixel."""

    channels: np.ndarray  # (4, 128, 128) float32
    crown_area: float


@dataclass
class Views4:
    """Images: [aerial leaf-on, aerial leaf-off, profile leaf-on,
    profile leaf-off]; aerial pixels carry the intensity of the highest
    point, profile pixels the mean intensity of a 75-cm slab through the
    apex."""

    images: np.ndarray  # (4, 64, 64) float32
    tree_height: float
    crown_width: float


@dataclass
class RotatedRep:
    rotation: float
    dsm4: "Dsm4 | None"
    views4: "Views4 | None"


@dataclass
class RepresentationSet:
    crown_id: str
    label: str
    crown_class: str
    density: float  # points per m2 of crown area, both seasons
    entries: list[RotatedRep]
    scaled: bool = False


def rotate_about_apex(crown: CrownCloud, degrees: float) -> CrownCloud:
    """Rotate the cloud horizontally about the vertical axis through the
    apex. Heights, attributes, and scalar crown features are unchanged."""
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dx = crown.points.x - crown.apex.x
    dy = crown.points.y - crown.apex.y
    rotated = crown.points.replace(
        x=crown.apex.x + cos_t * dx - sin_t * dy,
        y=crown.apex.y + sin_t * dx + cos_t * dy,
    )
    return CrownCloud(
        crown_id=crown.crown_id,
        points=rotated,
        apex=crown.apex,
        tree_height=crown.tree_height,
        width=crown.width,
        area=crown.area,
    )


def _pixel_coords(
    dx: np.ndarray, dy: np.ndarray, cell: float, size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map apex-relative offsets to (row, col); row 0 is north."""
    half = size // 2
    col = np.floor(dx / cell + half + 0.5).astype(np.int64)
    row = np.floor(-dy / cell + half + 0.5).astype(np.int64)
    inside = (row >= 0) & (row < size) & (col >= 0) & (col < size)
    return row, col, inside


def _top_per_pixel(
    pix: np.ndarray, height: np.ndarray, intensity: np.ndarray
) -> np.ndarray:
    """Indices of the highest point per pixel; ties prefer larger
    intensity, then earlier input order."""
    order = np.lexsort((np.arange(len(pix)), -intensity, -height, pix))
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    return order[first]


def make_dsm4(crown: CrownCloud) -> Dsm4:
    channels = np.zeros((4, DSM_SIZE, DSM_SIZE), dtype=np.float32)
    for season, base in ((LEAF_ON, 0), (LEAF_OFF, 2)):
        part = crown.points.select(crown.points.season == season)
        if len(part) == 0:
            continue
        row, col, inside = _pixel_coords(
            part.x - crown.apex.x, part.y - crown.apex.y, DSM_CELL, DSM_SIZE
        )
        part, row, col = part.select(inside), row[inside], col[inside]
        if len(part) == 0:
            continue
        top = _top_per_pixel(row * DSM_SIZE + col, part.z, part.intensity)
        channels[base, row[top], col[top]] = part.z[top]
        channels[base + 1, row[top], col[top]] = part.intensity[top]
    return Dsm4(channels=channels, crown_area=crown.area)


def make_views4(crown: CrownCloud) -> Views4:
    images = np.zeros((4, VIEW_SIZE, VIEW_SIZE), dtype=np.float32)
    dx = crown.points.x - crown.apex.x
    dy = crown.points.y - crown.apex.y

    for season, aerial_ch, profile_ch in ((LEAF_ON, 0, 2), (LEAF_OFF, 1, 3)):
        season_mask = crown.points.season == season
        part = crown.points.select(season_mask)
        if len(part) == 0:
            continue

        row, col, inside = _pixel_coords(
            dx[season_mask], dy[season_mask], VIEW_CELL, VIEW_SIZE
        )
        air, arow, acol = part.select(inside), row[inside], col[inside]
        if len(air):
            top = _top_per_pixel(arow * VIEW_SIZE + acol, air.z, air.intensity)
            images[aerial_ch, arow[top], acol[top]] = air.intensity[top]

        # Profile slab: 75 cm thick, through the apex, along the current
        # x-axis; rows count down from the apex height.
        in_plane = np.abs(dy[season_mask]) <= PROFILE_HALF_THICKNESS
        slab = part.select(in_plane)
        if len(slab) == 0:
            continue
        half = VIEW_SIZE // 2
        pcol = np.floor(
            (slab.x - crown.apex.x) / VIEW_CELL + half + 0.5
        ).astype(np.int64)
        prow = np.floor((crown.tree_height - slab.z) / VIEW_CELL).astype(np.int64)
        ok = (prow >= 0) & (prow < VIEW_SIZE) & (pcol >= 0) & (pcol < VIEW_SIZE)
        prow, pcol = prow[ok], pcol[ok]
        values = slab.intensity[ok].astype(np.float64)
        sums = np.zeros((VIEW_SIZE, VIEW_SIZE), dtype=np.float64)
        counts = np.zeros((VIEW_SIZE, VIEW_SIZE), dtype=np.int64)
        np.add.at(sums, (prow, pcol), values)
        np.add.at(counts, (prow, pcol), 1)
        filled = counts > 0
        images[profile_ch][filled] = sums[filled] / counts[filled]

    return Views4(
        images=images, tree_height=crown.tree_height, crown_width=crown.width
    )


def augment_rotations(
    crown: CrownCloud,
    n: int = 180,
    step: float = 2.0,
    label: str = "",
    crown_class: str = "",
    kinds: tuple[str, ...] = ("dsm4", "views4"),
) -> RepresentationSet:
    """Build representations at rotations 0, step, ..., (n-1)*step.

    Scalar features are copied from the crown, so they are exactly equal
    across entries.
    """
    entries = []
    for k in range(n):
        rotated = rotate_about_apex(crown, k * step) if k else crown
        entries.append(
            RotatedRep(
                rotation=k * step,
                dsm4=make_dsm4(rotated) if "dsm4" in kinds else None,
                views4=make_views4(rotated) if "views4" in kinds else None,
            )
        )
    return RepresentationSet(
        crown_id=crown.crown_id,
        label=label,
        crown_class=crown_class,
        density=len(crown.points) / crown.area,
        entries=entries,
    )


def scale_for_network(rep: RepresentationSet) -> RepresentationSet:
    """Scale all inputs near [0, 1]: heights / 50, intensities / 255,
    crown area / 300, crown width / 20."""
    if rep.scaled:
        raise ValueError(f"representation set {rep.crown_id} already scaled")
    entries = []
    for entry in rep.entries:
        dsm4 = None
        if entry.dsm4 is not None:
            channels = entry.dsm4.channels.copy()
            channels[0] /= HEIGHT_SCALE
            channels[1] /= INTENSITY_SCALE
            channels[2] /= HEIGHT_SCALE
            channels[3] /= INTENSITY_SCALE
            dsm4 = Dsm4(channels=channels, crown_area=entry.dsm4.crown_area / AREA_SCALE)
        views4 = None
        if entry.views4 is not None:
            views4 = Views4(
                images=entry.views4.images / INTENSITY_SCALE,
                tree_height=entry.views4.tree_height / HEIGHT_SCALE,
                crown_width=entry.views4.crown_width / WIDTH_SCALE,
            )
        entries.append(RotatedRep(entry.rotation, dsm4, views4))
    return RepresentationSet(
        crown_id=rep.crown_id,
        label=rep.label,
        crown_class=rep.crown_class,
        density=rep.density,
        entries=entries,
        scaled=True,
    )


def _record_bytes(rep: RepresentationSet) -> bytes:
    first = rep.entries[0]
    flags = (FLAG_DSM if first.dsm4 is not None else 0) | (
        FLAG_VIEWS if first.views4 is not None else 0
    )
    parts = [MAGIC, struct.pack("<HHI", FORMAT_VERSION, flags, len(rep.entries))]
    if first.dsm4 is not None:
        parts.append(struct.pack("<III", *first.dsm4.channels.shape))
    if first.views4 is not None:
        parts.append(struct.pack("<III", *first.views4.images.shape))
    for entry in rep.entries:
        parts.append(struct.pack("<f", entry.rotation))
        if entry.dsm4 is not None:
            parts.append(entry.dsm4.channels.astype("<f4").tobytes())
        if entry.views4 is not None:
            parts.append(entry.views4.images.astype("<f4").tobytes())
    crown_area = (
        first.dsm4.crown_area if first.dsm4 is not None else 0.0
    )
    tree_height = first.views4.tree_height if first.views4 is not None else 0.0
    crown_width = first.views4.crown_width if first.views4 is not None else 0.0
    parts.append(struct.pack("<fff", crown_area, tree_height, crown_width))
    return b"".join(parts)


def write_representation_file(
    tensor_path: "str | Path",
    manifest_path: "str | Path",
    reps: list[RepresentationSet],
    n_rotations: int,
    step: float,
) -> None:
    """Write all representation sets to one binary file plus a JSON
    manifest mapping crown_id to its record offset and metadata."""
    records: dict[str, dict] = {}
    offset = 0
    with open(tensor_path, "wb") as handle:
        for rep in reps:
            blob = _record_bytes(rep)
            records[rep.crown_id] = {
                "offset": offset,
                "label": rep.label,
                "crown_class": rep.crown_class,
                "density": rep.density,
            }
            handle.write(blob)
            offset += len(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "n_rotations": n_rotations,
        "step": step,
        "scaled": all(rep.scaled for rep in reps),
        "records": records,
    }
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def read_manifest(manifest_path: "str | Path") -> dict:
    with open(manifest_path, encoding="utf-8") as handle:
        return json.load(handle)


def _read_exact(handle, count: int) -> bytes:
    blob = handle.read(count)
    if len(blob) != count:
        raise ValueError("truncated tensor file")
    return blob


def read_representation(
    tensor_path: "str | Path", manifest: dict, crown_id: str
) -> RepresentationSet:
    meta = manifest["records"][crown_id]
    with open(tensor_path, "rb") as handle:
        handle.seek(meta["offset"])
        if _read_exact(handle, 4) != MAGIC:
            raise ValueError(f"bad magic at offset {meta['offset']}")
        version, flags, n_entries = struct.unpack("<HHI", _read_exact(handle, 8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported tensor format version {version}")
        dsm_shape = views_shape = None
        if flags & FLAG_DSM:
            dsm_shape = struct.unpack("<III", _read_exact(handle, 12))
        if flags & FLAG_VIEWS:
            views_shape = struct.unpack("<III", _read_exact(handle, 12))
        raw_entries = []
        for _ in range(n_entries):
            (rotation,) = struct.unpack("<f", _read_exact(handle, 4))
            dsm = views = None
            if dsm_shape:
                n = int(np.prod(dsm_shape))
                dsm = np.frombuffer(_read_exact(handle, 4 * n), dtype="<f4").reshape(
                    dsm_shape
                )
            if views_shape:
                n = int(np.prod(views_shape))
                views = np.frombuffer(_read_exact(handle, 4 * n), dtype="<f4").reshape(
                    views_shape
                )
            raw_entries.append((rotation, dsm, views))
        crown_area, tree_height, crown_width = struct.unpack(
            "<fff", _read_exact(handle, 12)
        )
    entries = [
        RotatedRep(
            rotation=rotation,
            dsm4=None if dsm is None else Dsm4(dsm.copy(), crown_area),
            views4=None
            if views is None
            else Views4(views.copy(), tree_height, crown_width),
        )
        for rotation, dsm, views in raw_entries
    ]
    return RepresentationSet(
        crown_id=crown_id,
        label=meta["label"],
        crown_class=meta["crown_class"],
        density=meta["density"],
        entries=entries,
        scaled=manifest["scaled"],
    )


def read_all_representations(
    tensor_path: "str | Path", manifest: dict
) -> list[RepresentationSet]:
    return [
        read_representation(tensor_path, manifest, crown_id)
        for crown_id in sorted(manifest["records"])
    ]
