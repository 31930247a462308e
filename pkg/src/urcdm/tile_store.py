"""Out-of-core tiled RGB image store.

Layout on disk::

    <root>/manifest.txt                 key=value text
    <root>/level_<L>/tile_<row>_<col>.png

A tile file that does not exist is logically all white.  Each PNG carries an
Adler-32 checksum of its raw pixel bytes in a text chunk; a mismatch on read
raises :class:`CorruptTileError`.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import zlib
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, PngImagePlugin

from .resample import dequantize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
VALID_TILE_SIZES = (128, 256, 512, 1024)
WHITE = 255
MANIFEST = "manifest.txt"
CHECKSUM_KEY = "adler32"


class StoreError(Exception):
    """Base class for tile store failures."""


class CorruptTileError(StoreError):
    pass


class OutOfBoundsError(StoreError, ValueError):
    pass


class TileLeaseError(StoreError):
    """Two writers tried to modify the same tile at once."""


@dataclass(frozen=True)
class LevelDesc:
    level_index: int
    width: int
    height: int
    zoom_from_previous: Fraction

    def grid(self, tile_size: int) -> tuple[int, int]:
        """(rows, cols) of the tile grid."""
        return -(-self.height // tile_size), -(-self.width // tile_size)


def _checksum(tile: np.ndarray) -> int:
    return zlib.adler32(np.ascontiguousarray(tile).tobytes()) & 0xFFFFFFFF


def _build_levels(sizes: list[tuple[int, int]]) -> list[LevelDesc]:
    levels = []
    for i, (w, h) in enumerate(sizes):
        if w < 1 or h < 1:
            raise ValueError(f"level {i}: dimensions must be >= 1, got {w}x{h}")
        if i and (w < sizes[i - 1][0] or h < sizes[i - 1][1]):
            raise ValueError(f"level {i} is smaller than level {i - 1}")
        zoom = Fraction(w, sizes[i - 1][0]) if i else Fraction(1)
        levels.append(LevelDesc(i, w, h, zoom))
    return levels


class TiledImage:
    """A multi-level tiled RGB image backed by a directory.

    Level 0 is the lowest magnification.  ``width``/``height`` describe the
    finest (last) level, which is also the default for reads and writes.
    Tiles are cached write-back in an LRU of ``cache_tiles`` entries; call
    :meth:`flush` (or :meth:`close`) to persist.
    """

    def __init__(self, root, tile_size: int, levels: list[LevelDesc], cache_tiles: int = 64):
        if tile_size not in VALID_TILE_SIZES:
            raise ValueError(f"tile_size must be one of {VALID_TILE_SIZES}, got {tile_size}")
        if cache_tiles < 1:
            raise ValueError("cache_tiles must be >= 1")
        self.storage_root = Path(root)
        self.tile_size = tile_size
        self.channels = 3
        self.levels = list(levels)
        self.cache_tiles = cache_tiles
        self._cache: OrderedDict[tuple[int, int, int], np.ndarray] = OrderedDict()
        self._dirty: set[tuple[int, int, int]] = set()
        self._lock = threading.RLock()
        self._leases: dict[tuple[int, int, int], int] = {}
        self._lease_lock = threading.Lock()
        self.peak_cache_bytes = 0
        self.tiles_loaded = 0

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, root, width: int, height: int, tile_size: int, **kw) -> "TiledImage":
        return cls.create_pyramid(root, [(width, height)], tile_size, **kw)

    @classmethod
    def create_pyramid(
        cls, root, sizes: list[tuple[int, int]], tile_size: int, *, overwrite: bool = False, cache_tiles: int = 64
    ) -> "TiledImage":
        root = Path(root)
        if (root / MANIFEST).exists() and not overwrite:
            raise FileExistsError(f"{root} already holds a tiled image")
        img = cls(root, tile_size, _build_levels(sizes), cache_tiles=cache_tiles)
        try:
            root.mkdir(parents=True, exist_ok=True)
            if overwrite:
                for f in root.glob("level_*/tile_*.png"):
                    f.unlink()
            for lv in img.levels:
                (root / f"level_{lv.level_index}").mkdir(exist_ok=True)
            img._write_manifest()
        except OSError as exc:
            raise StoreError(f"cannot write to {root}: {exc}") from exc
        return img

    @classmethod
    def open(cls, root, cache_tiles: int = 64) -> "TiledImage":
        root = Path(root)
        kv = read_manifest(root / MANIFEST)
        if int(kv["format_version"]) != FORMAT_VERSION:
            raise StoreError(f"unsupported format_version {kv['format_version']}")
        if int(kv.get("channels", 3)) != 3:
            raise StoreError("only 3-channel images are supported")
        n = int(kv["levels"])
        sizes = [(int(kv[f"level{i}.width"]), int(kv[f"level{i}.height"])) for i in range(n)]
        return cls(root, int(kv["tile_size"]), _build_levels(sizes), cache_tiles=cache_tiles)

    def _write_manifest(self) -> None:
        top = self.levels[-1]
        lines = [
            f"format_version={FORMAT_VERSION}",
            f"width={top.width}",
            f"height={top.height}",
            f"tile_size={self.tile_size}",
            "channels=3",
            f"checksum={CHECKSUM_KEY}",
            f"levels={len(self.levels)}",
        ]
        for lv in self.levels:
            lines.append(f"level{lv.level_index}.width={lv.width}")
            lines.append(f"level{lv.level_index}.height={lv.height}")
        tmp = self.storage_root / (MANIFEST + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, self.storage_root / MANIFEST)

    # -- geometry -----------------------------------------------------------

    @property
    def width(self) -> int:
        return self.levels[-1].width

    @property
    def height(self) -> int:
        return self.levels[-1].height

    def _level(self, level: int | None) -> LevelDesc:
        if level is None:
            return self.levels[-1]
        try:
            return self.levels[level]
        except IndexError:
            raise ValueError(f"no level {level}; image has {len(self.levels)}") from None

    def grid(self, level: int | None = None) -> tuple[int, int]:
        return self._level(level).grid(self.tile_size)

    def tile_path(self, level: int, row: int, col: int) -> Path:
        return self.storage_root / f"level_{level}" / f"tile_{row}_{col}.png"

    def tiles_for_rect(self, x: int, y: int, w: int, h: int, level: int | None = None) -> list[tuple[int, int]]:
        """(row, col) of every in-grid tile intersecting the rectangle."""
        lv = self._level(level)
        rows, cols = lv.grid(self.tile_size)
        ts = self.tile_size
        r0, r1 = max(y // ts, 0), min((y + h - 1) // ts, rows - 1)
        c0, c1 = max(x // ts, 0), min((x + w - 1) // ts, cols - 1)
        return [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]

    # -- tile cache ---------------------------------------------------------

    def _load_tile(self, key: tuple[int, int, int]) -> np.ndarray | None:
        path = self.tile_path(*key)
        if not path.exists():
            return None
        try:
            with Image.open(path) as im:
                im.load()
                stored = im.text.get(CHECKSUM_KEY) if hasattr(im, "text") else None
                arr = np.asarray(im.convert("RGB") if im.mode != "RGB" else im, dtype=np.uint8).copy()
        except (OSError, SyntaxError, ValueError, zlib.error) as exc:
            raise CorruptTileError(f"cannot decode {path}: {exc}") from exc
        ts = self.tile_size
        if arr.shape != (ts, ts, 3):
            raise CorruptTileError(f"{path}: shape {arr.shape}, expected {(ts, ts, 3)}")
        if stored is None or int(stored) != _checksum(arr):
            raise CorruptTileError(f"checksum mismatch in {path}")
        self.tiles_loaded += 1
        return arr

    def _store_tile(self, key: tuple[int, int, int], tile: np.ndarray) -> None:
        info = PngImagePlugin.PngInfo()
        info.add_text(CHECKSUM_KEY, str(_checksum(tile)))
        path = self.tile_path(*key)
        tmp = path.with_suffix(".tmp")
        try:
            Image.fromarray(tile, "RGB").save(tmp, format="PNG", pnginfo=info, compress_level=1)
            os.replace(tmp, path)
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc

    def _evict_to(self, count: int) -> None:
        while len(self._cache) > count:
            key, tile = self._cache.popitem(last=False)
            if key in self._dirty:
                self._store_tile(key, tile)
                self._dirty.discard(key)

    def _get_tile(self, key, for_write: bool) -> np.ndarray | None:
        """Cached tile array; ``None`` means an absent (white) tile on a read."""
        tile = self._cache.get(key)
        if tile is not None:
            self._cache.move_to_end(key)
            return tile
        # make room first so the resident set never exceeds the bound
        self._evict_to(self.cache_tiles - 1)
        tile = self._load_tile(key)
        if tile is None:
            if not for_write:
                return None
            tile = np.full((self.tile_size, self.tile_size, 3), WHITE, dtype=np.uint8)
        self._cache[key] = tile
        self.peak_cache_bytes = max(self.peak_cache_bytes, len(self._cache) * tile.nbytes)
        return tile

    @property
    def cache_limit_bytes(self) -> int:
        return self.cache_tiles * self.tile_size * self.tile_size * 3

    def flush(self) -> None:
        with self._lock:
            for key in sorted(self._dirty):
                self._store_tile(key, self._cache[key])
            self._dirty.clear()

    def close(self) -> None:
        self.flush()
        with self._lock:
            self._cache.clear()

    def __enter__(self) -> "TiledImage":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- leases -------------------------------------------------------------

    @contextmanager
    def lease(self, tiles: list[tuple[int, int]], level: int | None = None) -> Iterator[None]:
        """Hold exclusive write leases on ``tiles``; conflicting holders raise."""
        lvl = self._level(level).level_index
        me = threading.get_ident()
        keys = [(lvl, r, c) for r, c in tiles]
        taken = []
        with self._lease_lock:
            for k in keys:
                owner = self._leases.get(k)
                if owner is not None and owner != me:
                    for t in taken:
                        del self._leases[t]
                    raise TileLeaseError(f"tile {k} is being written by another thread")
                if owner is None:
                    self._leases[k] = me
                    taken.append(k)
        try:
            yield
        finally:
            with self._lease_lock:
                for t in taken:
                    del self._leases[t]

    # -- pixel access -------------------------------------------------------

    def read_region(self, x: int, y: int, w: int, h: int, level: int | None = None) -> np.ndarray:
        """Read a (h, w, 3) uint8 block; anything outside the image is white."""
        if w < 0 or h < 0:
            raise ValueError("negative region size")
        lv = self._level(level)
        out = np.full((h, w, 3), WHITE, dtype=np.uint8)
        if w == 0 or h == 0:
            return out
        ts = self.tile_size
        # clip to image (not tile grid) so padding never leaks into reads
        cx0, cy0 = max(x, 0), max(y, 0)
        cx1, cy1 = min(x + w, lv.width), min(y + h, lv.height)
        if cx0 >= cx1 or cy0 >= cy1:
            return out
        with self._lock:
            for r, c in self.tiles_for_rect(cx0, cy0, cx1 - cx0, cy1 - cy0, lv.level_index):
                tile = self._get_tile((lv.level_index, r, c), for_write=False)
                if tile is None:
                    continue
                tx0, ty0 = max(cx0, c * ts), max(cy0, r * ts)
                tx1, ty1 = min(cx1, (c + 1) * ts), min(cy1, (r + 1) * ts)
                out[ty0 - y : ty1 - y, tx0 - x : tx1 - x] = tile[ty0 - r * ts : ty1 - r * ts, tx0 - c * ts : tx1 - c * ts]
        return out

    def write_region(self, x: int, y: int, raster: np.ndarray, level: int | None = None) -> None:
        """Write a uint8 (h, w, 3) raster; the rectangle must lie inside the level."""
        raster = np.asarray(raster)
        if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[2] != 3:
            raise ValueError(f"expected uint8 (h, w, 3) raster, got {raster.dtype} {raster.shape}")
        lv = self._level(level)
        h, w = raster.shape[:2]
        if x < 0 or y < 0 or x + w > lv.width or y + h > lv.height:
            raise OutOfBoundsError(
                f"write ({x},{y},{w},{h}) outside level {lv.level_index} of {lv.width}x{lv.height}"
            )
        if w == 0 or h == 0:
            return
        ts = self.tile_size
        tiles = self.tiles_for_rect(x, y, w, h, lv.level_index)
        with self.lease(tiles, lv.level_index), self._lock:
            for r, c in tiles:
                key = (lv.level_index, r, c)
                tile = self._get_tile(key, for_write=True)
                tx0, ty0 = max(x, c * ts), max(y, r * ts)
                tx1, ty1 = min(x + w, (c + 1) * ts), min(y + h, (r + 1) * ts)
                tile[ty0 - r * ts : ty1 - r * ts, tx0 - c * ts : tx1 - c * ts] = raster[ty0 - y : ty1 - y, tx0 - x : tx1 - x]
                self._dirty.add(key)

    def tile_exists(self, level: int, row: int, col: int) -> bool:
        key = (level, row, col)
        with self._lock:
            return key in self._cache or self.tile_path(*key).exists()

    def verify(self) -> int:
        """Decode every stored tile (checksums included); returns the count."""
        n = 0
        for path in sorted(self.storage_root.glob("level_*/tile_*.png")):
            lvl = int(path.parent.name.split("_")[1])
            r, c = (int(v) for v in path.stem.split("_")[1:])
            self._load_tile((lvl, r, c))
            n += 1
        return n

    def level_reader(self, level: int | None = None) -> "LevelReader":
        return LevelReader(self, self._level(level).level_index)


class LevelReader:
    """Float [0, 1] view of one level, usable wherever a RasterSource is expected."""

    def __init__(self, img: TiledImage, level: int):
        self.img = img
        self.level = level
        desc = img.levels[level]
        self.width, self.height = desc.width, desc.height

    def read(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        return dequantize(self.img.read_region(x, y, w, h, self.level), np.float64)


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise StoreError(f"cannot read manifest {path}: {exc}") from exc
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StoreError(f"malformed manifest line {line!r}")
        kv[key.strip()] = value.strip()
    return kv


def create(root, width: int, height: int, tile_size: int, **kw) -> TiledImage:
    """Create a single-level all-white image."""
    return TiledImage.create(root, width, height, tile_size, **kw)


def open_image(root, cache_tiles: int = 64) -> TiledImage:
    return TiledImage.open(root, cache_tiles=cache_tiles)


def crop_pad_offset(src: int, dst: int, anchor: str = "center") -> int:
    """Source coordinate of destination pixel 0 along one axis.

    Positive means the source is cropped, negative means white padding.
    """
    if anchor == "center":
        return (src - dst) // 2
    if anchor == "corner":
        return 0
    raise ValueError(f"unknown anchor {anchor!r}")


def crop_or_pad(
    img: TiledImage,
    target_w: int,
    target_h: int,
    root,
    *,
    anchor: str = "center",
    level: int | None = None,
    overwrite: bool = False,
) -> TiledImage:
    """Copy one level into a new single-level image of the target size.

    Each axis is cropped when the source is larger and padded with white when
    it is smaller.  Destination tiles whose source footprint holds no stored
    tile are left absent, i.e. white, without touching disk.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be >= 1")
    lv = img._level(level)
    ox = crop_pad_offset(lv.width, target_w, anchor)
    oy = crop_pad_offset(lv.height, target_h, anchor)
    out = TiledImage.create(root, target_w, target_h, img.tile_size, overwrite=overwrite, cache_tiles=img.cache_tiles)
    ts = out.tile_size
    rows, cols = out.grid()
    for r in range(rows):
        for c in range(cols):
            x, y = c * ts, r * ts
            w, h = min(ts, target_w - x), min(ts, target_h - y)
            src_tiles = img.tiles_for_rect(x + ox, y + oy, w, h, lv.level_index)
            sx0, sy0 = max(x + ox, 0), max(y + oy, 0)
            sx1, sy1 = min(x + ox + w, lv.width), min(y + oy + h, lv.height)
            if sx0 >= sx1 or sy0 >= sy1:
                continue
            if not any(img.tile_exists(lv.level_index, tr, tc) for tr, tc in src_tiles):
                continue
            out.write_region(x, y, img.read_region(x + ox, y + oy, w, h, lv.level_index))
            out.flush()
    out.flush()
    return out


_TILE_NAME = re.compile(r"^(\d+)_(\d+)\.(png|bmp|tif|tiff|ppm)$", re.IGNORECASE)
_ACCEPTED_MODES = {"RGB", "RGBA", "L"}


def import_raster_dir(directory, tile_size: int, root, *, overwrite: bool = False) -> TiledImage:
    """Assemble lossless ``<row>_<col>.<ext>`` rasters into a single-level image."""
    directory = Path(directory)
    found: dict[tuple[int, int], Path] = {}
    for p in directory.iterdir():
        m = _TILE_NAME.match(p.name)
        if m:
            found[(int(m.group(1)), int(m.group(2)))] = p
    if not found:
        raise StoreError(f"no row_col raster files in {directory}")
    rows = max(r for r, _ in found) + 1
    cols = max(c for _, c in found) + 1
    for r in range(rows):
        for c in range(cols):
            if (r, c) not in found:
                raise StoreError(f"missing raster for row {r}, col {c} ({r}_{c}) in {directory}")
    dims = None
    for key in sorted(found):
        with Image.open(found[key]) as im:
            if im.mode not in _ACCEPTED_MODES:
                raise StoreError(f"{found[key].name}: unsupported mode/bit depth {im.mode!r}")
            if dims is None:
                dims = im.size
            elif im.size != dims:
                raise StoreError(f"{found[key].name}: size {im.size} differs from {dims}")
    pw, ph = dims
    out = TiledImage.create(root, pw * cols, ph * rows, tile_size, overwrite=overwrite)
    for (r, c), path in sorted(found.items()):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        out.write_region(c * pw, r * ph, arr)
    out.flush()
    return out
