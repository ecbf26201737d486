"""Video ingest: decode clips, keep luma, crop, cut into blocks and GOPs.

A dataset on disk is a directory holding ``manifest.json`` and ``blocks.f32``,
a little-endian float32 array laid out as
(gop, frame, gridRow, gridCol, pixelRow, pixelCol).
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# ITU-R BT.601
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm"}
DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOCKS_NAME = "blocks.f32"


class IngestError(ValueError):
    """Raised for unreadable clips, bad shapes and inconsistent datasets."""


@dataclass(frozen=True)
class GopBlockSequence:
    """One group of pictures as T frames of block grids.

    ``blocks`` has shape (T, rows, cols, blockSize, blockSize), float32 in [0, 1].
    """

    blocks: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        b = self.blocks
        if b.ndim != 5 or b.shape[3] != b.shape[4]:
            raise IngestError(f"GOP blocks must be (T, rows, cols, b, b), got {b.shape}")
        if b.shape[0] < 2:
            raise IngestError("a GOP needs at least 2 frames")
        b.setflags(write=False)

    @property
    def T(self) -> int:
        return self.blocks.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.blocks.shape[1], self.blocks.shape[2]

    @property
    def block_size(self) -> int:
        return self.blocks.shape[3]

    def frame(self, t: int) -> np.ndarray:
        return assemble(self.blocks[t])


def _natural_key(path: Path):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", path.name)]


def _read_image_dir(path: Path) -> list[np.ndarray]:
    from PIL import Image

    files = sorted(
        (p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key
    )
    frames = []
    for f in files:
        with Image.open(f) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    return frames


def _read_container(path: Path) -> list[np.ndarray]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise IngestError(f"cannot open video {path}")
    frames = []
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    finally:
        cap.release()
    return frames


def decode_video(path, min_frames: int = 10) -> list[np.ndarray]:
    """Decode a video file or a directory of numbered images into RGB uint8 frames."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"unreadable clip: {path} does not exist")
    frames = _read_image_dir(path) if path.is_dir() else _read_container(path)
    if not frames:
        raise IngestError(f"zero frames in {path}")
    if len(frames) < min_frames:
        raise IngestError(f"insufficient frames in {path}: {len(frames)} < {min_frames}")
    return frames


def extract_luminance(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise IngestError(f"expected an H x W x 3 frame, got shape {frame.shape}")
    w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
    luma = frame.astype(np.float64) @ w / 255.0
    return np.clip(luma, 0.0, 1.0).astype(np.float32)


def center_crop(plane: np.ndarray, crop_h: int = 160, crop_w: int = 160) -> np.ndarray:
    """Central crop_h x crop_w window; odd margins lose their extra row/col at the bottom/right."""
    h, w = plane.shape[:2]
    if h < crop_h or w < crop_w:
        raise IngestError(f"plane {h}x{w} is smaller than crop {crop_h}x{crop_w}")
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    return plane[top : top + crop_h, left : left + crop_w]


def blockify(frame: np.ndarray, block_size: int = 32) -> np.ndarray:
    """Split an H x W frame into a (H/b, W/b, b, b) grid of non-overlapping blocks."""
    h, w = frame.shape
    if h % block_size or w % block_size:
        raise IngestError(f"frame {h}x{w} not divisible by block size {block_size}")
    rows, cols = h // block_size, w // block_size
    return frame.reshape(rows, block_size, cols, block_size).swapaxes(1, 2).copy()


def assemble(blocks: np.ndarray) -> np.ndarray:
    """Inverse of :func:`blockify` (also works on leading batch axes)."""
    *lead, rows, cols, b, b2 = blocks.shape
    out = np.swapaxes(blocks, -3, -2)
    return out.reshape(*lead, rows * b, cols * b2)


def group_gops(
    frames: Sequence[np.ndarray], T: int = 10, block_size: int = 32, source_id: str = ""
) -> list[GopBlockSequence]:
    """Consecutive non-overlapping T-frame windows; a trailing remainder shorter than T is dropped."""
    if T < 2:
        raise IngestError("T must be at least 2")
    if len(frames) < T:
        raise IngestError(f"insufficient frames: {len(frames)} < {T}")
    gops = []
    for g in range(len(frames) // T):
        window = frames[g * T : (g + 1) * T]
        blocks = np.stack([blockify(np.asarray(f, dtype=np.float32), block_size) for f in window])
        gops.append(GopBlockSequence(blocks, source_id=f"{source_id}#{g}" if source_id else str(g)))
    return gops


def hash_clip(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(path.iterdir(), key=_natural_key) if path.is_dir() else [path]
    for f in files:
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def ingest_clip(
    path, crop: tuple[int, int] = (160, 160), block_size: int = 32, T: int = 10
) -> list[GopBlockSequence]:
    frames = decode_video(path, min_frames=T)
    lumas = [center_crop(extract_luminance(f), *crop) for f in frames]
    return group_gops(lumas, T=T, block_size=block_size, source_id=Path(path).name)


def ingest_corpus(
    paths: Iterable, crop=(160, 160), block_size: int = 32, T: int = 10, workers: int = 1
) -> tuple[list[GopBlockSequence], list[dict]]:
    """Ingest clips in the given order. Output order never depends on ``workers``."""
    paths = [Path(p) for p in paths]

    def one(p):
        gops = ingest_clip(p, crop, block_size, T)
        return gops, {"source": p.name, "sha256": hash_clip(p), "gops": len(gops)}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, paths))
    else:
        results = [one(p) for p in paths]
    gops = [g for r in results for g in r[0]]
    return gops, [r[1] for r in results]


def write_dataset(gops: Sequence[GopBlockSequence], path, clips: Sequence[dict] = (), block_size=None, T=None) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if gops:
        shapes = {g.blocks.shape for g in gops}
        if len(shapes) != 1:
            raise IngestError(f"GOPs have inconsistent shapes: {sorted(shapes)}")
        T, rows, cols, b, _ = gops[0].blocks.shape
    else:
        rows = cols = 0
        b = block_size or 32
        T = T or 10
    manifest = {
        "version": DATASET_VERSION,
        "dtype": "<f4",
        "layout": ["gop", "frame", "gridRow", "gridCol", "pixelRow", "pixelCol"],
        "blockSize": int(b),
        "T": int(T),
        "gridRows": int(rows),
        "gridCols": int(cols),
        "count": len(gops),
        "sources": [g.source_id for g in gops],
        "clips": list(clips),
    }
    data = np.stack([g.blocks for g in gops]) if gops else np.zeros((0,), np.float32)
    data = np.ascontiguousarray(data, dtype="<f4")
    (path / BLOCKS_NAME).write_bytes(data.tobytes())
    manifest["sha256"] = hashlib.sha256(data.tobytes()).hexdigest()
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(path) -> dict:
    try:
        return json.loads((Path(path) / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read dataset manifest in {path}: {exc}") from exc


def read_dataset(path) -> list[GopBlockSequence]:
    path = Path(path)
    m = read_manifest(path)
    if m.get("version") != DATASET_VERSION:
        raise IngestError(f"unsupported dataset version {m.get('version')}")
    shape = (m["count"], m["T"], m["gridRows"], m["gridCols"], m["blockSize"], m["blockSize"])
    raw = (path / BLOCKS_NAME).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise IngestError(
            f"blocks file holds {len(raw)} bytes, manifest shape {shape} needs {expected}"
        )
    if m.get("sha256") and hashlib.sha256(raw).hexdigest() != m["sha256"]:
        raise IngestError("blocks file checksum does not match manifest")
    if m["count"] == 0:
        return []
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    sources = m.get("sources") or [str(i) for i in range(m["count"])]
    return [GopBlockSequence(data[i], source_id=sources[i]) for i in range(m["count"])]


def stack_gops(gops: Sequence[GopBlockSequence]) -> np.ndarray:
    """(G, T, rows, cols, b, b) float32 array."""
    if not gops:
        raise IngestError("empty dataset")
    return np.stack([g.blocks for g in gops]).astype(np.float32)
