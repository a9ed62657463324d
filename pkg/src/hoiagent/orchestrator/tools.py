"""Local image tools and the router that sends other tool kinds to a backend."""

from __future__ import annotations

import hashlib
import io
import math
import os
import tempfile
import time
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from PIL import Image

from ..core import BBox
from ..protocol import ToolKind
from .backends import ToolBackend, ToolResult


class ToolError(RuntimeError):
    pass


class ArtifactStore:
    """Append-only, content-addressed PNG store.

    Files are named by the SHA-256 of mode, size and raw pixel bytes, and
    written via an atomic rename so concurrent writers are safe.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _write_atomic(self, name: str, data: bytes) -> str:
        path = self.root / name
        if not path.exists():
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        return str(path)

    def put_image(self, img: Image.Image) -> str:
        h = hashlib.sha256()
        h.update(f"{img.mode}:{img.size[0]}x{img.size[1]}:".encode())
        h.update(img.tobytes())
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return self._write_atomic(h.hexdigest() + ".png", buf.getvalue())

    def put_bytes(self, data: bytes) -> str:
        try:
            with Image.open(io.BytesIO(data)) as img:
                img.load()
                return self.put_image(img)
        except OSError:
            return self._write_atomic(hashlib.sha256(data).hexdigest() + ".bin", data)


def crop_tool(image_ref: str, region: BBox, store: ArtifactStore) -> str:
    """Crop ``region`` (clipped to the image) and store it; returns the artifact path.

    Fractional edges are widened outward to whole pixels.
    """
    try:
        with Image.open(image_ref) as img:
            img.load()
            src = img.copy()
    except (OSError, ValueError) as e:
        raise ToolError(f"cannot read image {image_ref!r}: {e}") from e
    w, h = src.size
    x1, y1 = max(0, math.floor(region.x1)), max(0, math.floor(region.y1))
    x2, y2 = min(w, math.ceil(region.x2)), min(h, math.ceil(region.y2))
    if x2 <= x1 or y2 <= y1:
        raise ToolError(f"region {region.as_list()} does not intersect the {w}x{h} image")
    return store.put_image(src.crop((x1, y1, x2, y2)))


def crop_regions(detections: Sequence[tuple[str, BBox]], limit: int = 4) -> list[BBox]:
    """Union boxes of person/object pairs, or single boxes if nobody was detected."""
    people = [b for lbl, b in detections if lbl == "person"]
    things = [b for lbl, b in detections if lbl != "person"]
    if people and things:
        regions = [p.union_box(o) for p in people for o in things]
    else:
        regions = [b for _, b in detections]
    out: list[BBox] = []
    for r in regions:
        if r not in out:
            out.append(r)
    return out[:limit]


class ToolRouter:
    """``image_crop`` runs locally; every other kind goes to ``remote``."""

    def __init__(self, store: ArtifactStore, remote: Optional[ToolBackend] = None):
        self.store = store
        self.remote = remote

    def execute(self, tool: ToolKind, args: Mapping[str, Any], images: Sequence[str]) -> ToolResult:
        t0 = time.perf_counter()
        if tool is ToolKind.image_crop:
            refs, errors = [], []
            for r in args.get("regions", []):
                try:
                    refs.append(crop_tool(images[0], BBox.from_seq(r), self.store))
                except (ToolError, ValueError, IndexError) as e:
                    errors.append(str(e))
            return ToolResult((), tuple(refs), bool(refs), time.perf_counter() - t0,
                              "; ".join(errors) or (None if refs else "no crop regions"))
        if self.remote is None:
            return ToolResult(success=False, error=f"no backend for {tool.value}")
        return self.remote.execute(tool, args, images)
