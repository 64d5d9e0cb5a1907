"""Portable image files, annotation sidecars, heat-map matrices and atomic writes.

All formats are described byte for byte in FORMATS.md.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, HeatMap


class FormatError(ValueError):
    pass


# -- atomic writes ---------------------------------------------------------------

def atomic_write_bytes(path: Path | str, data: bytes) -> Path:
    """Write to a temporary sibling, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: Path | str, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


# -- PGM / PPM -----------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half to even."""
    return np.rint(np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(image: np.ndarray) -> bytes:
    """Binary PGM (1 channel) or PPM (3 channels) from [C,H,W] or [H,W] in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise FormatError(f"expected [1|3, H, W] or [H, W], got shape {img.shape}")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    px = quantize(img).transpose(1, 2, 0)  # interleave channels
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pnm`; returns [C,H,W] floats in [0, 1]."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-integer PNM header field") from exc
    if maxval != 255:
        raise FormatError(f"only 8-bit PNM is supported, maxval={maxval}")
    c = 1 if magic == b"P5" else 3
    body = data[pos:pos + w * h * c]
    if len(body) != w * h * c:
        raise FormatError(f"PNM body has {len(body)} bytes, expected {w * h * c}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
    return px.transpose(2, 0, 1).astype(float) / 255.0


def write_image(path: Path | str, image: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_pnm(image))


def read_image(path: Path | str) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


# -- annotation sidecars ---------------------------------------------------------

def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else f"{v:.6f}"


def format_annotations(items: Iterable[tuple[int, Box]]) -> str:
    """One line per instance: ``category x y w h`` plus ``score`` when the box has one."""
    lines = []
    for cat, b in items:
        fields = [str(int(cat)), _num(b.x), _num(b.y), _num(b.w), _num(b.h)]
        if b.score is not None:
            fields.append(f"{float(b.score):.6f}")
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def parse_annotations(text: str) -> list[tuple[int, Box]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (5, 6):
            raise FormatError(f"annotation line {n}: expected 5 or 6 fields, got {len(parts)}")
        try:
            cat = int(parts[0])
            x, y, w, h = (float(p) for p in parts[1:5])
            score = float(parts[5]) if len(parts) == 6 else None
        except ValueError as exc:
            raise FormatError(f"annotation line {n}: {exc}") from exc
        out.append((cat, Box(x, y, w, h, score=score, category=cat)))
    return out


def write_annotations(path: Path | str, items: Iterable[tuple[int, Box]]) -> Path:
    return atomic_write_text(path, format_annotations(items))


def read_annotations(path: Path | str) -> list[tuple[int, Box]]:
    return parse_annotations(Path(path).read_text())


# -- heat maps -------------------------------------------------------------------

def format_matrix(scores: np.ndarray) -> str:
    """Rows of space-separated ``%.9e`` values; ``repr``-exact enough for float grids."""
    m = np.atleast_2d(np.asarray(scores, dtype=float))
    return "".join(" ".join(f"{v:.9e}" for v in row) + "\n" for row in m)


def parse_matrix(text: str) -> np.ndarray:
    rows = [[float(v) for v in line.split()] for line in text.splitlines() if line.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError("heat-map matrix must be a non-empty rectangular grid")
    return np.array(rows)


def write_heatmap(stem: Path | str, heatmap: HeatMap) -> tuple[Path, Path]:
    """``<stem>.txt`` float matrix plus ``<stem>.pgm`` peak-normalised grayscale."""
    stem = Path(stem)
    txt = atomic_write_text(stem.with_suffix(".txt"), format_matrix(heatmap.scores))
    pgm = write_image(stem.with_suffix(".pgm"), heatmap.normalized().scores)
    return txt, pgm


def read_heatmap(path: Path | str, source: str = "cam") -> HeatMap:
    return HeatMap(parse_matrix(Path(path).read_text()), source)


# -- key = value files -------------------------------------------------------------

def format_keyvalue(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def scene_stems(directory: Path | str) -> Sequence[str]:
    return sorted(p.stem for p in Path(directory).glob("*.pgm")) + \
        sorted(p.stem for p in Path(directory).glob("*.ppm"))


# -- scene datasets ----------------------------------------------------------------

MANIFEST = "manifest.txt"


def _scene_stem(i: int) -> str:
    return f"scene_{i:05d}"


def save_dataset(directory: Path | str, scenes: Sequence, meta: dict | None = None) -> Path:
    """Images, ``.labels`` files (weak annotation), ``.txt`` box sidecars and a manifest.

    Box sidecars are written only for scenes in full mode; weak scenes keep
    their boxes off disk.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        stem = directory / _scene_stem(i)
        ext = ".pgm" if s.image.shape[0] == 1 else ".ppm"
        write_image(stem.with_suffix(ext), s.image)
        atomic_write_text(stem.with_suffix(".labels"), " ".join(str(c) for c in s.labels) + "\n")
        if s.mode == "full":
            write_annotations(stem.with_suffix(".txt"), s.instances)
    info = {"count": len(scenes), "mode": scenes[0].mode if scenes else "full"}
    info.update(meta or {})
    atomic_write_text(directory / MANIFEST, format_keyvalue(info))
    return directory


def load_dataset(directory: Path | str, mode: str = "weak") -> list:
    """Scenes saved by :func:`save_dataset`; ``mode="weak"`` never opens the box sidecars."""
    from .scenegen import Scene

    directory = Path(directory)
    if mode not in ("full", "weak"):
        raise FormatError(f"mode must be 'full' or 'weak', got {mode!r}")
    try:
        info = parse_keyvalue((directory / MANIFEST).read_text())
        count = int(info["count"])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{directory}: missing or malformed {MANIFEST}") from exc
    scenes = []
    for i in range(count):
        stem = directory / _scene_stem(i)
        img_path = stem.with_suffix(".pgm") if stem.with_suffix(".pgm").exists() else stem.with_suffix(".ppm")
        try:
            image = read_image(img_path)
            if mode == "weak":
                labels = tuple(int(c) for c in stem.with_suffix(".labels").read_text().split())
                scenes.append(Scene(image, [], "weak", i, label_set=labels))
            else:
                scenes.append(Scene(image, read_annotations(stem.with_suffix(".txt")), "full", i))
        except OSError as exc:
            raise FormatError(f"{stem.name}: {exc.strerror}") from exc
    return scenes
