"""File formats: PLY clouds, 16-bit PNG height maps, frame folders and CSV tables."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import cv2
import numpy as np

from .optics import SensorFrame

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class CorruptFrameError(ValueError):
    pass


def write_ply(path, points, displacement=None):
    """Binary little-endian PLY with float32 xyz and an optional displacement field."""
    pts = np.asarray(points, dtype="<f4")
    props = ["property float x", "property float y", "property float z"]
    cols = [pts]
    if displacement is not None:
        props.append("property float displacement")
        cols.append(np.asarray(displacement, dtype="<f4").reshape(-1, 1))
    data = np.ascontiguousarray(np.hstack(cols).astype("<f4"))
    header = "\n".join(["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}",
                        *props, "end_header"]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path):
    """Reads files written by :func:`write_ply`; returns (points, extra columns)."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    n = next(int(h.split()[-1]) for h in header if h.startswith("element vertex"))
    names = [h.split()[-1] for h in header if h.startswith("property")]
    data = np.frombuffer(raw[end:], dtype="<f4", count=n * len(names)).reshape(n, len(names))
    return data[:, :3].astype(float), {k: data[:, i].astype(float) for i, k in enumerate(names[3:], 3)}


def write_height_png(path, height_mm):
    """Height map as 16-bit PNG in micrometres (mm x 1000), clipped to [0, 65535]."""
    v = np.clip(np.rint(np.asarray(height_mm) * 1000.0), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), v):
        raise OSError(f"could not write {path}")


def read_height_png(path) -> np.ndarray:
    v = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if v is None or v.dtype != np.uint16:
        raise ValueError(f"{path} is not a 16-bit height map")
    return v.astype(float) / 1000.0


def write_frame(path, frame):
    pix = getattr(frame, "pixels", frame)
    if not cv2.imwrite(str(path), cv2.cvtColor(pix, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def read_frame(path, sequence: int = 0) -> SensorFrame:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise CorruptFrameError(f"cannot decode {path}")
    return SensorFrame(cv2.cvtColor(img, cv2.COLOR_BGR2RGB), 0, sequence)


def list_frames(directory) -> list:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES and p.is_file())


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
