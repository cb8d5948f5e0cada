"""Binary PLY, PFM, and PNG helpers used across the package.

PLY support is deliberately small: binary little-endian files, one vertex
element with scalar properties, plus an optional triangle face element.
That covers splat sets, meshes, and ground-truth point clouds.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import St2dgsError

# PLY scalar type names <-> numpy dtypes
_PLY_TO_NP = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def write_ply(path, vertex: np.ndarray, faces: np.ndarray | None = None,
              comments: tuple[str, ...] = ()) -> None:
    """Write a binary little-endian PLY with a vertex element and optional triangles.

    `vertex` must be a structured array; field order defines property order.
    """
    path = Path(path)
    lines = ["ply", "format binary_little_endian 1.0"]
    for c in comments:
        lines.append(f"comment {c}")
    lines.append(f"element vertex {len(vertex)}")
    for name in vertex.dtype.names:
        kind = vertex.dtype[name].str.lstrip("<>|=")
        lines.append(f"property {_NP_TO_PLY[kind]} {name}")
    if faces is not None:
        faces = np.ascontiguousarray(faces, dtype=np.int32)
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        f.write(_as_le(vertex).tobytes())
        if faces is not None:
            rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            f.write(rec.tobytes())


def read_ply(path):
    """Read a binary little-endian PLY written by this package (or compatible).

    Returns (vertices, faces): a structured array plus an (M, 3) int32 array,
    or None in place of faces for a point-only file.
    """
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise St2dgsError(f"not a PLY file: {path}")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]

    if "format binary_little_endian 1.0" not in header:
        raise St2dgsError(f"unsupported PLY format (need binary little-endian): {path}")

    elements = []  # (name, count, [(prop_name, np_type)], is_list)
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append([parts[1], int(parts[2]), [], False])
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][3] = True
            else:
                elements[-1][2].append((parts[2], "<" + _PLY_TO_NP[parts[1]]))

    out = {"vertex": None, "face": None}
    offset = 0
    for name, count, props, is_list in elements:
        if is_list:
            # triangle lists only: uchar count (must be 3) + 3 int32
            rec_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            rec = np.frombuffer(body, dtype=rec_dt, count=count, offset=offset)
            offset += rec_dt.itemsize * count
            if count and not np.all(rec["n"] == 3):
                raise St2dgsError(f"non-triangle face list in {path}")
            out[name] = rec["idx"].copy()
        else:
            dt = np.dtype(props)
            out[name] = np.frombuffer(body, dtype=dt, count=count, offset=offset).copy()
            offset += dt.itemsize * count
    return out["vertex"], out["face"]


def _as_le(arr: np.ndarray) -> np.ndarray:
    dt = np.dtype([(n, arr.dtype[n].str.replace(">", "<")) for n in arr.dtype.names])
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def structured_from_columns(columns: dict[str, np.ndarray]) -> np.ndarray:
    """Pack {name: 1-D array} into a structured array (float32 unless integral)."""
    n = len(next(iter(columns.values())))
    dt = []
    for name, col in columns.items():
        col = np.asarray(col)
        kind = "<i4" if col.dtype.kind in "iu" else "<f4"
        dt.append((name, kind))
    out = np.empty(n, dtype=dt)
    for name, col in columns.items():
        out[name] = col
    return out


def write_pfm(path, data: np.ndarray) -> None:
    """Write a 1- or 3-channel float32 PFM (little-endian, bottom-up rows)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise St2dgsError(f"PFM needs HxW or HxWx3 data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale = little endian
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise St2dgsError(f"not a PFM file: {path}")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if magic == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if magic == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    """Write 8-bit PNG; float input in [0,1] is scaled, uint8 passes through."""
    if image.dtype != np.uint8:
        image = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image).save(path)


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1] (HxW for grayscale, HxWx3 for RGB)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_exr(path, data: np.ndarray) -> None:
    """Write float32 EXR via OpenCV when available."""
    cv2 = _import_cv2()
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3:
        data = data[..., ::-1]  # RGB -> BGR for OpenCV
    if not cv2.imwrite(str(path), data):
        raise St2dgsError(f"EXR write failed: {path}")


def read_exr(path) -> np.ndarray:
    cv2 = _import_cv2()
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise St2dgsError(f"EXR read failed: {path}")
    if data.ndim == 3:
        data = data[..., ::-1].copy()
    return np.asarray(data, dtype=np.float32)


def _import_cv2():
    os.environ.setdefault("OPENCV_IO_ENABLE_OPENEXR", "1")
    try:
        import cv2
    except ImportError as e:
        raise St2dgsError("EXR support needs OpenCV; use PFM instead") from e
    return cv2
