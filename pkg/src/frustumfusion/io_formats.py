"""On-disk interchange formats: PFM depth maps, PLY meshes/point clouds and
the binary tensor checkpoint store."""

import json
import os
import re
import struct

import numpy as np

TENSOR_STORE_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


# ---------------------------------------------------------------------------
# PFM (grayscale, little-endian, rows bottom-to-top)
# ---------------------------------------------------------------------------

def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("write_pfm expects (h, w)")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"not a grayscale PFM: {header!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        buf = f.read(w * h * 4)
    dt = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(buf, dtype=dt).reshape(h, w)
    return np.flipud(img).astype(np.float32)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def write_ply_points(path, points):
    """ASCII PLY point cloud: one 'x y z' vertex per point."""
    pts = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0",
             f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z",
             "end_header"]
    body = "\n".join(" ".join(repr(float(v)) for v in p) for p in pts)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        if len(pts):
            f.write(body + "\n")


def read_ply_points(path):
    verts, _ = read_ply(path)
    return verts


def write_ply_mesh(path, vertices, faces):
    """Binary little-endian PLY: float32 vertices, int32 face indices."""
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    header = "\n".join([
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header", ""])
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vertices.tobytes())
        if len(faces):
            rec = np.empty(len(faces),
                           dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            f.write(rec.tobytes())


def read_ply(path):
    """Reads ascii or binary-little-endian PLY with x/y/z vertices and
    optional triangular faces. Returns (vertices (n, 3) float64,
    faces (m, 3) int64)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = None
        n_vert = n_face = 0
        vert_props = []
        current = None
        while True:
            line = f.readline().strip().decode("ascii")
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    n_vert = int(parts[2])
                elif current == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and current == "vertex":
                if parts[1] == "list":
                    raise ValueError("list property on vertices")
                vert_props.append((parts[2], parts[1]))
        if fmt == "ascii":
            verts = np.zeros((n_vert, 3))
            names = [p[0] for p in vert_props]
            for i in range(n_vert):
                vals = f.readline().split()
                row = {nm: float(v) for nm, v in zip(names, vals)}
                verts[i] = (row["x"], row["y"], row["z"])
            faces = np.zeros((n_face, 3), dtype=np.int64)
            for i in range(n_face):
                vals = f.readline().split()
                if int(vals[0]) != 3:
                    raise ValueError("only triangle faces supported")
                faces[i] = [int(v) for v in vals[1:4]]
            return verts, faces
        if fmt != "binary_little_endian":
            raise ValueError(f"unsupported PLY format {fmt}")
        type_map = {"float": "<f4", "float32": "<f4", "double": "<f8",
                    "int": "<i4", "uchar": "u1"}
        rec = np.dtype([(nm, type_map[tp]) for nm, tp in vert_props])
        vbuf = f.read(rec.itemsize * n_vert)
        varr = np.frombuffer(vbuf, dtype=rec)
        verts = np.stack([varr["x"], varr["y"], varr["z"]],
                         axis=1).astype(np.float64)
        faces = np.zeros((n_face, 3), dtype=np.int64)
        if n_face:
            fbuf = f.read((1 + 12) * n_face)
            frec = np.frombuffer(
                fbuf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            if not np.all(frec["n"] == 3):
                raise ValueError("only triangle faces supported")
            faces = frec["idx"].astype(np.int64)
        return verts, faces


# ---------------------------------------------------------------------------
# tensor store (checkpoint payload)
# ---------------------------------------------------------------------------

def _safe_filename(name, index):
    slug = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{index:04d}_{slug}.bin"


def write_tensor_file(path, name, array):
    """Layout: u32 name length, name bytes (utf-8), u8 dtype tag, u32 rank,
    u64 extents, row-major payload; everything little-endian."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        f.write(struct.pack("<I", arr.ndim))
        for ext in arr.shape:
            f.write(struct.pack("<Q", ext))
        if arr.dtype == np.float32:
            f.write(arr.astype("<f4").tobytes())
        else:
            f.write(arr.astype("<f8").tobytes())


def read_tensor_file(path):
    with open(path, "rb") as f:
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode("utf-8")
        (tag,) = struct.unpack("<B", f.read(1))
        (rank,) = struct.unpack("<I", f.read(4))
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        buf = f.read(n * dt.itemsize)
    wire = "<f4" if tag == 0 else "<f8"
    arr = np.frombuffer(buf, dtype=wire).reshape(shape).astype(dt)
    return name, arr


def save_tensor_store(directory, arrays):
    """Write named arrays as one binary file each plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(arrays.items()):
        fname = _safe_filename(name, i)
        write_tensor_file(os.path.join(directory, fname), name, arr)
        entries.append({"name": name, "shape": list(np.shape(arr)),
                        "dtype": str(np.asarray(arr).dtype),
                        "file": fname})
    manifest = {"format_version": TENSOR_STORE_VERSION, "tensors": entries}
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_tensor_store(directory):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest["format_version"] != TENSOR_STORE_VERSION:
        raise ValueError("unknown tensor store version "
                         f"{manifest['format_version']}")
    out = {}
    for entry in manifest["tensors"]:
        name, arr = read_tensor_file(os.path.join(directory, entry["file"]))
        if name != entry["name"] or list(arr.shape) != entry["shape"]:
            raise ValueError(f"manifest mismatch for {entry['file']}")
        out[name] = arr
    return out
