"""Mesh and sample file formats: Wavefront OBJ, legacy ASCII VTK POLYDATA,
and per-map sample CSVs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, MeshError
from .geometry import TriMesh

SAMPLE_COLUMNS = ("map_id", "x", "y", "z", "time_ms")


def _num(v: float) -> str:
    return repr(float(v))


# -- OBJ -----------------------------------------------------------------------

def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write("v " + " ".join(_num(c) for c in p) + "\n")
        for t in mesh.triangles:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in t)))


def read_obj(path) -> TriMesh:
    """Triangle OBJ reader.  Polygons with more than three corners are fan
    triangulated; texture/normal indices (``f 1/2/3``) are ignored."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) < 2:
                        raise ValueError("vertex needs at least two coordinates")
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    n = len(verts)
                    fixed = []
                    for i in idx:
                        if i == 0:
                            raise ValueError("OBJ indices are 1-based; found 0")
                        fixed.append(i - 1 if i > 0 else n + i)
                    for k in range(1, len(fixed) - 1):
                        faces.append([fixed[0], fixed[k], fixed[k + 1]])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}", entity=("line", lineno)) from None
    if not faces:
        raise MeshError(f"{path}: no faces found")
    width = max(len(v) for v in verts)
    V = np.array([v + [0.0] * (width - len(v)) for v in verts])
    return TriMesh(V, np.array(faces))


# -- VTK -----------------------------------------------------------------------

def write_vtk(path, mesh: TriMesh, point_data: dict | None = None,
              title: str = "fiberfield surface") -> None:
    """Legacy ASCII POLYDATA with scalar ((n,) arrays) and vector ((n, 3))
    point data."""
    n = mesh.n_vertices
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET POLYDATA",
             f"POINTS {n} double"]
    lines += [" ".join(_num(c) for c in p) for p in mesh.vertices]
    m = mesh.n_triangles
    lines.append(f"POLYGONS {m} {4 * m}")
    lines += ["3 {} {} {}".format(*map(int, t)) for t in mesh.triangles]
    if point_data:
        lines.append(f"POINT_DATA {n}")
        for name, arr in point_data.items():
            a = np.asarray(arr, float)
            if " " in name:
                raise InvalidArgument(f"VTK array names cannot contain spaces: {name!r}")
            if a.shape == (n,):
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [_num(v) for v in a]
            elif a.shape == (n, 3):
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(_num(c) for c in row) for row in a]
            else:
                raise InvalidArgument(f"point data {name!r} has shape {a.shape}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path) -> tuple[TriMesh, dict]:
    """Read a legacy ASCII POLYDATA file written by :func:`write_vtk` (or any
    tool emitting triangles as POLYGONS)."""
    text = Path(path).read_text().splitlines()
    if len(text) < 4 or not text[0].startswith("# vtk DataFile"):
        raise MeshError(f"{path}: missing VTK header", entity=("line", 1))
    if text[2].strip().upper() != "ASCII":
        raise MeshError(f"{path}: only ASCII VTK is supported", entity=("line", 3))
    if text[3].split()[:2] != ["DATASET", "POLYDATA"]:
        raise MeshError(f"{path}: expected DATASET POLYDATA", entity=("line", 4))

    toks: list[tuple[str, int]] = []
    for lineno, line in enumerate(text[4:], 5):
        toks += [(t, lineno) for t in line.split()]
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(toks):
            raise MeshError(f"{path}: unexpected end of file", entity=("line", len(text)))
        out = toks[pos:pos + k]
        pos += k
        return out

    def nums(k, conv=float):
        chunk = take(k)
        try:
            return [conv(t) for t, _ in chunk]
        except ValueError:
            bad = next(ln for t, ln in chunk if not _parses(t, conv))
            raise MeshError(f"{path}:{bad}: malformed number", entity=("line", bad)) from None

    verts = tris = None
    data: dict = {}
    n_points = None
    while pos < len(toks):
        (kw, ln), = take(1)
        kw = kw.upper()
        if kw == "POINTS":
            n_points = nums(1, int)[0]
            take(1)
            verts = np.array(nums(3 * n_points)).reshape(n_points, 3)
        elif kw == "POLYGONS":
            m, size = nums(2, int)
            flat = nums(size, int)
            tris, k = [], 0
            for _ in range(m):
                c = flat[k]
                poly = flat[k + 1:k + 1 + c]
                if c < 3:
                    raise MeshError(f"{path}:{ln}: polygon with {c} vertices", entity=("line", ln))
                tris += [[poly[0], poly[j], poly[j + 1]] for j in range(1, c - 1)]
                k += c + 1
            tris = np.array(tris)
        elif kw == "POINT_DATA":
            if nums(1, int)[0] != n_points:
                raise MeshError(f"{path}:{ln}: POINT_DATA count mismatch", entity=("line", ln))
        elif kw == "SCALARS":
            name = take(1)[0][0]
            take(1)  # data type
            ncomp = 1
            if pos < len(toks) and toks[pos][0].upper() != "LOOKUP_TABLE":
                ncomp = nums(1, int)[0]
            if pos < len(toks) and toks[pos][0].upper() == "LOOKUP_TABLE":
                take(2)
            arr = np.array(nums(n_points * ncomp))
            data[name] = arr if ncomp == 1 else arr.reshape(n_points, ncomp)
        elif kw in ("VECTORS", "NORMALS"):
            name = take(1)[0][0]
            take(1)  # data type
            data[name] = np.array(nums(3 * n_points)).reshape(n_points, 3)
        elif kw in ("METADATA", "CELL_DATA", "FIELD", "LINES", "VERTICES"):
            raise MeshError(f"{path}:{ln}: unsupported VTK section {kw}", entity=("line", ln))
        else:
            raise MeshError(f"{path}:{ln}: unexpected token {kw!r}", entity=("line", ln))
    if verts is None or tris is None:
        raise MeshError(f"{path}: POINTS and POLYGONS sections are required")
    return TriMesh(verts, tris), data


def _parses(t, conv):
    try:
        conv(t)
        return True
    except ValueError:
        return False


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    """Load ``.obj`` or legacy ``.vtk``; format inferred from the suffix."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        return read_obj(path)
    if fmt == "vtk":
        return read_vtk(path)[0]
    raise InvalidArgument(f"unknown mesh format {fmt!r}")


def save_mesh(path, mesh: TriMesh, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        write_obj(path, mesh)
    elif fmt == "vtk":
        write_vtk(path, mesh)
    else:
        raise InvalidArgument(f"unknown mesh format {fmt!r}")


# -- samples -------------------------------------------------------------------

def write_samples_csv(path, map_id: int, positions, times_ms) -> None:
    P = np.asarray(positions, float)
    if P.shape[1] == 2:
        P = np.column_stack([P, np.zeros(len(P))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for p, t in zip(P, np.asarray(times_ms, float)):
            w.writerow([map_id, _num(p[0]), _num(p[1]), _num(p[2]), _num(t)])


def read_samples_csv(path) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns ``(map_id, positions (N, 3), times_ms (N,))``."""
    ids, pos, times = set(), [], []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames is None or tuple(r.fieldnames) != SAMPLE_COLUMNS:
            raise InvalidArgument(f"{path}: expected columns {', '.join(SAMPLE_COLUMNS)}")
        for k, row in enumerate(r, 2):
            try:
                ids.add(int(row["map_id"]))
                pos.append([float(row[c]) for c in "xyz"])
                times.append(float(row["time_ms"]))
            except (TypeError, ValueError):
                raise InvalidArgument(f"{path}:{k}: malformed row") from None
    if len(ids) != 1:
        raise InvalidArgument(f"{path}: expected exactly one map_id, found {sorted(ids)}")
    return ids.pop(), np.array(pos).reshape(-1, 3), np.array(times)
