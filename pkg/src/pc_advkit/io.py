"""ASCII cloud and mesh file formats: XYZ, PLY, OFF.

All floats are written with 9 significant digits.  Parsers raise
ParseError carrying the offending 1-based line number.
"""

from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .geometry import PointCloud

_F = ".9g"


def _fmt(values):
    return " ".join(format(v, _F) for v in values)


def write_xyz(path, cloud):
    """One point per line: x y z, plus nx ny nz when normals are present."""
    lines = []
    if cloud.normals is not None:
        for p, u in zip(cloud.points, cloud.normals):
            lines.append(_fmt(p) + " " + _fmt(u))
    else:
        for p in cloud.points:
            lines.append(_fmt(p))
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path):
    """Read an XYZ cloud; 6-column rows carry normals."""
    pts, normals = [], []
    width = None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 6):
            raise ParseError(f"{path}: expected 3 or 6 columns, got {len(parts)}", lineno)
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise ParseError(f"{path}: inconsistent column count", lineno)
        try:
            values = [float(v) for v in parts]
        except ValueError:
            raise ParseError(f"{path}: non-numeric value", lineno) from None
        pts.append(values[:3])
        if width == 6:
            normals.append(values[3:])
    if not pts:
        raise ParseError(f"{path}: no points found", line=None)
    return PointCloud(np.array(pts), np.array(normals) if normals else None)


def write_ply(path, cloud):
    """ASCII PLY with x y z properties, plus nx ny nz when normals exist."""
    has_normals = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {cloud.n}"]
    header += [f"property float {a}" for a in ("x", "y", "z")]
    if has_normals:
        header += [f"property float {a}" for a in ("nx", "ny", "nz")]
    header.append("end_header")
    lines = header
    if has_normals:
        for p, u in zip(cloud.points, cloud.normals):
            lines.append(_fmt(p) + " " + _fmt(u))
    else:
        for p in cloud.points:
            lines.append(_fmt(p))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Read an ASCII PLY vertex cloud written by this toolkit or similar."""
    try:
        raw = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    if not raw or raw[0].strip() != "ply":
        raise ParseError(f"{path}: missing ply magic", 1)
    n_vertex = None
    props = []
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(raw[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError(f"{path}: only ascii PLY is supported", lineno)
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}: bad vertex count", lineno) from None
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = lineno + 1
            break
    if n_vertex is None or body_start is None:
        raise ParseError(f"{path}: incomplete header", len(raw))
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise ParseError(f"{path}: vertex element lacks property {axis}", body_start - 1)
    has_normals = all(a in props for a in ("nx", "ny", "nz"))
    rows = []
    for lineno in range(body_start, body_start + n_vertex):
        if lineno - 1 >= len(raw):
            raise ParseError(f"{path}: expected {n_vertex} vertex rows", len(raw))
        parts = raw[lineno - 1].split()
        if len(parts) < len(props):
            raise ParseError(f"{path}: short vertex row", lineno)
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(f"{path}: non-numeric vertex value", lineno) from None
    data = np.array(rows)
    cols = {name: i for i, name in enumerate(props)}
    pts = data[:, [cols["x"], cols["y"], cols["z"]]]
    normals = data[:, [cols["nx"], cols["ny"], cols["nz"]]] if has_normals else None
    return PointCloud(pts, normals)


def read_off(path):
    """Parse an OFF mesh into (vertices (v,3) float64, faces (f,3) int64).

    Polygon faces are fan-triangulated.  Accepts the headerless variant
    where the counts share the first line with the OFF tag.
    """
    try:
        raw = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    # (lineno, content) with comments and blanks stripped
    lines = []
    for lineno, line in enumerate(raw, start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body))
    if not lines:
        raise ParseError(f"{path}: empty file", 1)
    lineno, first = lines[0]
    if not first.startswith("OFF"):
        raise ParseError(f"{path}: missing OFF magic", lineno)
    rest = first[3:].strip()
    cursor = 1
    if rest:
        counts_line, counts_no = rest, lineno
    else:
        if len(lines) < 2:
            raise ParseError(f"{path}: missing element counts", lineno)
        counts_no, counts_line = lines[1]
        cursor = 2
    parts = counts_line.split()
    if len(parts) < 2:
        raise ParseError(f"{path}: expected vertex and face counts", counts_no)
    try:
        n_vert, n_face = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"{path}: non-integer element counts", counts_no) from None
    if n_vert < 3 or n_face < 1:
        raise ParseError(f"{path}: need at least 3 vertices and 1 face", counts_no)
    if len(lines) < cursor + n_vert + n_face:
        raise ParseError(f"{path}: truncated file", lines[-1][0])
    vertices = np.empty((n_vert, 3))
    for i in range(n_vert):
        lineno, body = lines[cursor + i]
        parts = body.split()
        if len(parts) < 3:
            raise ParseError(f"{path}: vertex needs 3 coordinates", lineno)
        try:
            vertices[i] = [float(v) for v in parts[:3]]
        except ValueError:
            raise ParseError(f"{path}: non-numeric vertex", lineno) from None
    faces = []
    for i in range(n_face):
        lineno, body = lines[cursor + n_vert + i]
        parts = body.split()
        try:
            k = int(parts[0])
            idx = [int(v) for v in parts[1 : 1 + k]]
        except (ValueError, IndexError):
            raise ParseError(f"{path}: malformed face row", lineno) from None
        if k < 3 or len(idx) != k:
            raise ParseError(f"{path}: face needs >= 3 vertex indices", lineno)
        for v in idx:
            if not 0 <= v < n_vert:
                raise ParseError(f"{path}: vertex index {v} out of range", lineno)
        for t in range(1, k - 1):  # fan triangulation
            faces.append((idx[0], idx[t], idx[t + 1]))
    return vertices, np.array(faces, dtype=np.int64)


def sample_mesh_surface(vertices, faces, n_points, rng, return_face_idx=False):
    """Uniform area-weighted surface sampling with barycentric coordinates."""
    if n_points < 1:
        raise InvalidInputError("n_points must be >= 1")
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    cross = np.cross(b - a, c - a)
    areas = 0.5 * np.sqrt((cross * cross).sum(axis=1))
    total = areas.sum()
    if total <= 0.0:
        raise InvalidInputError("mesh has zero surface area")
    cum = np.cumsum(areas)
    pick = np.searchsorted(cum, rng.uniform(0.0, total, size=n_points), side="right")
    pick = np.minimum(pick, len(areas) - 1)
    r1 = np.sqrt(rng.uniform(0.0, 1.0, size=n_points))[:, None]
    r2 = rng.uniform(0.0, 1.0, size=n_points)[:, None]
    pts = (1.0 - r1) * a[pick] + r1 * (1.0 - r2) * b[pick] + r1 * r2 * c[pick]
    if return_face_idx:
        return pts, pick
    return pts
