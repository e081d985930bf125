"""Triangle meshes: parsing, normalization, inertia, surface sampling,
and a procedural object generator.

All lengths are meters.  Meshes are immutable after construction; faces are
triangles with normals recomputed from geometry (file-provided normals are
ignored).  Degenerate faces (area <= 1e-14 m^2) are dropped and counted.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (BadSpec, DegenerateExtent, EmptyMesh, NonPositiveVolume,
                     ParseError)

_AREA_EPS = 1e-14


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray          # (V, 3) float64
    faces: np.ndarray             # (F, 3) int64
    face_normals: np.ndarray      # (F, 3) float64, unit
    name: str = "mesh"
    dropped_faces: int = 0        # degenerate faces removed at construction

    def __post_init__(self):
        for arr in (self.vertices, self.faces, self.face_normals):
            arr.setflags(write=False)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray            # (n, 3) float64, object frame
    normals: np.ndarray           # (n, 3) float64, unit

    @property
    def n(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class SamplingTable:
    """Precomputed per-face arrays for area-weighted surface sampling."""
    cum_area: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    normals: np.ndarray


def _build_mesh(vertices, faces, name):
    """Assemble a Mesh: recompute normals, drop degenerate faces."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if faces.size == 0:
        raise EmptyMesh(f"{name}: no faces")
    v0 = vertices[faces[:, 0]]
    cr = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    areas = 0.5 * np.sqrt(np.sum(cr * cr, axis=1))
    keep = areas > _AREA_EPS
    dropped = int(np.sum(~keep))
    if not np.any(keep):
        raise EmptyMesh(f"{name}: all {len(faces)} faces are degenerate")
    normals = cr[keep] / (2.0 * areas[keep])[:, None]
    return Mesh(vertices=vertices,
                faces=np.ascontiguousarray(faces[keep]),
                face_normals=np.ascontiguousarray(normals),
                name=name,
                dropped_faces=dropped)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_mesh(data, fmt, name="mesh"):
    """Parse ASCII mesh bytes/text in the given format: obj, off, or stl."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not decodable as UTF-8 text: {exc}") from exc
    fmt = fmt.lower().lstrip(".")
    if fmt == "obj":
        return _parse_obj(data, name)
    if fmt == "off":
        return _parse_off(data, name)
    if fmt == "stl":
        return _parse_stl(data, name)
    raise ParseError(f"unknown format {fmt!r} (expected obj, off, or stl)")


def _fan(indices, lineno):
    if len(indices) < 3:
        raise ParseError(f"face with {len(indices)} vertices", lineno)
    return [(indices[0], indices[k], indices[k + 1])
            for k in range(1, len(indices) - 1)]


def _parse_obj(text, name):
    vertices = []
    faces = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError("vertex needs 3 coordinates", lineno)
            try:
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as exc:
                raise ParseError(f"bad vertex coordinate: {exc}", lineno) from exc
        elif tag == "f":
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise ParseError(f"bad face index {tok!r}", lineno) from exc
                if i <= 0:
                    raise ParseError(f"face index {i} (indices are 1-based)", lineno)
                if i > len(vertices):
                    raise ParseError(f"face index {i} out of range", lineno)
                idx.append(i - 1)
            faces.extend(_fan(idx, lineno))
        # vn / vt / usemtl / o / g / s records are ignored
    if not faces:
        raise EmptyMesh(f"{name}: no faces in OBJ input")
    return _build_mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64), name)


def _parse_off(text, name):
    # meaningful lines with their original numbers, comments stripped
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    if not lines:
        raise ParseError("empty OFF input", 1)
    pos = 0
    lineno, header = lines[pos]
    pos += 1
    if header == "OFF":
        if pos >= len(lines):
            raise ParseError("missing counts line", lineno)
        lineno, counts_line = lines[pos]
        pos += 1
    elif header.startswith("OFF"):
        counts_line = header[3:].strip()       # counts on the header line
    else:
        raise ParseError("missing OFF header", lineno)
    counts = counts_line.split()
    if len(counts) < 2:
        raise ParseError("counts line needs vertex and face counts", lineno)
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except ValueError as exc:
        raise ParseError(f"bad counts: {exc}", lineno) from exc
    if pos + nv > len(lines):
        raise ParseError(f"expected {nv} vertex lines", lineno)
    vertices = np.empty((nv, 3), dtype=np.float64)
    for k in range(nv):
        lineno, line = lines[pos]
        pos += 1
        parts = line.split()
        if len(parts) < 3:
            raise ParseError("vertex needs 3 coordinates", lineno)
        try:
            vertices[k] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError as exc:
            raise ParseError(f"bad vertex coordinate: {exc}", lineno) from exc
    faces = []
    for _ in range(nf):
        if pos >= len(lines):
            raise ParseError(f"expected {nf} face lines", lineno)
        lineno, line = lines[pos]
        pos += 1
        parts = line.split()
        try:
            cnt = int(parts[0])
            idx = [int(t) for t in parts[1:1 + cnt]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad face record: {exc}", lineno) from exc
        if len(idx) != cnt:
            raise ParseError(f"face record promises {cnt} indices, has {len(idx)}", lineno)
        for i in idx:
            if i < 0 or i >= nv:
                raise ParseError(f"face index {i} out of range (0-based)", lineno)
        faces.extend(_fan(idx, lineno))
    if not faces:
        raise EmptyMesh(f"{name}: no faces in OFF input")
    return _build_mesh(vertices, np.array(faces, dtype=np.int64), name)


def _parse_stl(text, name):
    vertices = []
    vindex = {}
    faces = []
    tri = []
    in_solid = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.strip().split()
        if not parts:
            continue
        tag = parts[0].lower()
        if tag == "solid":
            in_solid = True
        elif tag == "endsolid":
            in_solid = False
        elif tag == "vertex":
            if not in_solid:
                raise ParseError("vertex outside solid block", lineno)
            if len(parts) < 4:
                raise ParseError("vertex needs 3 coordinates", lineno)
            try:
                p = (float(parts[1]), float(parts[2]), float(parts[3]))
            except ValueError as exc:
                raise ParseError(f"bad vertex coordinate: {exc}", lineno) from exc
            if p not in vindex:
                vindex[p] = len(vertices)
                vertices.append(p)
            tri.append(vindex[p])
        elif tag == "endfacet":
            if len(tri) != 3:
                raise ParseError(f"facet has {len(tri)} vertices, wanted 3", lineno)
            faces.append(tuple(tri))
            tri = []
        # facet/outer/endloop records carry no geometry we keep
    if not faces:
        raise EmptyMesh(f"{name}: no facets in STL input")
    return _build_mesh(np.array(vertices, dtype=np.float64),
                       np.array(faces, dtype=np.int64), name)


def serialize_obj(mesh):
    """OBJ text; coordinates use shortest round-trip repr, so parsing the
    output reproduces the vertex array bit-exactly."""
    out = [f"# {mesh.name}"]
    for v in mesh.vertices:
        out.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in mesh.faces:
        out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    return "\n".join(out) + "\n"


def load_mesh(path):
    path = str(path)
    fmt = path.rsplit(".", 1)[-1]
    with open(path, "rb") as fh:
        data = fh.read()
    stem = path.replace("\\", "/").rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_mesh(data, fmt, name=stem)


def save_obj(path, mesh):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_obj(mesh))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def aabb(mesh):
    return mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)


def normalize_scale(mesh, target_shortest=0.057, longest_cap=0.130):
    """Recenter at the AABB center and scale uniformly so the shortest AABB
    extent equals target_shortest; if that pushes the longest extent past
    longest_cap, scale to the cap instead.  Idempotent up to rounding."""
    lo, hi = aabb(mesh)
    extents = hi - lo
    if np.any(extents <= 1e-9):
        raise DegenerateExtent(f"{mesh.name}: AABB extents {extents}")
    center = 0.5 * (lo + hi)
    s = target_shortest / extents.min()
    if extents.max() * s > longest_cap:
        s = longest_cap / extents.max()
    verts = (mesh.vertices - center) * s
    return Mesh(vertices=np.ascontiguousarray(verts),
                faces=mesh.faces.copy(),
                face_normals=mesh.face_normals.copy(),
                name=mesh.name,
                dropped_faces=mesh.dropped_faces)


def mesh_volume(mesh):
    """Signed enclosed volume by the divergence theorem (sum of signed
    tetrahedra against the origin); exact for closed meshes."""
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def inertia_tensor(mesh, mass):
    """Inertia of the uniform solid bounded by the mesh, about the AABB
    center, via signed-tetrahedron second moments.  Exact for polyhedra."""
    lo, hi = aabb(mesh)
    center = 0.5 * (lo + hi)
    a = mesh.vertices[mesh.faces[:, 0]] - center
    b = mesh.vertices[mesh.faces[:, 1]] - center
    c = mesh.vertices[mesh.faces[:, 2]] - center
    det = np.einsum("ij,ij->i", a, np.cross(b, c))   # 6 * signed tet volume
    vol = float(np.sum(det) / 6.0)
    if vol <= 1e-12:
        raise NonPositiveVolume(f"{mesh.name}: signed volume {vol}")
    # second moments of a tetrahedron with one vertex at the origin:
    #   integral(xi*xj) = det/120 * (2*(ai*aj+bi*bj+ci*cj)
    #                                + ai*bj+aj*bi + bi*cj+bj*ci + ai*cj+aj*ci)
    p = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            term = (2.0 * (a[:, i] * a[:, j] + b[:, i] * b[:, j] + c[:, i] * c[:, j])
                    + a[:, i] * b[:, j] + a[:, j] * b[:, i]
                    + b[:, i] * c[:, j] + b[:, j] * c[:, i]
                    + a[:, i] * c[:, j] + a[:, j] * c[:, i])
            p[i, j] = p[j, i] = np.sum(det * term) / 120.0
    rho = mass / vol
    return rho * (np.trace(p) * np.eye(3) - p)


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def build_sampling_table(mesh):
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    e1 = b - a
    e2 = c - a
    cr = np.cross(e1, e2)
    areas = 0.5 * np.sqrt(np.sum(cr * cr, axis=1))
    return SamplingTable(cum_area=np.cumsum(areas),
                         v0=np.ascontiguousarray(a),
                         e1=np.ascontiguousarray(e1),
                         e2=np.ascontiguousarray(e2),
                         normals=np.ascontiguousarray(mesh.face_normals))


_TABLE_CACHE = {}


def _table_for(mesh):
    key = id(mesh)
    entry = _TABLE_CACHE.get(key)
    if entry is None or entry[0] is not mesh:
        entry = (mesh, build_sampling_table(mesh))
        _TABLE_CACHE[key] = entry
    return entry[1]


def sample_surface(mesh, n, rng):
    """Area-weighted point cloud with face normals.  Consumes exactly three
    uniform draws of size n from rng (face pick, two barycentric), so the
    result is a pure function of the rng stream."""
    if n < 1:
        raise BadSpec(f"cloud size must be >= 1, got {n}")
    table = _table_for(mesh)
    uf = rng.random(n)
    ua = rng.random(n)
    ub = rng.random(n)
    pts, nrm = _kernels.sample_points(table.cum_area, table.v0, table.e1,
                                      table.e2, table.normals, uf, ua, ub)
    return PointCloud(points=pts, normals=nrm)


# ---------------------------------------------------------------------------
# procedural objects
# ---------------------------------------------------------------------------

def _require_positive(spec, keys):
    for k in keys:
        v = spec.get(k)
        if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
            raise BadSpec(f"{spec.get('kind')}: parameter {k!r} must be positive, got {v!r}")


def _grid_counts(subdivision):
    if not isinstance(subdivision, int) or subdivision < 1:
        raise BadSpec(f"subdivision must be an int >= 1, got {subdivision!r}")
    stacks = 4 * (2 ** subdivision)
    return stacks, 2 * stacks


def _box_mesh(ax, ay, az, name):
    hx, hy, hz = 0.5 * ax, 0.5 * ay, 0.5 * az
    verts = np.array([[sx, sy, sz]
                      for sx in (-hx, hx) for sy in (-hy, hy) for sz in (-hz, hz)])
    # index bit layout: 4*x + 2*y + z with 0 = negative side
    quads = [
        (0, 1, 3, 2),   # -x
        (4, 6, 7, 5),   # +x
        (0, 4, 5, 1),   # -y
        (2, 3, 7, 6),   # +y
        (0, 2, 6, 4),   # -z
        (1, 5, 7, 3),   # +z
    ]
    faces = []
    for q in quads:
        faces.extend(_fan(list(q), 0))
    return _build_mesh(verts, np.array(faces, dtype=np.int64), name)


def _signed_pow(v, e):
    return np.sign(v) * np.abs(v) ** e


def _lat_long_mesh(fx, fy, fz, stacks, slices, name):
    """Closed lat-long surface from parametric functions of (eta, omega)."""
    eta = -0.5 * np.pi + np.pi * np.arange(1, stacks) / stacks
    omega = 2.0 * np.pi * np.arange(slices) / slices
    verts = [np.array([fx(-0.5 * np.pi, 0.0), fy(-0.5 * np.pi, 0.0), fz(-0.5 * np.pi, 0.0)])]
    ring_start = []
    for et in eta:
        ring_start.append(len(verts))
        for om in omega:
            verts.append(np.array([fx(et, om), fy(et, om), fz(et, om)]))
    top = len(verts)
    verts.append(np.array([fx(0.5 * np.pi, 0.0), fy(0.5 * np.pi, 0.0), fz(0.5 * np.pi, 0.0)]))
    faces = []
    first = ring_start[0]
    for j in range(slices):
        faces.append((0, first + (j + 1) % slices, first + j))
    for r in range(len(ring_start) - 1):
        lo_s, hi_s = ring_start[r], ring_start[r + 1]
        for j in range(slices):
            jn = (j + 1) % slices
            faces.append((lo_s + j, lo_s + jn, hi_s + jn))
            faces.append((lo_s + j, hi_s + jn, hi_s + j))
    last = ring_start[-1]
    for j in range(slices):
        faces.append((top, last + j, last + (j + 1) % slices))
    return _build_mesh(np.array(verts), np.array(faces, dtype=np.int64), name)


def _ellipsoid_mesh(rx, ry, rz, subdivision, name):
    stacks, slices = _grid_counts(subdivision)
    return _lat_long_mesh(
        lambda et, om: rx * np.cos(et) * np.cos(om),
        lambda et, om: ry * np.cos(et) * np.sin(om),
        lambda et, om: rz * np.sin(et),
        stacks, slices, name)


def _superellipsoid_mesh(rx, ry, rz, e1, e2, subdivision, name):
    stacks, slices = _grid_counts(subdivision)
    return _lat_long_mesh(
        lambda et, om: rx * _signed_pow(np.cos(et), e1) * _signed_pow(np.cos(om), e2),
        lambda et, om: ry * _signed_pow(np.cos(et), e1) * _signed_pow(np.sin(om), e2),
        lambda et, om: rz * _signed_pow(np.sin(et), e1),
        stacks, slices, name)


def _cylinder_mesh(r, h, subdivision, name):
    _, slices = _grid_counts(subdivision)
    omega = 2.0 * np.pi * np.arange(slices) / slices
    ring = np.stack([r * np.cos(omega), r * np.sin(omega)], axis=1)
    verts = [np.array([0.0, 0.0, -0.5 * h])]
    bot = 1
    for xy in ring:
        verts.append(np.array([xy[0], xy[1], -0.5 * h]))
    top_ring = len(verts)
    for xy in ring:
        verts.append(np.array([xy[0], xy[1], 0.5 * h]))
    top_center = len(verts)
    verts.append(np.array([0.0, 0.0, 0.5 * h]))
    faces = []
    for j in range(slices):
        jn = (j + 1) % slices
        faces.append((0, bot + jn, bot + j))
        faces.append((bot + j, bot + jn, top_ring + jn))
        faces.append((bot + j, top_ring + jn, top_ring + j))
        faces.append((top_center, top_ring + j, top_ring + jn))
    return _build_mesh(np.array(verts), np.array(faces, dtype=np.int64), name)


def procedural_object(spec):
    """Build a closed triangulated mesh from a spec dict.

    kinds: box(ax, ay, az); ellipsoid(rx, ry, rz, subdivision);
    cylinder(r, h, subdivision); superellipsoid(rx, ry, rz, e1, e2,
    subdivision).  The mesh name is derived deterministically from the spec.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise BadSpec(f"spec must be a dict with a 'kind', got {spec!r}")
    kind = spec["kind"]
    if kind == "box":
        _require_positive(spec, ("ax", "ay", "az"))
        name = f"box_{spec['ax']:g}x{spec['ay']:g}x{spec['az']:g}"
        return _box_mesh(spec["ax"], spec["ay"], spec["az"], name)
    if kind == "ellipsoid":
        _require_positive(spec, ("rx", "ry", "rz"))
        sub = spec.get("subdivision", 3)
        name = f"ellipsoid_{spec['rx']:g}x{spec['ry']:g}x{spec['rz']:g}_s{sub}"
        return _ellipsoid_mesh(spec["rx"], spec["ry"], spec["rz"], sub, name)
    if kind == "cylinder":
        _require_positive(spec, ("r", "h"))
        sub = spec.get("subdivision", 3)
        name = f"cylinder_{spec['r']:g}x{spec['h']:g}_s{sub}"
        return _cylinder_mesh(spec["r"], spec["h"], sub, name)
    if kind == "superellipsoid":
        _require_positive(spec, ("rx", "ry", "rz", "e1", "e2"))
        sub = spec.get("subdivision", 3)
        name = (f"superellipsoid_{spec['rx']:g}x{spec['ry']:g}x{spec['rz']:g}"
                f"_e{spec['e1']:g}x{spec['e2']:g}_s{sub}")
        return _superellipsoid_mesh(spec["rx"], spec["ry"], spec["rz"],
                                    spec["e1"], spec["e2"], sub, name)
    raise BadSpec(f"unknown kind {kind!r}")
