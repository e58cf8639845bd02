"""Triangle meshes, area-uniform surface sampling, and point-cloud files.

Supported inputs are a small OFF subset (header line "OFF", counts line
"V F E", V vertex lines, F face lines "k i1 .. ik", '#' comments) and a small
OBJ subset ("v x y z" and "f a b c ..." with 1-based indices, "a/b/c" suffixes
stripped, other directives ignored). Polygons with more than three sides are
fan-triangulated.

Cloud files come in two flavors:

* ASCII: one "x y z" per line, '.'-decimal, printed with 17 significant
  digits so a round trip through text is lossless.
* Binary: magic "PCF1", point count as u32 little-endian, then N*3 float32
  little-endian values in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, GeometryError, ParseError
from .rng import derive_seed, substream

DEFAULT_SAMPLE_COUNT = 2048
CLOUD_MAGIC = b"PCF1"


@dataclass
class Mesh:
    """Indexed triangle soup: vertices (V,3) float64, triangles (T,3) int64."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and self.triangles.max(initial=-1) >= len(self.vertices):
            raise ContractError("triangle index exceeds vertex count")
        if self.triangles.size and self.triangles.min(initial=0) < 0:
            raise ContractError("negative triangle index")

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class PointCloud:
    """N x 3 coordinates with an optional class label."""

    points: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


# --------------------------------------------------------------------- parse


def _significant_lines(text: str):
    """Yield (1-based line number, content) with comments and blanks removed."""
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            yield number, content


def _parse_face_tokens(tokens, line, vertex_count, strict_range=True):
    if len(tokens) < 1:
        raise ParseError("empty face line", line)
    try:
        k = int(tokens[0])
    except ValueError as exc:
        raise ParseError(f"face vertex count is not an integer: {tokens[0]!r}", line) from exc
    if k < 3:
        raise ParseError(f"face needs at least 3 vertices, got {k}", line)
    if len(tokens) != k + 1:
        raise ParseError(f"face declares {k} vertices but lists {len(tokens) - 1}", line)
    try:
        indices = [int(t) for t in tokens[1:]]
    except ValueError as exc:
        raise ParseError("face index is not an integer", line) from exc
    if strict_range:
        for idx in indices:
            if not 0 <= idx < vertex_count:
                raise ParseError(f"face index {idx} out of range [0, {vertex_count})", line)
    return indices


def _fan(indices) -> list[tuple[int, int, int]]:
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def parse_off(text: str) -> Mesh:
    """Parse OFF text into a Mesh; raises ParseError with a line number."""
    lines = list(_significant_lines(text))
    if not lines:
        raise ParseError("empty file", 1)
    header_line, header = lines[0]
    if header != "OFF":
        raise ParseError(f"missing OFF header, found {header!r}", header_line)
    if len(lines) < 2:
        raise ParseError("missing counts line", header_line)
    counts_line, counts = lines[1]
    tokens = counts.split()
    if len(tokens) != 3:
        raise ParseError(f"counts line must hold 3 integers, got {counts!r}", counts_line)
    try:
        n_vertices, n_faces, _ = (int(t) for t in tokens)
    except ValueError as exc:
        raise ParseError(f"counts line must hold 3 integers, got {counts!r}", counts_line) from exc
    if n_vertices < 0 or n_faces < 0:
        raise ParseError("negative counts", counts_line)

    body = lines[2:]
    if len(body) != n_vertices + n_faces:
        raise ParseError(
            f"expected {n_vertices} vertex and {n_faces} face lines, found {len(body)}",
            body[-1][0] if body else counts_line)

    vertices = []
    for line, content in body[:n_vertices]:
        tokens = content.split()
        if len(tokens) != 3:
            raise ParseError(f"vertex line must hold 3 coordinates, got {len(tokens)}", line)
        try:
            vertices.append([float(t) for t in tokens])
        except ValueError as exc:
            raise ParseError(f"non-numeric vertex coordinate in {content!r}", line) from exc

    triangles = []
    for line, content in body[n_vertices:]:
        indices = _parse_face_tokens(content.split(), line, n_vertices)
        triangles.extend(_fan(indices))

    return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                np.array(triangles, dtype=np.int64).reshape(-1, 3))


def parse_obj(text: str) -> Mesh:
    """Parse OBJ text into a Mesh; raises ParseError with a line number."""
    vertices = []
    faces = []  # (line, 0-based indices), validated after all vertices are read
    for line, content in _significant_lines(text):
        tokens = content.split()
        directive = tokens[0]
        if directive == "v":
            if len(tokens) != 4:
                raise ParseError(f"vertex line must hold 3 coordinates, got {len(tokens) - 1}",
                                 line)
            try:
                vertices.append([float(t) for t in tokens[1:]])
            except ValueError as exc:
                raise ParseError(f"non-numeric vertex coordinate in {content!r}", line) from exc
        elif directive == "f":
            refs = tokens[1:]
            if len(refs) < 3:
                raise ParseError(f"face needs at least 3 vertices, got {len(refs)}", line)
            indices = []
            for ref in refs:
                head = ref.split("/", 1)[0]
                try:
                    idx = int(head)
                except ValueError as exc:
                    raise ParseError(f"face index is not an integer: {ref!r}", line) from exc
                indices.append((line, idx))
            faces.append(indices)
        # every other directive (vn, vt, o, g, s, usemtl, mtllib, ...) is ignored

    triangles = []
    for indices in faces:
        resolved = []
        for line, idx in indices:
            if not 1 <= idx <= len(vertices):
                raise ParseError(f"face index {idx} out of range [1, {len(vertices)}]", line)
            resolved.append(idx - 1)
        triangles.extend(_fan(resolved))

    return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                np.array(triangles, dtype=np.int64).reshape(-1, 3))


# -------------------------------------------------------------------- sample


def sample_surface(mesh: Mesh, n: int = DEFAULT_SAMPLE_COUNT, seed: int = 0) -> PointCloud:
    """Draw `n` area-uniform surface points, deterministically from `seed`.

    A triangle is selected with probability proportional to its area, then a
    point inside it is placed at barycentric weights u = 1 - sqrt(r1),
    v = sqrt(r1) (1 - r2), w = sqrt(r1) r2, the exact square-root scheme for
    uniform simplex sampling. The generator is PCG64(seed); draw order is the
    triangle picks, then r1, then r2.
    """
    n = int(n)
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if not total > 0.0:
        raise GeometryError("mesh has zero total surface area")

    rng = np.random.Generator(np.random.PCG64(seed))
    cumulative = np.cumsum(areas)
    picks = np.searchsorted(cumulative, rng.random(n) * total, side="right")
    picks = np.minimum(picks, len(areas) - 1)
    r1 = rng.random(n)
    r2 = rng.random(n)

    sqrt_r1 = np.sqrt(r1)
    u = 1.0 - sqrt_r1
    v = sqrt_r1 * (1.0 - r2)
    w = sqrt_r1 * r2

    tri = mesh.triangles[picks]
    a = mesh.vertices[tri[:, 0]]
    b = mesh.vertices[tri[:, 1]]
    c = mesh.vertices[tri[:, 2]]
    points = u[:, None] * a + v[:, None] * b + w[:, None] * c
    return PointCloud(points)


def normalize(cloud: PointCloud) -> PointCloud:
    """Center the cloud at its centroid and scale the max point norm to 1."""
    points = cloud.points
    if len(points) < 1:
        raise ContractError("cannot normalize an empty cloud")
    centered = points - points.mean(axis=0)
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius <= 1e-300:
        raise GeometryError("degenerate cloud: all points identical")
    return PointCloud(centered / radius, label=cloud.label)


# ----------------------------------------------------------------------- io


def write_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud file; '.pcf' gets the binary format, anything else ASCII."""
    path = str(path)
    if path.endswith(".pcf"):
        payload = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
        with open(path, "wb") as handle:
            handle.write(CLOUD_MAGIC)
            handle.write(struct.pack("<I", len(cloud.points)))
            handle.write(payload)
    else:
        with open(path, "w", encoding="utf-8") as handle:
            for x, y, z in cloud.points:
                handle.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_cloud(path) -> PointCloud:
    """Read either cloud format, sniffing the binary magic."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if not blob:
        raise FormatError(f"{path}: empty cloud file")

    if blob[:4] == CLOUD_MAGIC:
        if len(blob) < 8:
            raise FormatError(f"{path}: truncated header")
        (count,) = struct.unpack("<I", blob[4:8])
        expected = 8 + 12 * count
        if len(blob) != expected:
            raise FormatError(f"{path}: payload holds {len(blob) - 8} bytes, "
                              f"expected {expected - 8} for {count} points")
        points = np.frombuffer(blob[8:], dtype="<f4").astype(np.float64).reshape(count, 3)
    else:
        try:
            text = blob.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: neither {CLOUD_MAGIC!r} binary nor text") from exc
        rows = []
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 3:
                raise FormatError(f"{path}:{number}: expected 3 coordinates, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise FormatError(f"{path}:{number}: non-numeric token") from exc
        if not rows:
            raise FormatError(f"{path}: no points")
        points = np.array(rows, dtype=np.float64)

    if not np.isfinite(points).all():
        raise FormatError(f"{path}: non-finite coordinates")
    return PointCloud(points)


# ------------------------------------------------------------------ synthetic

SYNTH_CLASSES = ("sphere", "box", "cylinder", "cone")


def _rotate_y(vertices: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = vertices.copy()
    out[:, 0] = c * vertices[:, 0] + s * vertices[:, 2]
    out[:, 2] = -s * vertices[:, 0] + c * vertices[:, 2]
    return out


def _box_mesh(hx, hy, hz) -> Mesh:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                     dtype=np.float64)
    vertices = signs * np.array([hx, hy, hz])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    triangles = [t for quad in quads for t in _fan(quad)]
    return Mesh(vertices, np.array(triangles))


def _sphere_mesh(scales, rings=8, segments=16) -> Mesh:
    vertices = [np.array([0.0, 1.0, 0.0]), np.array([0.0, -1.0, 0.0])]
    for i in range(1, rings):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2.0 * np.pi * j / segments
            vertices.append(np.array([np.sin(theta) * np.cos(phi),
                                      np.cos(theta),
                                      np.sin(theta) * np.sin(phi)]))
    ring = lambda i, j: 2 + (i - 1) * segments + (j % segments)
    triangles = []
    for j in range(segments):
        triangles.append((0, ring(1, j), ring(1, j + 1)))
        triangles.append((1, ring(rings - 1, j + 1), ring(rings - 1, j)))
    for i in range(1, rings - 1):
        for j in range(segments):
            triangles.append((ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)))
            triangles.append((ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)))
    return Mesh(np.array(vertices) * np.asarray(scales), np.array(triangles))


def _cylinder_mesh(radius, height, segments=16) -> Mesh:
    half = height / 2.0
    top = [np.array([radius * np.cos(a), half, radius * np.sin(a)])
           for a in 2.0 * np.pi * np.arange(segments) / segments]
    bottom = [p * np.array([1.0, -1.0, 1.0]) for p in top]
    vertices = top + bottom + [np.array([0.0, half, 0.0]), np.array([0.0, -half, 0.0])]
    n, top_c, bot_c = segments, 2 * segments, 2 * segments + 1
    triangles = []
    for j in range(n):
        k = (j + 1) % n
        triangles.append((top_c, j, k))
        triangles.append((bot_c, n + k, n + j))
        triangles.extend(_fan((j, n + j, n + k, k)))
    return Mesh(np.array(vertices), np.array(triangles))


def _cone_mesh(radius, height, segments=16) -> Mesh:
    base = [np.array([radius * np.cos(a), 0.0, radius * np.sin(a)])
            for a in 2.0 * np.pi * np.arange(segments) / segments]
    vertices = base + [np.array([0.0, 0.0, 0.0]), np.array([0.0, height, 0.0])]
    center, apex = segments, segments + 1
    triangles = []
    for j in range(segments):
        k = (j + 1) % segments
        triangles.append((center, k, j))
        triangles.append((apex, j, k))
    return Mesh(np.array(vertices), np.array(triangles))


def synth_mesh(kind: str, rng: np.random.Generator) -> Mesh:
    """One synthetic shape with randomized proportions and a random y-axis pose."""
    if kind == "sphere":
        mesh = _sphere_mesh(scales=rng.uniform(0.7, 1.0, size=3))
    elif kind == "box":
        mesh = _box_mesh(*rng.uniform(0.35, 1.0, size=3))
    elif kind == "cylinder":
        mesh = _cylinder_mesh(radius=rng.uniform(0.25, 0.7), height=rng.uniform(0.8, 2.0))
    elif kind == "cone":
        mesh = _cone_mesh(radius=rng.uniform(0.4, 1.0), height=rng.uniform(0.8, 2.0))
    else:
        raise ContractError(f"unknown synthetic class {kind!r}, pick from {SYNTH_CLASSES}")
    return Mesh(_rotate_y(mesh.vertices, rng.uniform(0.0, 2.0 * np.pi)), mesh.triangles)


def synth_cloud(kind: str, n: int = DEFAULT_SAMPLE_COUNT, seed: int = 0) -> PointCloud:
    """Sample one normalized synthetic shape; label is the class name."""
    rng = substream(seed, f"synth/{kind}")
    mesh = synth_mesh(kind, rng)
    cloud = sample_surface(mesh, n, seed=derive_seed(seed, f"synth-points/{kind}"))
    normalized = normalize(cloud)
    normalized.label = kind
    return normalized


def synth_dataset(classes, per_class: int, n: int = DEFAULT_SAMPLE_COUNT,
                  seed: int = 0) -> list[PointCloud]:
    """`per_class` normalized clouds for each requested class, reproducibly."""
    clouds = []
    for kind in classes:
        for index in range(per_class):
            clouds.append(synth_cloud(kind, n, seed=derive_seed(seed, f"{kind}/{index}")))
    return clouds
