"""Point-cloud ingestion, sampling and grouping.

Random choices use ``numpy.random.default_rng`` (PCG64), seeded explicitly
by the caller. Distance ties in FPS and kNN go to the smallest index.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ParseError

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus")


@dataclass
class PointCloud:
    coords: np.ndarray
    features: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[0] < 1:
            raise ContractError(f"coords must be N x d' with N >= 1, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ContractError("coordinates must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[1] == 0:
                self.features = None
            elif self.features.shape[0] != self.coords.shape[0]:
                raise ContractError("features and coords disagree on point count")

    @property
    def n_points(self):
        return self.coords.shape[0]

    @property
    def n_features(self):
        return 0 if self.features is None else self.features.shape[1]

    def points(self):
        """Coordinates and features side by side, N x (d' + C)."""
        if self.features is None:
            return self.coords
        return np.concatenate([self.coords, self.features], axis=1)


@dataclass
class SampledCentroids:
    indices: np.ndarray
    coords: np.ndarray


@dataclass
class PointGroups:
    groups: np.ndarray            # N_s x k x (d' + C), coordinates relative to centroid
    centroid_coords: np.ndarray   # N_s x d'
    member_indices: np.ndarray = field(default=None)  # N_s x k


# parsing --------------------------------------------------------------------

def _text(stream):
    if isinstance(stream, str):
        return stream
    data = stream.read()
    return data.decode() if isinstance(data, bytes) else data


def parse_xyz(stream, source=None):
    """Whitespace-separated rows of 3 coordinates plus optional features."""
    rows = []
    width = None
    for lineno, raw in enumerate(io.StringIO(_text(stream)), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"non-numeric token in {line!r}", lineno, source) from None
        if len(values) < 3:
            raise ParseError(f"expected at least 3 columns, got {len(values)}", lineno, source)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ParseError(f"ragged row: {len(values)} columns, expected {width}", lineno, source)
        if not all(np.isfinite(values)):
            raise ParseError("non-finite value", lineno, source)
        rows.append(values)
    if not rows:
        raise ParseError("no points found", None, source)
    arr = np.array(rows, dtype=np.float64)
    feats = arr[:, 3:] if width > 3 else None
    return PointCloud(arr[:, :3], feats)


def parse_off(stream, source=None):
    """OFF mesh; only the vertex block is kept.

    Accepts the header on its own line (``OFF`` then counts), on one line
    (``OFF 3 1 0``) or glued (``OFF3 1 0``, as shipped in ModelNet40).
    """
    lines = []
    for lineno, raw in enumerate(io.StringIO(_text(stream)), start=1):
        body = raw.split("#", 1)[0].split()
        if body:
            lines.append((lineno, body))
    if not lines:
        raise ParseError("empty OFF file", 1, source)
    lineno, head = lines[0]
    magic = head[0]
    if not magic.startswith("OFF"):
        raise ParseError(f"missing OFF magic, found {magic!r}", lineno, source)
    counts = ([magic[3:]] if len(magic) > 3 else []) + head[1:]
    pos = 1
    if not counts:
        if len(lines) < 2:
            raise ParseError("missing vertex/face counts", lineno, source)
        lineno, counts = lines[1]
        pos = 2
    if len(counts) != 3:
        raise ParseError(f"expected 3 counts, got {len(counts)}", lineno, source)
    try:
        n_vertices, n_faces, _ = (int(c) for c in counts)
    except ValueError:
        raise ParseError(f"bad counts {counts}", lineno, source) from None
    if n_vertices < 1 or n_faces < 0:
        raise ParseError("OFF declares no vertices", lineno, source)

    body = lines[pos:pos + n_vertices]
    if len(body) < n_vertices:
        last = lines[-1][0]
        raise ParseError(f"declared {n_vertices} vertices, found {len(body)}", last, source)
    coords = np.empty((n_vertices, 3))
    for j, (ln, toks) in enumerate(body):
        if len(toks) != 3:
            raise ParseError(f"vertex line has {len(toks)} values, expected 3", ln, source)
        try:
            coords[j] = [float(t) for t in toks]
        except ValueError:
            raise ParseError(f"non-numeric vertex coordinate in {toks}", ln, source) from None
        if not np.isfinite(coords[j]).all():
            raise ParseError("non-finite vertex coordinate", ln, source)
    remaining = len(lines) - pos - n_vertices
    if remaining < n_faces:
        last = lines[-1][0]
        raise ParseError(f"declared {n_faces} faces, found {remaining}; vertex/face counts do not match the file",
                         last, source)
    return PointCloud(coords)


def load_cloud(path):
    with open(path) as fh:
        text = fh.read()
    if str(path).lower().endswith(".off"):
        return parse_off(text, source=str(path))
    return parse_xyz(text, source=str(path))


def format_xyz(cloud):
    buf = io.StringIO()
    np.savetxt(buf, cloud.points(), fmt="%.17g")
    return buf.getvalue()


# geometry -------------------------------------------------------------------

def normalize_unit_sphere(cloud):
    coords = cloud.coords - cloud.coords.mean(axis=0)
    radius = np.sqrt((coords ** 2).sum(axis=1)).max()
    scale = radius if radius > 0 else 1.0
    return PointCloud(coords / scale, cloud.features, cloud.label)


def _sq_dist(points, center):
    diff = points - center
    return (diff * diff).sum(axis=1)


def fps(cloud, n_s, seed=0, start=None):
    """Greedy farthest point sampling.

    The first index is drawn uniformly from a generator seeded with ``seed``
    unless ``start`` is given.
    """
    coords = cloud.coords
    n = coords.shape[0]
    if not 1 <= n_s <= n:
        raise ContractError(f"fps needs 1 <= n_s <= N, got n_s={n_s}, N={n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(n_s, dtype=np.int64)
    chosen[0] = start
    mind = _sq_dist(coords, coords[start])
    mind[start] = -1.0  # chosen indices are never re-picked, even among duplicates
    for i in range(1, n_s):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, _sq_dist(coords, coords[nxt]), out=mind)
        mind[nxt] = -1.0
    return SampledCentroids(chosen, coords[chosen].copy())


def knn_group(cloud, centroids, k):
    n = cloud.n_points
    if not 1 <= k <= n:
        raise ContractError(f"knn needs 1 <= k <= N, got k={k}, N={n}")
    points = cloud.points()
    members = np.empty((len(centroids.indices), k), dtype=np.int64)
    for i, c in enumerate(centroids.coords):
        d = _sq_dist(cloud.coords, c)
        members[i] = np.argsort(d, kind="stable")[:k]
    groups = points[members].copy()
    groups[..., :3] -= centroids.coords[:, None, :]
    return PointGroups(groups, centroids.coords.copy(), members)


def group_cloud(cloud, n_groups, k, seed=0, normalize=True):
    if normalize:
        cloud = normalize_unit_sphere(cloud)
    cents = fps(cloud, n_groups, seed=seed)
    return knn_group(cloud, cents, k)


# synthetic data -------------------------------------------------------------

def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic(kind, n, noise_sigma=0.0, seed=0):
    """Sample ``n`` points on the surface of a primitive shape.

    sphere: radius 1. cube: side 1 centred at the origin. cylinder: radius
    0.5, height 1, caps included (area weighted). torus: radii 0.7 / 0.25.
    """
    if kind not in SHAPE_KINDS:
        raise ConfigError(f"unknown shape kind {kind!r}; valid kinds: {', '.join(SHAPE_KINDS)}")
    if n < 8:
        raise ContractError(f"gen_synthetic needs n >= 8, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts = _unit_vectors(rng, n)
    elif kind == "cube":
        pts = rng.uniform(-0.5, 0.5, size=(n, 3))
        face_axis = rng.integers(3, size=n)
        side = rng.choice([-0.5, 0.5], size=n)
        pts[np.arange(n), face_axis] = side
    elif kind == "cylinder":
        r, h = 0.5, 1.0
        lateral = 2 * np.pi * r * h
        cap = np.pi * r * r
        on_side = rng.uniform(size=n) < lateral / (lateral + 2 * cap)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(on_side, rng.uniform(-h / 2, h / 2, size=n),
                     rng.choice([-h / 2, h / 2], size=n))
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    else:
        big, small = 0.7, 0.25
        # rejection sampling on the tube angle gives an area-uniform torus
        u = np.empty(0)
        while u.size < n:
            cand = rng.uniform(0, 2 * np.pi, size=2 * n)
            keep = rng.uniform(size=2 * n) < (big + small * np.cos(cand)) / (big + small)
            u = np.concatenate([u, cand[keep]])
        u = u[:n]
        v = rng.uniform(0, 2 * np.pi, size=n)
        ring = big + small * np.cos(u)
        pts = np.stack([ring * np.cos(v), ring * np.sin(v), small * np.sin(u)], axis=1)
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    return PointCloud(pts, label=SHAPE_KINDS.index(kind))


# dataset manifests ----------------------------------------------------------

@dataclass
class DatasetManifest:
    """``path<TAB>label`` lines plus ``# split`` / ``# classes`` header comments."""

    entries: list
    classes: list
    split: str = "train"

    def __post_init__(self):
        for path, label in self.entries:
            if not 0 <= label < len(self.classes):
                raise ConfigError(f"label {label} for {path} outside class table of size {len(self.classes)}")

    def dumps(self):
        lines = [f"# split = {self.split}", f"# classes = {','.join(self.classes)}"]
        lines += [f"{p}\t{lab}" for p, lab in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text, source=None):
        split, classes, entries = "train", None, []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                key, value = key.strip(), value.strip()
                if key == "split":
                    split = value
                elif key == "classes":
                    classes = [c for c in value.split(",") if c]
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected 'path<TAB>label'", lineno, source)
            try:
                label = int(parts[1])
            except ValueError:
                raise ParseError(f"bad label {parts[1]!r}", lineno, source) from None
            entries.append((parts[0], label))
        if classes is None:
            n = max((lab for _, lab in entries), default=-1) + 1
            classes = [str(i) for i in range(n)]
        return cls(entries, classes, split)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read(), source=str(path))

    def resolve(self, root):
        """Absolute paths for the entries; every file must exist."""
        out = []
        for p, lab in self.entries:
            full = p if os.path.isabs(p) else os.path.join(root, p)
            if not os.path.exists(full):
                raise FormatError(f"manifest entry not found: {full}")
            out.append((full, lab))
        return out
