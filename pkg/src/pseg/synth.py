"""Procedural machined work-pieces sampled from their analytic surfaces.

Geometry conventions
--------------------
square_block: x in [-L/2, L/2], y in [-W/2, W/2], z in [0, H].
round_disc:   x^2 + y^2 <= R^2, z in [0, H].

Features sit on the top face (z = H):

* hole    -- through-bore cylinder wall, ``center``, ``radius``
* pocket  -- rectangular recess (4 walls + floor), ``center``, ``size`` (a, b), ``depth``
* chamfer -- 45 degree planar bevel of width ``width`` along a top edge
* fillet  -- quarter-cylinder round-over of radius ``width`` along a top edge

Edges of a block are named ``+x``, ``-x``, ``+y``, ``-y``; a disc has the single
edge ``rim``.  Two treated block edges must be opposite (adjacent treatments
would meet at a mitred corner, which is not modelled).

Normals point out of the solid material, so bore and pocket-wall normals
point into the cavity.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SpecError
from .geom import CAD_CLASSES, CHAMFER, FILLET, HOLE, PLANE, POCKET, LabeledPointCloud, PointCloud, random_subsample
from .seeding import derive_seed

FEATURE_KINDS = ("hole", "pocket", "chamfer", "fillet")
BASE_SHAPES = ("square_block", "round_disc")
BLOCK_EDGES = {"+x": (np.array([1.0, 0.0]), np.array([0.0, 1.0])),
               "-x": (np.array([-1.0, 0.0]), np.array([0.0, 1.0])),
               "+y": (np.array([0.0, 1.0]), np.array([1.0, 0.0])),
               "-y": (np.array([0.0, -1.0]), np.array([1.0, 0.0]))}
_OPPOSITE = {"+x": "-x", "-x": "+x", "+y": "-y", "-y": "+y"}
_EPS = 1e-9


@dataclass
class FeatureSpec:
    kind: str
    center: tuple = (0.0, 0.0)
    radius: float = 0.0
    size: tuple = (0.0, 0.0)
    depth: float = 0.0
    edge: str = ""
    width: float = 0.0

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown feature fields {sorted(unknown)}")
        f = cls(**d)
        f.center = tuple(float(v) for v in f.center)
        f.size = tuple(float(v) for v in f.size)
        return f

    def to_dict(self):
        keep = {"hole": ("kind", "center", "radius"),
                "pocket": ("kind", "center", "size", "depth"),
                "chamfer": ("kind", "edge", "width"),
                "fillet": ("kind", "edge", "width")}[self.kind]
        d = asdict(self)
        return {k: (list(d[k]) if isinstance(d[k], tuple) else d[k]) for k in keep}


@dataclass
class WorkpieceSpec:
    base_shape: str = "square_block"
    length: float = 2.0
    width: float = 2.0
    height: float = 0.6
    radius: float = 1.0
    features: list = field(default_factory=list)
    points_per_cloud: int = 5000
    noise_sigma: float = 0.0
    id: str = ""

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown work-piece fields {sorted(unknown)}")
        d["features"] = [f if isinstance(f, FeatureSpec) else FeatureSpec.from_dict(f) for f in d.get("features", [])]
        return cls(**d)

    def to_dict(self):
        d = {"id": self.id, "base_shape": self.base_shape}
        if self.base_shape == "square_block":
            d.update(length=self.length, width=self.width)
        else:
            d.update(radius=self.radius)
        d.update(height=self.height, features=[f.to_dict() for f in self.features],
                 points_per_cloud=self.points_per_cloud, noise_sigma=self.noise_sigma)
        return d


def load_specs(path):
    with open(path) as fh:
        doc = json.load(fh)
    records = doc["workpieces"] if isinstance(doc, dict) else doc
    return [WorkpieceSpec.from_dict(r) for r in records]


def dump_specs(specs, path):
    with open(path, "w") as fh:
        json.dump({"workpieces": [s.to_dict() for s in specs]}, fh, indent=2)
        fh.write("\n")


# ----------------------------------------------------------------------------- patches


@dataclass
class Patch:
    """One analytic surface piece: area, label and a uniform sampler."""

    label: int
    area: float
    sample: object  # (rng, count) -> (xyz, normals)
    name: str = ""


def _rejection(rng, count, lo, hi, keep):
    """Uniform samples in the 2-D box [lo, hi] accepted by ``keep``."""
    out = np.empty((0, 2))
    while len(out) < count:
        need = count - len(out)
        cand = rng.uniform(lo, hi, size=(max(16, 2 * need), 2))
        out = np.vstack([out, cand[keep(cand)]])
    return out[:count]


def _hole_mask(uv, holes):
    inside = np.zeros(len(uv), bool)
    for h in holes:
        inside |= (uv[:, 0] - h.center[0]) ** 2 + (uv[:, 1] - h.center[1]) ** 2 < h.radius**2
    return inside


def _pocket_mask(uv, pockets):
    inside = np.zeros(len(uv), bool)
    for p in pockets:
        inside |= (np.abs(uv[:, 0] - p.center[0]) < p.size[0] / 2) & (np.abs(uv[:, 1] - p.center[1]) < p.size[1] / 2)
    return inside


def _flat_patch(label, area, z, normal_z, lo, hi, keep, name):
    def sample(rng, count):
        uv = _rejection(rng, count, lo, hi, keep)
        xyz = np.column_stack([uv, np.full(count, z)])
        nrm = np.tile([0.0, 0.0, normal_z], (count, 1))
        return xyz, nrm
    return Patch(label, area, sample, name)


def _hole_patches(holes, height):
    out = []
    for h in holes:
        cx, cy = h.center
        r = h.radius

        def sample(rng, count, cx=cx, cy=cy, r=r):
            phi = rng.uniform(0, 2 * np.pi, count)
            z = rng.uniform(0, height, count)
            c, s = np.cos(phi), np.sin(phi)
            xyz = np.column_stack([cx + r * c, cy + r * s, z])
            return xyz, np.column_stack([-c, -s, np.zeros(count)])
        out.append(Patch(HOLE, 2 * np.pi * r * height, sample, "hole_wall"))
    return out


def _pocket_patches(pockets, height):
    out = []
    for p in pockets:
        cx, cy = p.center
        a, b = p.size
        zf = height - p.depth
        lo, hi = np.array([cx - a / 2, cy - b / 2]), np.array([cx + a / 2, cy + b / 2])
        out.append(_flat_patch(POCKET, a * b, zf, 1.0, lo, hi, lambda uv: np.ones(len(uv), bool), "pocket_floor"))
        # walls: (fixed axis, offset sign, span length)
        for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1)):
            span = b if axis == 0 else a
            half = (a if axis == 0 else b) / 2

            def sample(rng, count, axis=axis, sign=sign, span=span, half=half, cx=cx, cy=cy, zf=zf):
                t = rng.uniform(-span / 2, span / 2, count)
                z = rng.uniform(zf, height, count)
                xyz = np.empty((count, 3))
                nrm = np.zeros((count, 3))
                xyz[:, axis] = (cx, cy)[axis] + sign * half
                xyz[:, 1 - axis] = (cx, cy)[1 - axis] + t
                xyz[:, 2] = z
                nrm[:, axis] = -sign
                return xyz, nrm
            out.append(Patch(POCKET, span * p.depth, sample, "pocket_wall"))
    return out


def _corner_cut_area(kind, t):
    return t * t / 2 if kind == "chamfer" else t * t * (1 - np.pi / 4)


def _block_patches(spec, holes, pockets, edges):
    L, W, H = spec.length, spec.width, spec.height
    half = {"+x": L / 2, "-x": L / 2, "+y": W / 2, "-y": W / 2}
    span = {"+x": W, "-x": W, "+y": L, "-y": L}
    s = {e: (edges[e].width if e in edges else 0.0) for e in BLOCK_EDGES}
    patches = []

    x0, x1 = -L / 2 + s["-x"], L / 2 - s["+x"]
    y0, y1 = -W / 2 + s["-y"], W / 2 - s["+y"]
    top_area = (x1 - x0) * (y1 - y0) - sum(np.pi * h.radius**2 for h in holes) - sum(p.size[0] * p.size[1] for p in pockets)
    patches.append(_flat_patch(PLANE, top_area, H, 1.0, np.array([x0, y0]), np.array([x1, y1]),
                               lambda uv: ~(_hole_mask(uv, holes) | _pocket_mask(uv, pockets)), "top"))
    bottom_area = L * W - sum(np.pi * h.radius**2 for h in holes)
    patches.append(_flat_patch(PLANE, bottom_area, 0.0, -1.0, np.array([-L / 2, -W / 2]), np.array([L / 2, W / 2]),
                               lambda uv: ~_hole_mask(uv, holes), "bottom"))

    for name, (e, a) in BLOCK_EDGES.items():
        E, U, own = half[name], span[name], s[name]
        # the face's two ends along ``a`` meet the edges in directions +a and -a
        ends = []
        for sign in (1, -1):
            adj = [k for k, (e2, _) in BLOCK_EDGES.items() if np.allclose(e2, sign * a)][0]
            if adj in edges:
                ends.append((sign, edges[adj].kind, edges[adj].width))
        area = U * (H - own) - sum(_corner_cut_area(kind, t) for _, kind, t in ends)

        def keep(uz, ends=ends, U=U, H=H):
            ok = np.ones(len(uz), bool)
            for sign, kind, t in ends:
                u = sign * uz[:, 0] - (U / 2 - t)  # distance past the start of the cut
                v = uz[:, 1] - (H - t)
                if kind == "chamfer":
                    ok &= ~(u + v > t)
                else:
                    ok &= ~((u > 0) & (v > 0) & (u * u + v * v > t * t))
            return ok

        def sample(rng, count, e=e, a=a, E=E, U=U, own=own, keep=keep):
            uz = _rejection(rng, count, np.array([-U / 2, 0.0]), np.array([U / 2, H - own]), keep)
            xy = E * e + uz[:, :1] * a
            xyz = np.column_stack([xy, uz[:, 1]])
            nrm = np.tile([e[0], e[1], 0.0], (count, 1))
            return xyz, nrm
        patches.append(Patch(PLANE, area, sample, f"side{name}"))

        if name in edges:
            f = edges[name]
            t = f.width
            if f.kind == "chamfer":
                def sample(rng, count, e=e, a=a, E=E, U=U, t=t):
                    w = rng.uniform(0, t, count)
                    u = rng.uniform(-U / 2, U / 2, count)
                    xy = (E - t + w)[:, None] * e + u[:, None] * a
                    xyz = np.column_stack([xy, H - w])
                    nrm = np.tile(np.array([e[0], e[1], 1.0]) / np.sqrt(2), (count, 1))
                    return xyz, nrm
                patches.append(Patch(CHAMFER, t * np.sqrt(2) * U, sample, f"chamfer{name}"))
            else:
                def sample(rng, count, e=e, a=a, E=E, U=U, t=t):
                    th = rng.uniform(0, np.pi / 2, count)
                    u = rng.uniform(-U / 2, U / 2, count)
                    st, ct = np.sin(th), np.cos(th)
                    xy = (E - t + t * st)[:, None] * e + u[:, None] * a
                    xyz = np.column_stack([xy, H - t + t * ct])
                    nrm = np.column_stack([st * e[0], st * e[1], ct])
                    return xyz, nrm
                patches.append(Patch(FILLET, t * np.pi / 2 * U, sample, f"fillet{name}"))
    return patches


def _disc_patches(spec, holes, pockets, edges):
    R, H = spec.radius, spec.height
    rim = edges.get("rim")
    s = rim.width if rim is not None else 0.0
    Rt = R - s
    patches = []
    top_area = np.pi * Rt**2 - sum(np.pi * h.radius**2 for h in holes) - sum(p.size[0] * p.size[1] for p in pockets)
    patches.append(_flat_patch(
        PLANE, top_area, H, 1.0, np.array([-Rt, -Rt]), np.array([Rt, Rt]),
        lambda uv: ((uv**2).sum(1) < Rt**2) & ~(_hole_mask(uv, holes) | _pocket_mask(uv, pockets)), "top"))
    patches.append(_flat_patch(
        PLANE, np.pi * R**2 - sum(np.pi * h.radius**2 for h in holes), 0.0, -1.0, np.array([-R, -R]), np.array([R, R]),
        lambda uv: ((uv**2).sum(1) < R**2) & ~_hole_mask(uv, holes), "bottom"))

    def side(rng, count):
        phi = rng.uniform(0, 2 * np.pi, count)
        z = rng.uniform(0, H - s, count)
        c, sn = np.cos(phi), np.sin(phi)
        return np.column_stack([R * c, R * sn, z]), np.column_stack([c, sn, np.zeros(count)])
    patches.append(Patch(PLANE, 2 * np.pi * R * (H - s), side, "side"))

    if rim is not None and rim.kind == "chamfer":
        def cone(rng, count):
            # radius density proportional to rho
            rho = np.sqrt(Rt**2 + rng.uniform(0, 1, count) * (R**2 - Rt**2))
            phi = rng.uniform(0, 2 * np.pi, count)
            c, sn = np.cos(phi), np.sin(phi)
            z = H - (rho - Rt)
            nrm = np.column_stack([c, sn, np.ones(count)]) / np.sqrt(2)
            return np.column_stack([rho * c, rho * sn, z]), nrm
        patches.append(Patch(CHAMFER, np.sqrt(2) * np.pi * (R**2 - Rt**2), cone, "chamfer_rim"))
    elif rim is not None:
        def torus(rng, count):
            th = np.empty(0)
            while len(th) < count:
                cand = rng.uniform(0, np.pi / 2, 2 * (count - len(th)) + 8)
                acc = rng.uniform(0, R, len(cand)) < Rt + s * np.sin(cand)
                th = np.concatenate([th, cand[acc]])
            th = th[:count]
            phi = rng.uniform(0, 2 * np.pi, count)
            st, ct = np.sin(th), np.cos(th)
            rho = Rt + s * st
            c, sn = np.cos(phi), np.sin(phi)
            xyz = np.column_stack([rho * c, rho * sn, H - s + s * ct])
            return xyz, np.column_stack([st * c, st * sn, ct])
        patches.append(Patch(FILLET, 2 * np.pi * s * (Rt * np.pi / 2 + s), torus, "fillet_rim"))
    return patches


def validate_spec(spec):
    """Raise SpecError unless features fit on the top face without overlapping."""
    if spec.base_shape not in BASE_SHAPES:
        raise SpecError(f"unknown base shape {spec.base_shape!r}")
    if spec.points_per_cloud < 64:
        raise SpecError("points_per_cloud must be at least 64")
    if spec.noise_sigma < 0:
        raise SpecError("noise_sigma must be non-negative")
    H = spec.height
    if H <= 0 or (spec.base_shape == "square_block" and min(spec.length, spec.width) <= 0) or \
            (spec.base_shape == "round_disc" and spec.radius <= 0):
        raise SpecError("base dimensions must be positive")
    holes, pockets, edges = [], [], {}
    for f in spec.features:
        if f.kind not in FEATURE_KINDS:
            raise SpecError(f"unknown feature kind {f.kind!r}")
        if f.kind == "hole":
            if f.radius <= 0:
                raise SpecError("hole radius must be positive")
            holes.append(f)
        elif f.kind == "pocket":
            if min(f.size) <= 0 or not 0 < f.depth < H:
                raise SpecError("pocket needs positive size and 0 < depth < height")
            pockets.append(f)
        else:
            valid = ("rim",) if spec.base_shape == "round_disc" else tuple(BLOCK_EDGES)
            if f.edge not in valid:
                raise SpecError(f"edge {f.edge!r} invalid for {spec.base_shape}; expected one of {valid}")
            if not 0 < f.width < H:
                raise SpecError(f"{f.kind} width must satisfy 0 < width < height")
            if f.edge in edges:
                raise SpecError(f"features overlap: edge {f.edge} treated twice")
            edges[f.edge] = f
    if spec.base_shape == "square_block":
        treated = set(edges)
        for e in treated:
            if any(o in treated for o in BLOCK_EDGES if o not in (e, _OPPOSITE[e])):
                raise SpecError(f"features overlap: adjacent edges {sorted(treated)} are both treated")
        s = {e: (edges[e].width if e in edges else 0.0) for e in BLOCK_EDGES}
        x0, x1 = -spec.length / 2 + s["-x"], spec.length / 2 - s["+x"]
        y0, y1 = -spec.width / 2 + s["-y"], spec.width / 2 - s["+y"]
        if x0 >= x1 or y0 >= y1:
            raise SpecError("edge treatments consume the whole top face")

        def inside_box(bx0, bx1, by0, by1):
            return bx0 > x0 + _EPS and bx1 < x1 - _EPS and by0 > y0 + _EPS and by1 < y1 - _EPS
    else:
        rt = spec.radius - (edges["rim"].width if "rim" in edges else 0.0)
        if rt <= 0:
            raise SpecError("rim treatment consumes the whole top face")

        def inside_box(bx0, bx1, by0, by1):
            corners = [(bx0, by0), (bx0, by1), (bx1, by0), (bx1, by1)]
            return all(math.hypot(*c) < rt - _EPS for c in corners)
    for h in holes:
        cx, cy = h.center
        r = h.radius
        ok = (math.hypot(cx, cy) + r < rt - _EPS) if spec.base_shape == "round_disc" else \
            inside_box(cx - r, cx + r, cy - r, cy + r)
        if not ok:
            raise SpecError(f"hole at {h.center} does not fit on the top face")
    for p in pockets:
        cx, cy = p.center
        a, b = p.size
        if not inside_box(cx - a / 2, cx + a / 2, cy - b / 2, cy + b / 2):
            raise SpecError(f"pocket at {p.center} does not fit on the top face")
    # pairwise footprint overlap
    for i, h in enumerate(holes):
        for h2 in holes[i + 1:]:
            if math.dist(h.center, h2.center) <= h.radius + h2.radius + _EPS:
                raise SpecError("features overlap: two holes intersect")
        for p in pockets:
            dx = max(abs(h.center[0] - p.center[0]) - p.size[0] / 2, 0.0)
            dy = max(abs(h.center[1] - p.center[1]) - p.size[1] / 2, 0.0)
            if math.hypot(dx, dy) <= h.radius + _EPS:
                raise SpecError("features overlap: hole intersects pocket")
    for i, p in enumerate(pockets):
        for p2 in pockets[i + 1:]:
            if abs(p.center[0] - p2.center[0]) <= (p.size[0] + p2.size[0]) / 2 + _EPS and \
                    abs(p.center[1] - p2.center[1]) <= (p.size[1] + p2.size[1]) / 2 + _EPS:
                raise SpecError("features overlap: two pockets intersect")
    return holes, pockets, edges


def surface_patches(spec):
    holes, pockets, edges = validate_spec(spec)
    build = _block_patches if spec.base_shape == "square_block" else _disc_patches
    patches = build(spec, holes, pockets, edges)
    patches += _hole_patches(holes, spec.height)
    patches += _pocket_patches(pockets, spec.height)
    return patches


def surface_area_by_label(spec):
    areas = np.zeros(len(CAD_CLASSES))
    for p in surface_patches(spec):
        areas[p.label] += p.area
    return areas


def generate_workpiece(spec, rng_seed):
    """Sample ``spec.points_per_cloud`` points uniformly by area over the work-piece surface."""
    patches = surface_patches(spec)
    rng = np.random.default_rng(rng_seed)
    areas = np.array([p.area for p in patches])
    n = spec.points_per_cloud
    choice = rng.choice(len(patches), size=n, p=areas / areas.sum())
    xyz = np.empty((n, 3))
    nrm = np.empty((n, 3))
    labels = np.empty(n, np.int64)
    for k, patch in enumerate(patches):
        idx = np.flatnonzero(choice == k)
        if len(idx):
            xyz[idx], nrm[idx] = patch.sample(rng, len(idx))
            labels[idx] = patch.label
    if spec.noise_sigma > 0:
        xyz = xyz + rng.normal(0.0, spec.noise_sigma, size=xyz.shape)
    return LabeledPointCloud(PointCloud(xyz, nrm), labels, CAD_CLASSES, spec.id,
                             {"spec_id": spec.id, "seed": int(rng_seed)})


def generate_corpus(specs, clouds_per_spec, rng_seed, subsample=None):
    """``clouds_per_spec`` independent draws per spec; optional random subsample per cloud."""
    if not specs or clouds_per_spec < 1:
        raise SpecError("need at least one spec and one cloud per spec")
    corpus = []
    for si, spec in enumerate(specs):
        for j in range(clouds_per_spec):
            seed = derive_seed(rng_seed, "workpiece", si, j)
            lc = generate_workpiece(spec, seed)
            if subsample:
                lc = random_subsample(lc, subsample, derive_seed(seed, "subsample"))
                lc.meta = {"spec_id": spec.id, "seed": int(seed)}
            lc.name = f"{spec.id or f'spec{si:03d}'}_{j:03d}"
            corpus.append(lc)
    return corpus


# ------------------------------------------------------------------ random specs


def random_spec(rng, index=0, points_per_cloud=5000, noise_sigma=0.0):
    """A plausible work-piece with a random mix of the four feature kinds."""
    for _ in range(200):
        features = []
        if rng.random() < 0.5:
            base = "square_block"
            L, W = rng.uniform(1.6, 2.4), rng.uniform(1.6, 2.4)
            H = rng.uniform(0.5, 0.8)
            axis = "x" if rng.random() < 0.5 else "y"
            for sgn in "+-":
                kind = rng.choice(["chamfer", "fillet", None], p=[0.4, 0.4, 0.2])
                if kind is not None:
                    features.append(FeatureSpec(str(kind), edge=sgn + axis, width=float(rng.uniform(0.15, 0.3))))
            spec = WorkpieceSpec(base, length=L, width=W, height=H)
            lim = np.array([L / 2, W / 2])
        else:
            base = "round_disc"
            R, H = rng.uniform(0.9, 1.3), rng.uniform(0.5, 0.8)
            kind = rng.choice(["chamfer", "fillet", None], p=[0.4, 0.4, 0.2])
            if kind is not None:
                features.append(FeatureSpec(str(kind), edge="rim", width=float(rng.uniform(0.15, 0.3))))
            spec = WorkpieceSpec(base, radius=R, height=H)
            lim = np.array([R, R]) / np.sqrt(2)
        n_holes = rng.integers(0, 3)
        n_pockets = rng.integers(0, 2) if n_holes else 1
        for _ in range(n_holes):
            features.append(FeatureSpec("hole", center=tuple(rng.uniform(-0.6, 0.6, 2) * lim),
                                        radius=float(rng.uniform(0.12, 0.25))))
        for _ in range(n_pockets):
            a, b = rng.uniform(0.35, 0.7, 2)
            features.append(FeatureSpec("pocket", center=tuple(rng.uniform(-0.45, 0.45, 2) * lim), size=(a, b),
                                        depth=float(rng.uniform(0.2, 0.6) * H)))
        spec.features = features
        spec.points_per_cloud = points_per_cloud
        spec.noise_sigma = noise_sigma
        spec.id = f"wp{index:03d}"
        try:
            validate_spec(spec)
            return spec
        except SpecError:
            continue
    raise SpecError("could not draw a valid random work-piece")


def random_specs(count, seed, points_per_cloud=5000, noise_sigma=0.0):
    return [random_spec(np.random.default_rng(derive_seed(seed, "spec", i)), i, points_per_cloud, noise_sigma)
            for i in range(count)]
