"""ASCII PLY reader/writer for labeled point clouds.

Vertex properties: x, y, z, nx, ny, nz as ``float`` and an optional ``uint``
``label``.  Values are written with 9 significant digits, which round-trips
float32 exactly, so writing the same cloud twice gives identical bytes.
"""

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geom import CAD_CLASSES, LabeledPointCloud, PointCloud

_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
              "int16", "uint16", "int32", "uint32"}
_FLOAT_TYPES = {"float", "double", "float32", "float64"}


def _f32(v):
    return "%.9g" % float(np.float32(v))


def format_ply(lc, with_labels=True):
    cloud = lc.cloud if isinstance(lc, LabeledPointCloud) else lc
    labels = lc.labels if isinstance(lc, LabeledPointCloud) and with_labels else None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property float {p}" for p in ("x", "y", "z", "nx", "ny", "nz")]
    if labels is not None:
        lines.append("property uint label")
    lines.append("end_header")
    feats = np.hstack([cloud.xyz, cloud.normals]).astype(np.float32)
    for i, row in enumerate(feats):
        vals = [_f32(v) for v in row]
        if labels is not None:
            vals.append(str(int(labels[i])))
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def write_ply(path, lc, with_labels=True):
    Path(path).write_text(format_ply(lc, with_labels), encoding="ascii")


def _renormalize(normals):
    # float32 storage perturbs unit normals by ~1e-7; snap back to unit length
    lengths = np.linalg.norm(normals, axis=1)
    nz = lengths > 0
    normals[nz] /= lengths[nz, None]
    return normals


def parse_ply(text, alphabet=CAD_CLASSES, name=""):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{name or 'input'}: not a PLY file")
    props = []
    n_vertex = None
    in_vertex = False
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok:
            continue
        head = tok[0]
        if head == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise FormatError(f"{name or 'input'}: only ASCII PLY is supported")
        elif head == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is None:
                raise FormatError(f"{name or 'input'}: vertex element must come first")
        elif head == "property":
            if tok[1] == "list":
                if in_vertex:
                    raise FormatError(f"{name or 'input'}: list properties on vertices are not supported")
                continue
            if in_vertex:
                if tok[1] not in _INT_TYPES | _FLOAT_TYPES:
                    raise FormatError(f"{name or 'input'}: unknown property type {tok[1]}")
                props.append(tok[2])
        elif head in ("comment", "obj_info"):
            continue
        elif head == "end_header":
            body_start = lineno + 1
            break
        else:
            raise FormatError(f"{name or 'input'}: unexpected header line {raw!r}")
    if body_start is None or n_vertex is None:
        raise FormatError(f"{name or 'input'}: truncated header")
    missing = [p for p in ("x", "y", "z") if p not in props]
    if missing:
        raise FormatError(f"{name or 'input'}: missing vertex properties {missing}")
    rows = lines[body_start:body_start + n_vertex]
    if len(rows) < n_vertex:
        raise FormatError(f"{name or 'input'}: expected {n_vertex} vertices, found {len(rows)}")
    try:
        data = np.array([r.split()[:len(props)] for r in rows], dtype=np.float64).reshape(n_vertex, len(props))
    except ValueError as exc:
        raise FormatError(f"{name or 'input'}: malformed vertex data ({exc})") from None
    col = {p: i for i, p in enumerate(props)}
    xyz = data[:, [col["x"], col["y"], col["z"]]]
    if all(p in col for p in ("nx", "ny", "nz")):
        normals = _renormalize(data[:, [col["nx"], col["ny"], col["nz"]]].copy())
    else:
        normals = np.zeros_like(xyz)
    if "label" in col:
        labels = data[:, col["label"]].astype(np.int64)
    else:
        labels = np.full(n_vertex, alphabet.background_index, dtype=np.int64)
    return LabeledPointCloud(PointCloud(xyz, normals), labels, alphabet, name)


def read_ply(path, alphabet=CAD_CLASSES):
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return parse_ply(text, alphabet, name=path.stem)


CORPUS_MANIFEST = "manifest.json"


def save_corpus(directory, corpus, extra=None):
    """One PLY per cloud (``<name>.ply``) plus a JSON manifest listing files and label histograms."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for lc in corpus:
        write_ply(directory / f"{lc.name}.ply", lc)
        entries.append({"file": f"{lc.name}.ply", "points": len(lc),
                        "histogram": {n: int(h) for n, h in zip(lc.alphabet.names, lc.histogram())}})
    doc = {"version": 1, "classes": list(CAD_CLASSES.names), "clouds": entries}
    if extra:
        doc.update(extra)
    (directory / CORPUS_MANIFEST).write_text(json.dumps(doc, indent=1) + "\n")
    return doc


def load_corpus(directory, alphabet=CAD_CLASSES):
    directory = Path(directory)
    path = directory / CORPUS_MANIFEST
    try:
        doc = json.loads(path.read_text())
        files = [e["file"] for e in doc["clouds"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable corpus manifest ({exc})") from None
    if not files:
        raise FormatError(f"{path}: corpus lists no clouds")
    return [read_ply(directory / f, alphabet) for f in files]
