"""PLY and label-file I/O plus the on-disk dataset layout.

Dataset layout::

    <root>/<category>/train/*.ply    full prototypes (1-4 used)
    <root>/<category>/test/*.ply     one-side test scans
    <root>/<category>/gt/<stem>.txt  per-point labels for each abnormal scan

A test scan whose file stem ends in ``good`` is normal and needs no gt file.
"""

from __future__ import annotations

import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud

log = logging.getLogger(__name__)

MAX_PROTOTYPES = 4

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    """Base class for PLY parse failures; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PlyHeaderError(PlyError):
    pass


class PlyLayoutError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


class LabelFileError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, None) for lists
    offset: int = 0


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply"):
        raise PlyHeaderError("missing 'ply' magic", 0)
    if end < 0:
        raise PlyHeaderError("missing end_header", len(data))
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyHeaderError("end_header not terminated by newline", end)
    body_start = nl + 1
    fmt = None
    elements = []
    offset = 0
    for raw in data[:body_start].split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyHeaderError("non-ascii header line", line_offset) from None
        if not line or line == "ply" or line.startswith(("comment", "obj_info")) or line == "end_header":
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) != 3 or tok[2] != "1.0":
                raise PlyHeaderError(f"bad format line {line!r}", line_offset)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyHeaderError(f"bad element line {line!r}", line_offset)
            elements.append(_Element(tok[1], int(tok[2]), offset=line_offset))
        elif tok[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element", line_offset)
            if len(tok) == 5 and tok[1] == "list":
                elements[-1].props.append((tok[4], None))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyHeaderError(f"bad property line {line!r}", line_offset)
        else:
            raise PlyHeaderError(f"unknown header keyword {tok[0]!r}", line_offset)
    if fmt is None:
        raise PlyHeaderError("missing format line", 0)
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyLayoutError(f"unsupported format {fmt!r}", 0)
    return fmt, elements, body_start


def read_ply(path) -> PointCloud:
    """Read the vertex element of an ascii or binary_little_endian PLY file."""
    data = Path(path).read_bytes()
    fmt, elements, body_start = _parse_header(data)
    vertex_pos = next((i for i, e in enumerate(elements) if e.name == "vertex"), None)
    if vertex_pos is None:
        raise PlyLayoutError("no vertex element", body_start)
    vertex = elements[vertex_pos]
    names = [p for p, _ in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise PlyLayoutError(f"vertex element lacks property {axis!r}", vertex.offset)
    if any(t is None for _, t in vertex.props):
        raise PlyLayoutError("list properties on vertex are not supported", vertex.offset)
    for prior in elements[:vertex_pos]:
        if any(t is None for _, t in prior.props):
            raise PlyLayoutError(f"list element {prior.name!r} before vertex", prior.offset)

    if fmt == "binary_little_endian":
        skip = sum(e.count * int(np.dtype([(p, "<" + t) for p, t in e.props]).itemsize)
                   for e in elements[:vertex_pos])
        dtype = np.dtype([(p, "<" + t) for p, t in vertex.props])
        start = body_start + skip
        need = vertex.count * dtype.itemsize
        if start + need > len(data):
            raise PlyTruncatedError(
                f"vertex body needs {need} bytes, file has {max(0, len(data) - start)}", len(data))
        table = np.frombuffer(data, dtype=dtype, count=vertex.count, offset=start)
        cols = {p: table[p] for p in names}
    else:
        cols = _read_ascii_vertices(data, body_start, elements[:vertex_pos], vertex)

    pts = np.column_stack([cols[a].astype(np.float64) for a in "xyz"]) if vertex.count else np.zeros((0, 3))
    normals = None
    if all(n in cols for n in ("nx", "ny", "nz")) and vertex.count:
        normals = np.column_stack([cols[a].astype(np.float64) for a in ("nx", "ny", "nz")])
        lengths = np.linalg.norm(normals, axis=1)
        if np.max(np.abs(lengths - 1.0)) > 1e-6:
            # files written in float32 or by other tools are renormalized; zero rows dropped
            if np.any(lengths < 1e-12):
                normals = None
            else:
                normals = normals / lengths[:, None]
    labels = None
    if "label" in cols and vertex.count:
        labels = cols["label"].astype(np.int64)
    return PointCloud(pts, normals, labels)


def _read_ascii_vertices(data, body_start, before, vertex):
    pos = body_start
    n_skip = sum(e.count for e in before)
    rows = []
    line_no = 0
    while len(rows) < vertex.count:
        if pos >= len(data):
            raise PlyTruncatedError(
                f"expected {vertex.count} vertices, found {len(rows)}", len(data))
        nl = data.find(b"\n", pos)
        nl = len(data) if nl < 0 else nl
        line = data[pos:nl].strip()
        line_offset = pos
        pos = nl + 1
        if not line:
            continue
        line_no += 1
        if line_no <= n_skip:
            continue
        tok = line.split()
        if len(tok) != len(vertex.props):
            raise PlyLayoutError(
                f"vertex row has {len(tok)} values, expected {len(vertex.props)}", line_offset)
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise PlyLayoutError(f"non-numeric vertex value in {line!r}", line_offset) from None
    table = np.array(rows, dtype=np.float64).reshape(vertex.count, len(vertex.props))
    return {p: table[:, i] for i, (p, _) in enumerate(vertex.props)}


def _atomic_write(path: Path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ply(cloud: PointCloud, path, mode: str = "binary"):
    """Write `cloud` as PLY; binary mode is little-endian float64."""
    if mode not in ("ascii", "binary"):
        raise ValueError(f"mode must be 'ascii' or 'binary', got {mode!r}")
    path = Path(path)
    n = len(cloud)
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if cloud.normals is not None:
        props += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
        cols += [cloud.normals[:, 0], cloud.normals[:, 1], cloud.normals[:, 2]]
    if cloud.labels is not None:
        props.append(("label", "u1"))
        cols.append(cloud.labels)
    fmt = "binary_little_endian" if mode == "binary" else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    for name, t in props:
        header.append(f"property {'double' if t == 'f8' else 'uchar'} {name}")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if mode == "binary":
        table = np.empty(n, dtype=np.dtype([(p, "<" + t) for p, t in props]))
        for (p, _), c in zip(props, cols):
            table[p] = c
        body = table.tobytes()
    else:
        lines = []
        for i in range(n):
            vals = [repr(float(c[i])) if t == "f8" else str(int(c[i])) for (_, t), c in zip(props, cols)]
            lines.append(" ".join(vals))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    _atomic_write(path, head + body)


def read_labels_txt(path, expected_count: int, points=None) -> np.ndarray:
    """Read per-point labels from "x y z label" rows or single-column rows.

    When the 4-column form is used and `points` is given, coordinates are
    cross-checked against the cloud to within 1e-4 mm.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append(line.split())
    if len(rows) != expected_count:
        raise LabelFileError(f"{path}: {len(rows)} label rows, expected {expected_count}")
    if not rows:
        return np.zeros(0, dtype=np.uint8)
    width = len(rows[0])
    if width not in (1, 4) or any(len(r) != width for r in rows):
        raise LabelFileError(f"{path}: rows must all have 1 or 4 columns")
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError:
        raise LabelFileError(f"{path}: non-numeric value") from None
    labels = table[:, -1]
    if not np.all((labels == 0) | (labels == 1)):
        bad = labels[(labels != 0) & (labels != 1)][0]
        raise LabelFileError(f"{path}: non-binary label value {bad}")
    if width == 4 and points is not None:
        err = np.max(np.abs(table[:, :3] - np.asarray(points)))
        if err > 1e-4:
            raise LabelFileError(f"{path}: label coordinates deviate from cloud by {err:.3g} mm")
    return labels.astype(np.uint8)


def write_labels_txt(path, points, labels):
    """Emit the 4-column "x y z label" form."""
    lines = [f"{p[0]!r} {p[1]!r} {p[2]!r} {int(l)}" for p, l in zip(np.asarray(points, dtype=float).tolist(), labels)]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


@dataclass
class CategoryEntry:
    name: str
    train_paths: list
    test_paths: list
    gt_paths: list  # parallel to test_paths; None marks a normal sample

    def is_abnormal(self, i: int) -> bool:
        return self.gt_paths[i] is not None

    def sample_name(self, i: int) -> str:
        return Path(self.test_paths[i]).stem


@dataclass
class DatasetIndex:
    root: Path
    categories: list

    def category(self, name: str) -> CategoryEntry:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def names(self):
        return [c.name for c in self.categories]


def is_normal_stem(stem: str) -> bool:
    return re.search(r"good$", stem) is not None


def load_dataset(root) -> DatasetIndex:
    """Scan `root` for categories laid out as ``<category>/{train,test,gt}``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    cats = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        train = sorted((cat_dir / "train").glob("*.ply")) if (cat_dir / "train").is_dir() else []
        if not train:
            raise DatasetError(f"category {cat_dir.name!r} has no training prototypes")
        if len(train) > MAX_PROTOTYPES:
            log.warning("category %s has %d prototypes; using the first %d",
                        cat_dir.name, len(train), MAX_PROTOTYPES)
            train = train[:MAX_PROTOTYPES]
        tests = sorted((cat_dir / "test").glob("*.ply")) if (cat_dir / "test").is_dir() else []
        gts = []
        for t in tests:
            if is_normal_stem(t.stem):
                gts.append(None)
                continue
            gt = cat_dir / "gt" / f"{t.stem}.txt"
            if not gt.is_file():
                raise DatasetError(f"abnormal test sample {cat_dir.name}/{t.name} has no gt file {gt}")
            gts.append(gt)
        cats.append(CategoryEntry(cat_dir.name, train, tests, gts))
    return DatasetIndex(root, cats)


def load_test_sample(entry: CategoryEntry, i: int) -> PointCloud:
    """Test scan `i` with labels attached (all-zero for normal samples)."""
    cloud = read_ply(entry.test_paths[i])
    if entry.gt_paths[i] is None:
        labels = np.zeros(len(cloud), dtype=np.uint8)
    else:
        labels = read_labels_txt(entry.gt_paths[i], len(cloud), cloud.points)
    return PointCloud(cloud.points, cloud.normals, labels)
