"""On-disk formats.

Binary files are little-endian. Layouts::

    checkpoint (DP3D)  magic, u32 version, u32[] point_mlp_dims, u32[] head_dims,
                       str variant, then per layer f32 W (fan_in x fan_out, row-major)
                       and f32 b, then u32 CRC32 of everything before it
    descriptors (DP3F) magic, u32 version, u32 D, u32 count,
                       count x (u32 keypoint index, D x f32)
    codes (DP3B)       magic, u8 version, u32 bits, u32 count, count x ceil(bits/8) bytes
    ITQ model (DP3Q)   magic, u32 version, u32 D, u32 bits, f64 mean, f64 projection,
                       f64 rotation, u32 CRC32
    training set (DP3T) magic, u32 version, u32 kind (0 pairs, 1 triplets), u32 N,
                       u32 count, records, u32 CRC32

``u32[]`` is a u32 length followed by that many u32 values; ``str`` is a u32 byte
length followed by UTF-8 bytes.

Text formats: XYZ clouds, ASCII PLY (vertex x/y/z and optional nx/ny/nz only),
keypoint files (one index per line), label files (one label per line, aligned
with the keypoint file), correspondence files (``model_a model_b idx_a idx_b
[sym_group]``) and a stanza-based manifest.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binarization import BinaryCode, ItqModel
from .corpus import Corpus, CorrespondenceSet, ModelEntry
from .errors import FormatError
from .geometry import Lrf, Patch, PointCloud
from .mining import TrainingPair, TrainingTriplet
from .model import EncoderArch, EncoderParams

CHECKPOINT_MAGIC = b"DP3D"
DESCRIPTOR_MAGIC = b"DP3F"
CODES_MAGIC = b"DP3B"
ITQ_MAGIC = b"DP3Q"
TRAINSET_MAGIC = b"DP3T"
VERSION = 1


def atomic_write(path, data: bytes | str):
    """Write via a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, limit: int = 1 << 16) -> list[int]:
        n = self.u32()
        if n > limit:
            raise FormatError(f"{self.what}: implausible array length {n}")
        return list(struct.unpack(f"<{n}I", self.take(4 * n)))

    def string(self, limit: int = 1 << 16) -> str:
        n = self.u32()
        if n > limit:
            raise FormatError(f"{self.what}: implausible string length {n}")
        try:
            return self.take(n).decode()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: invalid UTF-8 string") from exc

    def floats(self, count: int, dtype: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype).astype(np.float64)

    def magic(self, expected: bytes):
        got = self.data[:4]
        if len(self.data) < 4 or got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")
        self.pos = 4

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} unexpected trailing bytes")


def _u32s(values) -> bytes:
    values = list(values)
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def _string(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def _check_crc(data: bytes, what: str) -> bytes:
    if len(data) < 8:
        raise FormatError(f"{what}: truncated file ({len(data)} bytes)")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise FormatError(f"{what}: CRC mismatch (file corrupt or truncated)")
    return body


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


# ---------------------------------------------------------------- checkpoint


def checkpoint_bytes(params: EncoderParams) -> bytes:
    params.validate()
    arch = params.arch
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", VERSION),
        _u32s(arch.point_mlp_dims),
        _u32s(arch.head_dims),
        _string(arch.variant),
    ]
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return _with_crc(b"".join(parts))


def parse_checkpoint(data: bytes, what: str = "checkpoint") -> EncoderParams:
    r = _Reader(data, what)
    r.magic(CHECKPOINT_MAGIC)
    body = _check_crc(data, what)
    r = _Reader(body, what)
    r.pos = 4
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    try:
        arch = EncoderArch(tuple(r.u32s()), tuple(r.u32s()), r.string())
    except ValueError as exc:
        raise FormatError(f"{what}: invalid architecture ({exc})") from exc
    weights, biases = [], []
    for fi, fo in arch.layer_shapes():
        weights.append(r.floats(fi * fo, "<f4").reshape(fi, fo))
        biases.append(r.floats(fo, "<f4"))
    r.done()
    return EncoderParams(arch, weights, biases)


def save_checkpoint(path, params: EncoderParams):
    atomic_write(path, checkpoint_bytes(params))


def load_checkpoint(path) -> EncoderParams:
    return parse_checkpoint(_read(path), str(path))


# --------------------------------------------------------------- descriptors


def descriptor_bytes(indices, values) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if values.ndim != 2 or len(values) != len(indices):
        raise FormatError("descriptor values must be (count, D) matching the indices")
    D = values.shape[1]
    rec = np.zeros(len(indices), dtype=[("idx", "<u4"), ("v", "<f4", (D,))])
    rec["idx"] = indices
    rec["v"] = values
    return DESCRIPTOR_MAGIC + struct.pack("<III", VERSION, D, len(indices)) + rec.tobytes()


def parse_descriptors(data: bytes, what: str = "descriptor file") -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(data, what)
    r.magic(DESCRIPTOR_MAGIC)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    D, count = r.u32(), r.u32()
    if D < 1:
        raise FormatError(f"{what}: descriptor dimension 0")
    if D > 1 << 20:
        raise FormatError(f"{what}: implausible descriptor dimension {D}")
    dt = np.dtype([("idx", "<u4"), ("v", "<f4", (D,))])
    rec = np.frombuffer(r.take(dt.itemsize * count), dtype=dt)
    r.done()
    return rec["idx"].astype(np.int64), rec["v"].astype(np.float64).reshape(count, D)


def save_descriptors(path, indices, values):
    atomic_write(path, descriptor_bytes(indices, values))


def load_descriptors(path) -> tuple[np.ndarray, np.ndarray]:
    return parse_descriptors(_read(path), str(path))


# --------------------------------------------------------------- binary codes


def codes_bytes(codes: list[BinaryCode], bits: int) -> bytes:
    nbytes = (bits + 7) // 8
    out = [CODES_MAGIC, struct.pack("<BII", VERSION, bits, len(codes))]
    for c in codes:
        if c.bits != bits or len(c.packed) != nbytes:
            raise FormatError("all codes must have the declared bit length")
        out.append(c.packed)
    return b"".join(out)


def parse_codes(data: bytes, what: str = "code file") -> list[BinaryCode]:
    r = _Reader(data, what)
    r.magic(CODES_MAGIC)
    version = r.u8()
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    bits, count = r.u32(), r.u32()
    if bits < 1:
        raise FormatError(f"{what}: zero-length codes")
    nbytes = (bits + 7) // 8
    codes = [BinaryCode(r.take(nbytes), bits) for _ in range(count)]
    r.done()
    return codes


def save_codes(path, codes: list[BinaryCode], bits: int):
    atomic_write(path, codes_bytes(codes, bits))


def load_codes(path) -> list[BinaryCode]:
    return parse_codes(_read(path), str(path))


def itq_bytes(model: ItqModel) -> bytes:
    body = [ITQ_MAGIC, struct.pack("<III", VERSION, model.dim, model.bits)]
    for a in (model.mean, model.projection, model.rotation):
        body.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return _with_crc(b"".join(body))


def parse_itq(data: bytes, what: str = "ITQ model") -> ItqModel:
    r = _Reader(data, what)
    r.magic(ITQ_MAGIC)
    body = _check_crc(data, what)
    r = _Reader(body, what)
    r.pos = 4
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    D, B = r.u32(), r.u32()
    if not (1 <= B <= D):
        raise FormatError(f"{what}: invalid dimensions D={D} bits={B}")
    mean = r.floats(D, "<f8")
    proj = r.floats(D * B, "<f8").reshape(D, B)
    rot = r.floats(B * B, "<f8").reshape(B, B)
    r.done()
    return ItqModel(mean, proj, rot)


def save_itq(path, model: ItqModel):
    atomic_write(path, itq_bytes(model))


def load_itq(path) -> ItqModel:
    return parse_itq(_read(path), str(path))


# -------------------------------------------------------------- training sets


def _patch_bytes(p: Patch, key) -> bytes:
    return (
        _string(key[0])
        + struct.pack("<iI", key[1], p.valid_count)
        + np.ascontiguousarray(p.lrf.origin, dtype="<f8").tobytes()
        + np.ascontiguousarray(p.lrf.axes, dtype="<f8").tobytes()
        + struct.pack("<d", p.lrf.support_radius)
        + np.ascontiguousarray(p.points, dtype="<f8").tobytes()
    )


def _read_patch(r: _Reader, N: int):
    model = r.string()
    idx, valid = struct.unpack("<iI", r.take(8))
    origin = r.floats(3, "<f8")
    axes = r.floats(9, "<f8").reshape(3, 3)
    (radius,) = struct.unpack("<d", r.take(8))
    pts = r.floats(3 * N, "<f8").reshape(N, 3)
    if not (1 <= valid <= N):
        raise FormatError(f"{r.what}: invalid valid_count {valid}")
    return Patch(idx, pts, valid, Lrf(origin, axes, radius)), (model, idx)


def trainset_bytes(items: list[TrainingPair] | list[TrainingTriplet]) -> bytes:
    if not items:
        raise FormatError("refusing to write an empty training set")
    triplets = isinstance(items[0], TrainingTriplet)
    N = len(items[0].anchor.points if triplets else items[0].patch_a.points)
    out = [TRAINSET_MAGIC, struct.pack("<IIII", VERSION, int(triplets), N, len(items))]
    for it in items:
        if triplets:
            for patch, key in zip((it.anchor, it.positive, it.negative), it.keys):
                out.append(_patch_bytes(patch, key))
        else:
            gamma = 255 if it.gamma is None else int(it.gamma)
            out.append(struct.pack("<BB", int(it.positive), gamma))
            out.append(_patch_bytes(it.patch_a, it.key_a))
            out.append(_patch_bytes(it.patch_b, it.key_b))
    return _with_crc(b"".join(out))


def parse_trainset(data: bytes, what: str = "training set"):
    r = _Reader(data, what)
    r.magic(TRAINSET_MAGIC)
    body = _check_crc(data, what)
    r = _Reader(body, what)
    r.pos = 4
    version, triplets, N, count = struct.unpack("<IIII", r.take(16))
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    items = []
    for _ in range(count):
        if triplets:
            (a, ka), (p, kp), (n, kn) = (_read_patch(r, N) for _ in range(3))
            items.append(TrainingTriplet(a, p, n, (ka, kp, kn)))
        else:
            pos, gamma = r.u8(), r.u8()
            pa, ka = _read_patch(r, N)
            pb, kb = _read_patch(r, N)
            items.append(
                TrainingPair(pa, pb, "positive" if pos else "negative", None if gamma == 255 else gamma, ka, kb)
            )
    r.done()
    return items


def save_trainset(path, items):
    atomic_write(path, trainset_bytes(items))


def load_trainset(path):
    return parse_trainset(_read(path), str(path))


# ---------------------------------------------------------------- text clouds


def _lines(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield n, s


def read_xyz(path, model_id: str | None = None) -> PointCloud:
    """One "x y z" triple per line; six columns are read as point + normal."""
    rows = []
    for n, s in _lines(path):
        try:
            vals = [float(v) for v in s.split()]
        except ValueError:
            raise FormatError(f"{path}:{n}: not a number in {s!r}") from None
        if len(vals) not in (3, 6) or (rows and len(vals) != len(rows[0])):
            raise FormatError(f"{path}:{n}: expected 3 (or consistently 6) values, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no points")
    arr = np.array(rows)
    mid = model_id if model_id is not None else Path(path).stem
    return PointCloud(arr[:, :3], arr[:, 3:] if arr.shape[1] == 6 else None, mid)


def xyz_text(cloud: PointCloud) -> str:
    arr = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    return "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in arr)


def write_xyz(path, cloud: PointCloud):
    atomic_write(path, xyz_text(cloud))


_PLY_ALLOWED = ("x", "y", "z", "nx", "ny", "nz")


def read_ply(path, model_id: str | None = None) -> PointCloud:
    """ASCII PLY with vertex properties x, y, z and optionally nx, ny, nz; faces are ignored."""
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read as ASCII PLY ({exc})") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' header line")
    props: list[str] = []
    elements: list[tuple[str, int]] = []
    n_vertex = None
    i = 1
    while True:
        if i >= len(lines):
            raise FormatError(f"{path}: header has no end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported, got format {' '.join(tok[1:])}")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2])))
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
        elif tok[0] == "property":
            if elements and elements[-1][0] == "vertex":
                if tok[1] == "list" or tok[-1] not in _PLY_ALLOWED or tok[1] not in ("float", "double", "float32", "float64"):
                    raise FormatError(
                        f"{path}: unsupported vertex property {' '.join(tok[1:])!r}; "
                        f"only float x, y, z, nx, ny, nz are accepted"
                    )
                props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    if n_vertex is None:
        raise FormatError(f"{path}: no vertex element")
    if props[:3] != ["x", "y", "z"] or props[3:] not in ([], ["nx", "ny", "nz"]):
        raise FormatError(f"{path}: vertex properties must be x y z [nx ny nz], got {props}")
    # vertex rows come first only if vertex is the first element
    skip = 0
    for name, count in elements:
        if name == "vertex":
            break
        skip += count
    body = lines[i + skip : i + skip + n_vertex]
    if len(body) < n_vertex:
        raise FormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    try:
        arr = np.array([[float(v) for v in ln.split()[: len(props)]] for ln in body])
    except ValueError as exc:
        raise FormatError(f"{path}: bad vertex row ({exc})") from None
    if arr.shape != (n_vertex, len(props)):
        raise FormatError(f"{path}: vertex rows must have {len(props)} values")
    mid = model_id if model_id is not None else Path(path).stem
    return PointCloud(arr[:, :3], arr[:, 3:] if len(props) == 6 else None, mid)


def read_cloud(path, model_id: str | None = None) -> PointCloud:
    if str(path).lower().endswith(".ply"):
        return read_ply(path, model_id)
    return read_xyz(path, model_id)


# ------------------------------------------------------ keypoints, labels, GT


def read_keypoints(path) -> np.ndarray:
    out = []
    for n, s in _lines(path):
        try:
            out.append(int(s.split()[0]))
        except ValueError:
            raise FormatError(f"{path}:{n}: not an integer index: {s!r}") from None
    return np.array(out, dtype=np.int64)


def write_keypoints(path, indices):
    atomic_write(path, "".join(f"{int(i)}\n" for i in indices))


def read_labels(path) -> list[str]:
    return [s for _, s in _lines(path)]


def write_labels(path, labels):
    atomic_write(path, "".join(f"{l}\n" for l in labels))


def read_correspondences(path) -> list[CorrespondenceSet]:
    """Lines ``model_a model_b idx_a idx_b [sym_group]``; one set per ordered model pair.

    A sym_group applies to both endpoints of its line.
    """
    sets: dict[tuple[str, str], tuple[list, dict]] = {}
    for n, s in _lines(path):
        tok = s.split()
        if len(tok) not in (4, 5):
            raise FormatError(f"{path}:{n}: expected 'model_a model_b idx_a idx_b [sym_group]'")
        try:
            ia, ib = int(tok[2]), int(tok[3])
        except ValueError:
            raise FormatError(f"{path}:{n}: indices must be integers") from None
        pairs, groups = sets.setdefault((tok[0], tok[1]), ([], {}))
        pairs.append((ia, ib))
        if len(tok) == 5:
            for mid, idx in ((tok[0], ia), (tok[1], ib)):
                g = groups.setdefault(mid, {})
                if g.get(idx, tok[4]) != tok[4]:
                    raise FormatError(f"{path}:{n}: keypoint {mid}:{idx} assigned to two sym groups")
                g[idx] = tok[4]
    return [
        CorrespondenceSet(a, b, np.array(p, dtype=np.int64).reshape(-1, 2), g) for (a, b), (p, g) in sets.items()
    ]


def correspondence_text(cs: CorrespondenceSet) -> str:
    lines = []
    for ia, ib in cs.pairs.tolist():
        g = cs.group(cs.model_a, ia)
        gb = cs.group(cs.model_b, ib)
        tail = f" {g}" if g is not None and g == gb else ""
        lines.append(f"{cs.model_a} {cs.model_b} {ia} {ib}{tail}\n")
    return "".join(lines)


# ------------------------------------------------------------------ manifest


@dataclass
class Manifest:
    """Stanzas ``clouds:``, ``keypoints:``, ``labels:`` (lines ``model_id path``) and
    ``correspondences:`` (lines ``path``). Relative paths resolve against the manifest."""

    clouds: dict[str, str]
    keypoints: dict[str, str]
    labels: dict[str, str]
    correspondences: list[str]

    def text(self) -> str:
        out = ["clouds:\n"]
        out += [f"  {k} {v}\n" for k, v in self.clouds.items()]
        out.append("keypoints:\n")
        out += [f"  {k} {v}\n" for k, v in self.keypoints.items()]
        out.append("labels:\n")
        out += [f"  {k} {v}\n" for k, v in self.labels.items()]
        out.append("correspondences:\n")
        out += [f"  {p}\n" for p in self.correspondences]
        return "".join(out)


def read_manifest(path) -> Manifest:
    m = Manifest({}, {}, {}, [])
    section = None
    for n, s in _lines(path):
        if s.endswith(":") and len(s.split()) == 1:
            section = s[:-1]
            if section not in ("clouds", "keypoints", "labels", "correspondences"):
                raise FormatError(f"{path}:{n}: unknown stanza {section!r}")
            continue
        if section is None:
            raise FormatError(f"{path}:{n}: entry before any stanza")
        tok = s.split(maxsplit=1)
        if section == "correspondences":
            m.correspondences.append(s)
        elif len(tok) != 2:
            raise FormatError(f"{path}:{n}: expected 'model_id path'")
        else:
            getattr(m, section)[tok[0]] = tok[1]
    return m


def load_corpus(manifest_path) -> Corpus:
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    base = manifest_path.parent

    def res(p):
        return base / p

    models = []
    for mid, cpath in m.clouds.items():
        cloud = read_cloud(res(cpath), mid)
        kps = read_keypoints(res(m.keypoints[mid])) if mid in m.keypoints else np.zeros(0, dtype=np.int64)
        labels = read_labels(res(m.labels[mid])) if mid in m.labels else ["0"] * len(kps)
        try:
            models.append(ModelEntry(cloud, kps, labels))
        except ValueError as exc:
            raise FormatError(f"{manifest_path}: {exc}") from exc
    corrs = []
    for p in m.correspondences:
        corrs += read_correspondences(res(p))
    try:
        return Corpus(models, corrs)
    except ValueError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc


def write_corpus(out_dir, corpus: Corpus) -> Path:
    """Write clouds, keypoints, labels, one correspondence file per model pair, and the manifest."""
    out_dir = Path(out_dir)
    man = Manifest({}, {}, {}, [])
    for model in corpus.models:
        mid = model.id
        write_xyz(out_dir / "clouds" / f"{mid}.xyz", model.cloud)
        write_keypoints(out_dir / "keypoints" / f"{mid}.kp", model.keypoints)
        write_labels(out_dir / "labels" / f"{mid}.labels", model.labels)
        man.clouds[mid] = f"clouds/{mid}.xyz"
        man.keypoints[mid] = f"keypoints/{mid}.kp"
        man.labels[mid] = f"labels/{mid}.labels"
    for cs in corpus.correspondences:
        rel = f"correspondences/{cs.model_a}__{cs.model_b}.corr"
        atomic_write(out_dir / rel, correspondence_text(cs))
        man.correspondences.append(rel)
    path = out_dir / "manifest.txt"
    atomic_write(path, man.text())
    return path


# ------------------------------------------------------------------ eval CSV

EVAL_CSV_HEADER = "rank,cmc,precision,recall,corr_accuracy"


def eval_csv(report) -> str:
    """Header, one ``rank,cmc`` row per rank 1..k, then a ``summary`` row with the scalars."""
    rows = [EVAL_CSV_HEADER]
    rows += [f"{r},{v:.10g},,," for r, v in enumerate(report.cmc.tolist(), 1)]
    rows.append(f"summary,,{report.precision:.10g},{report.recall:.10g},{report.corr_accuracy:.10g}")
    return "\n".join(rows) + "\n"
