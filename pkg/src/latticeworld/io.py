"""File formats: voxel archives, checkpoints, label maps, prompt tables, CSV and PPM/PGM rasters.

All binary formats are little-endian. Float payloads are stored as 32-bit, so
``load(save(x)) == x`` bit-exactly for any float32-representable ``x`` and
re-saving a loaded object reproduces the file byte-for-byte.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .flowmodel import PARAM_ORDER, FusionLayer, ToyDecoders, ToyFlowModel
from .lattice import DenseLatentGrid, GridDims, OccupancyField, SegmentMap, SparseLatent

ARCHIVE_MAGIC = b"LWVX0001"
KIND_DENSE, KIND_SPARSE, KIND_OCCUPANCY = 0, 1, 2
_HEADER = struct.Struct("<8sB4I")

CKPT_MAGIC = b"LWCK"
CKPT_VERSION = 1
CKPT_FLOW, CKPT_FUSION, CKPT_DECODERS = 0, 1, 2


# --- voxel archives -------------------------------------------------------------


def archive_bytes(obj) -> bytes:
    if isinstance(obj, DenseLatentGrid):
        d, h, w, c = obj.data.shape
        head = _HEADER.pack(ARCHIVE_MAGIC, KIND_DENSE, d, h, w, c)
        return head + np.ascontiguousarray(obj.data, dtype="<f4").tobytes()
    if isinstance(obj, SparseLatent):
        s = obj.canonical()
        dims = s.dims
        rec = np.dtype([("p", "<u4", (3,)), ("f", "<f4", (dims.c,))])
        arr = np.empty(len(s), rec)
        arr["p"] = s.positions
        arr["f"] = s.features
        head = _HEADER.pack(ARCHIVE_MAGIC, KIND_SPARSE, dims.d, dims.h, dims.w, dims.c)
        return head + struct.pack("<Q", len(s)) + arr.tobytes()
    if isinstance(obj, OccupancyField):
        d, h, w = obj.values.shape
        head = _HEADER.pack(ARCHIVE_MAGIC, KIND_OCCUPANCY, d, h, w, 1)
        return head + struct.pack("<f", obj.threshold) + np.ascontiguousarray(obj.values, "<f4").tobytes()
    raise DataError(f"cannot archive object of type {type(obj).__name__}")


def save_archive(path, obj) -> None:
    Path(path).write_bytes(archive_bytes(obj))


def parse_archive(buf: bytes):
    if len(buf) < _HEADER.size:
        raise DataError("voxel archive truncated (header)")
    magic, kind, d, h, w, c = _HEADER.unpack_from(buf, 0)
    if magic[:4] != ARCHIVE_MAGIC[:4]:
        raise DataError("not a voxel archive (bad magic)")
    if magic != ARCHIVE_MAGIC:
        raise DataError(f"unsupported voxel archive version {magic[4:].decode(errors='replace')}")
    off = _HEADER.size
    body = memoryview(buf)[off:]
    if kind == KIND_DENSE:
        n = d * h * w * c
        if len(body) != 4 * n:
            raise DataError("dense archive payload size mismatch")
        data = np.frombuffer(body, "<f4").astype(np.float64).reshape(d, h, w, c)
        return DenseLatentGrid(data)
    if kind == KIND_SPARSE:
        if len(body) < 8:
            raise DataError("sparse archive truncated")
        (count,) = struct.unpack_from("<Q", body, 0)
        rec = np.dtype([("p", "<u4", (3,)), ("f", "<f4", (c,))])
        if len(body) != 8 + count * rec.itemsize:
            raise DataError("sparse archive payload size mismatch")
        arr = np.frombuffer(body[8:], rec)
        return SparseLatent(GridDims(d, h, w, c), arr["p"].astype(np.int64).reshape(-1, 3),
                            arr["f"].astype(np.float64).reshape(-1, c))
    if kind == KIND_OCCUPANCY:
        n = d * h * w
        if c != 1 or len(body) != 4 + 4 * n:
            raise DataError("occupancy archive payload size mismatch")
        (thr,) = struct.unpack_from("<f", body, 0)
        vals = np.frombuffer(body[4:], "<f4").astype(np.float64).reshape(d, h, w)
        return OccupancyField(vals, float(thr))
    raise DataError(f"unknown voxel archive kind {kind}")


def load_archive(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read archive {path}: {e.strerror}") from None
    return parse_archive(buf)


# --- checkpoints ----------------------------------------------------------------


def _ckpt(kind: int, hparams, arrays) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<IBI", CKPT_VERSION, kind, len(hparams)),
             struct.pack(f"<{len(hparams)}i", *hparams)]
    parts += [np.ascontiguousarray(a, "<f4").tobytes() for a in arrays]
    return b"".join(parts)


def checkpoint_bytes(obj) -> bytes:
    if isinstance(obj, ToyFlowModel):
        hp = (obj.channels, obj.n_labels, obj.hidden, obj.patch_radius, obj.embed_dim)
        return _ckpt(CKPT_FLOW, hp, [obj.params[k] for k in PARAM_ORDER])
    if isinstance(obj, FusionLayer):
        return _ckpt(CKPT_FUSION, (obj.c, obj.cond_channels), [obj.weight, obj.bias])
    if isinstance(obj, ToyDecoders):
        hp = (obj.occ_weight.size, obj.app_weight.shape[0])
        return _ckpt(CKPT_DECODERS, hp, [obj.occ_weight, np.array([obj.occ_bias]), obj.app_weight, obj.app_bias])
    raise DataError(f"cannot checkpoint object of type {type(obj).__name__}")


def save_checkpoint(path, obj) -> None:
    Path(path).write_bytes(checkpoint_bytes(obj))


def _take(buf, off, shape):
    n = int(np.prod(shape))
    end = off + 4 * n
    if end > len(buf):
        raise DataError("checkpoint truncated")
    return np.frombuffer(buf[off:end], "<f4").astype(np.float64).reshape(shape), end


def parse_checkpoint(buf: bytes, expect: int | None = None):
    if buf[:4] != CKPT_MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    version, kind, nh = struct.unpack_from("<IBI", buf, 4)
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    if expect is not None and kind != expect:
        raise DataError(f"checkpoint kind {kind}, expected {expect}")
    off = 4 + 9
    hp = struct.unpack_from(f"<{nh}i", buf, off)
    off += 4 * nh
    if kind == CKPT_FLOW:
        c, nl, hid, rad, emb = hp
        m = ToyFlowModel(c, nl, hid, rad, emb)
        shapes = {"embed": (nl, emb), "w_feat": (m.n_features, hid), "w_cond": (emb + 3, hid),
                  "b1": (hid,), "w2": (hid, hid), "b2": (hid,), "w_out": (hid, c), "b_out": (c,)}
        for k in PARAM_ORDER:
            m.params[k], off = _take(buf, off, shapes[k])
        obj = m
    elif kind == CKPT_FUSION:
        c, cc = hp
        w, off = _take(buf, off, (c, c + cc))
        b, off = _take(buf, off, (c,))
        obj = FusionLayer(w, b)
    elif kind == CKPT_DECODERS:
        cs, cl = hp
        ow, off = _take(buf, off, (cs,))
        ob, off = _take(buf, off, (1,))
        aw, off = _take(buf, off, (cl, 4))
        ab, off = _take(buf, off, (4,))
        obj = ToyDecoders(ow, float(ob[0]), aw, ab)
    else:
        raise DataError(f"unknown checkpoint kind {kind}")
    if off != len(buf):
        raise DataError("checkpoint has trailing bytes")
    return obj


def load_checkpoint(path, expect: int | None = None):
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return parse_checkpoint(buf, expect)


def round_to_f32(obj):
    """The in-memory object a checkpoint round trip would give back."""
    return parse_checkpoint(checkpoint_bytes(obj))


# --- label maps and prompt tables -----------------------------------------------


def _pgm_tokens(buf: bytes):
    # header tokens with '#' comments, then one whitespace byte before the raster
    tokens, i = [], 2
    while len(tokens) < 3:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise DataError("PGM header truncated")
        tokens.append(int(buf[i:j]))
        i = j
    return tokens, i + 1


def read_label_raster(path) -> np.ndarray:
    """Binary PGM (P5, 8-bit) or a whitespace-separated integer text grid."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read map {path}: {e.strerror}") from None
    if buf[:2] == b"P5":
        try:
            (w, h, maxval), start = _pgm_tokens(buf)
        except ValueError:
            raise DataError(f"malformed PGM header in {path}") from None
        if maxval > 255:
            raise DataError("only 8-bit PGM label maps are supported")
        raster = np.frombuffer(buf[start:start + w * h], np.uint8)
        if raster.size != w * h:
            raise DataError("PGM raster truncated")
        return raster.reshape(h, w).astype(np.int64)
    try:
        rows = [[int(v) for v in line.split()] for line in buf.decode().splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
    except (UnicodeDecodeError, ValueError):
        raise DataError(f"map {path} is neither a P5 PGM nor an integer text grid") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataError(f"text map {path} is empty or ragged")
    return np.array(rows, dtype=np.int64)


def write_pgm(path, raster: np.ndarray) -> None:
    r = np.asarray(raster)
    if r.min() < 0 or r.max() > 255:
        raise DataError("PGM labels must lie in 0..255")
    h, w = r.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + r.astype(np.uint8).tobytes())


def read_prompt_table(path) -> dict[int, str]:
    """``label = prompt`` lines; blank lines and ``#`` comments ignored."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read prompt table {path}: {e.strerror}") from None
    table = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        try:
            label = int(key)
        except ValueError:
            label = None
        if not sep or label is None or not val.strip():
            raise DataError(f"prompt table {path}:{n}: expected 'label = prompt'")
        if label in table:
            raise DataError(f"prompt table {path}:{n}: duplicate label {label}")
        table[label] = val.strip()
    return table


def load_segment_map(map_path, prompt_path) -> SegmentMap:
    return SegmentMap(read_label_raster(map_path), read_prompt_table(prompt_path))


# --- CSV and PPM ----------------------------------------------------------------


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 from an ``(H, W, 3)`` float image in [0, 1]."""
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise DataError("not a P6 PPM")
    (w, h, _), start = _pgm_tokens(buf)
    return np.frombuffer(buf[start:start + 3 * w * h], np.uint8).reshape(h, w, 3)
