"""Readers and writers: PLY point clouds, camera JSON, images, checkpoints, metrics CSV."""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
import warnings
from pathlib import Path

import numpy as np

from .scene import Camera, Frame, FrameSet, PointCloud, SceneError

logger = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise FormatError("not a PLY file: missing 'ply' magic at byte 0")
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError("malformed PLY header: no 'end_header' line")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise FormatError(f"malformed PLY header: truncated after 'end_header' at byte {end}")
    body_start = nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"PLY header line {lineno}: unsupported format {raw.strip()!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(f"PLY header line {lineno}: bad element line {raw.strip()!r}")
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise FormatError(f"PLY header line {lineno}: property before any element")
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise FormatError(f"PLY header line {lineno}: bad list property {raw.strip()!r}")
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise FormatError(f"PLY header line {lineno}: bad property {raw.strip()!r}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise FormatError(f"PLY header line {lineno}: unexpected keyword {parts[0]!r}")
    if fmt is None:
        raise FormatError("malformed PLY header: no format line")
    return fmt, elements, body_start


def read_ply(path, n_features=4, rng=None, dtype=np.float32):
    """Load a point cloud from an ASCII or binary little-endian PLY file.

    ``red/green/blue`` (u8) seed the first three descriptor channels as
    ``rgb / 255``; all remaining channels are drawn from N(0, 0.25^2).
    """
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(data)
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if fmt != "binary_little_endian":
            # skip lines of a preceding element
            for _ in range(count):
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise FormatError(f"PLY body ends inside element {name!r}")
                pos = nl + 1
        else:
            if any(isinstance(t, tuple) for _, t in props):
                raise FormatError(f"cannot skip list element {name!r} before 'vertex'")
            size = count * sum(np.dtype(t).itemsize for _, t in props)
            if pos + size > len(data):
                raise FormatError(f"element {name!r} needs {size} bytes, file has {len(data) - pos}")
            pos += size
    if vertex is None:
        raise FormatError("PLY file has no 'vertex' element")
    count, props = vertex
    names = [n for n, _ in props]
    missing = [c for c in ("x", "y", "z") if c not in names]
    if missing:
        raise FormatError(f"PLY vertex element lacks {'/'.join(missing)}; properties are {names}")
    if any(isinstance(t, tuple) for _, t in props):
        raise FormatError("list properties on 'vertex' are not supported")
    row = np.dtype([(n, "<" + t) for n, t in props])

    if fmt == "binary_little_endian":
        need = count * row.itemsize
        if pos + need > len(data):
            raise FormatError(f"PLY declares {count} vertices ({need} bytes) but only "
                              f"{len(data) - pos} bytes follow the header")
        table = np.frombuffer(data, dtype=row, count=count, offset=pos)
    else:
        lines = data[pos:].split(b"\n")
        if len(lines) < count or (count and not lines[count - 1].strip()):
            raise FormatError(f"PLY declares {count} vertices but fewer lines follow the header")
        table = np.empty(count, dtype=row)
        for i in range(count):
            vals = lines[i].split()
            if len(vals) < len(names):
                raise FormatError(f"PLY vertex {i}: expected {len(names)} values, got {len(vals)}")
            for j, n in enumerate(names):
                try:
                    table[n][i] = float(vals[j]) if row[n].kind == "f" else int(vals[j])
                except ValueError as exc:
                    raise FormatError(f"PLY vertex {i}, property {n!r}: {exc}") from None

    pos_dtype = np.result_type(*(row[c] for c in "xyz"), dtype)
    positions = np.stack([table["x"], table["y"], table["z"]], axis=1).astype(pos_dtype)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([table[c] for c in ("red", "green", "blue")], axis=1).astype(np.float64) / 255.0
    return PointCloud.from_positions(positions, n_features=n_features, colors=colors, rng=rng,
                                     dtype=pos_dtype)


def _fmt_float(x, dtype):
    if dtype == np.float32:
        return np.format_float_scientific(np.float32(x), unique=True)
    return repr(float(x))


def write_ply(path, cloud_or_positions, colors=None, binary=True):
    """Write positions (and optional u8 colors) as PLY; the float width follows the input."""
    pos = cloud_or_positions.positions if isinstance(cloud_or_positions, PointCloud) else cloud_or_positions
    pos = np.asarray(pos)
    if pos.dtype not in (np.float32, np.float64):
        pos = pos.astype(np.float64)
    ptype = "float" if pos.dtype == np.float32 else "double"
    n = pos.shape[0]
    fields = [("x", pos.dtype), ("y", pos.dtype), ("z", pos.dtype)]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise ValueError(f"colors must be {n} x 3, got {colors.shape}")
        if colors.dtype != np.uint8:
            colors = np.clip(np.floor(np.asarray(colors, np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)
        fields += [("red", np.uint8), ("green", np.uint8), ("blue", np.uint8)]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {ptype} {c}" for c in "xyz"]
    if colors is not None:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            table = np.empty(n, dtype=np.dtype([(name, np.dtype(t).newbyteorder("<")) for name, t in fields]))
            for j, c in enumerate("xyz"):
                table[c] = pos[:, j]
            if colors is not None:
                for j, c in enumerate(("red", "green", "blue")):
                    table[c] = colors[:, j]
            fh.write(table.tobytes())
        else:
            out = []
            for i in range(n):
                vals = [_fmt_float(v, pos.dtype) for v in pos[i]]
                if colors is not None:
                    vals += [str(int(c)) for c in colors[i]]
                out.append(" ".join(vals))
            fh.write(("\n".join(out) + ("\n" if out else "")).encode("ascii"))


# ---------------------------------------------------------------------------
# cameras

MIN_IMAGE_SIZE = 8
_CAMERA_KEYS = ("image", "width", "height", "fx", "fy", "cx", "cy", "q", "t")


def camera_to_record(camera: Camera, image=None):
    rec = {
        "image": image, "width": camera.width, "height": camera.height,
        "fx": float(camera.fx), "fy": float(camera.fy), "cx": float(camera.cx), "cy": float(camera.cy),
        "q": [float(v) for v in camera.q], "t": [float(v) for v in camera.t],
        "exposure": float(camera.exposure), "wb": [float(v) for v in camera.wb],
    }
    return rec


def camera_from_record(rec, index=0):
    missing = [k for k in _CAMERA_KEYS if k not in rec]
    if missing:
        raise FormatError(f"camera {index}: missing fields {missing}")
    q = np.asarray(rec["q"], dtype=np.float64)
    t = np.asarray(rec["t"], dtype=np.float64)
    if q.shape != (4,) or t.shape != (3,):
        raise FormatError(f"camera {index}: q needs 4 and t needs 3 components")
    if not (rec["fx"] > 0 and rec["fy"] > 0):
        raise FormatError(f"camera {index}: focal lengths must be positive "
                          f"(fx={rec['fx']}, fy={rec['fy']})")
    if not (int(rec["width"]) >= MIN_IMAGE_SIZE and int(rec["height"]) >= MIN_IMAGE_SIZE):
        raise FormatError(f"camera {index}: image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, "
                          f"got {rec['width']}x{rec['height']}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-3:
        warnings.warn(f"camera {index}: quaternion norm {norm:.6f} is not 1; normalizing", stacklevel=3)
    try:
        return Camera(rec["fx"], rec["fy"], rec["cx"], rec["cy"], rec["width"], rec["height"], q, t,
                      exposure=float(rec.get("exposure", 0.0)), wb=tuple(rec.get("wb", (1.0, 1.0))))
    except SceneError as exc:
        raise FormatError(f"camera {index}: {exc}") from None


def read_cameras(path, load_images=False):
    """Read the camera JSON list into a :class:`FrameSet` (every 8th frame is a test frame)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "cameras" in doc:
        doc = doc["cameras"]
    if not isinstance(doc, list):
        raise FormatError(f"{path}: expected a list of camera records")
    frames = []
    for i, rec in enumerate(doc):
        if not isinstance(rec, dict):
            raise FormatError(f"camera {i}: expected an object")
        cam = camera_from_record(rec, i)
        image = None
        name = rec.get("image")
        if load_images and name:
            img_path = Path(name) if os.path.isabs(name) else path.parent / name
            image = read_image(img_path)
            if image.shape[1:] != (cam.height, cam.width):
                raise FormatError(f"camera {i}: image {name} is {image.shape[2]}x{image.shape[1]}, "
                                  f"camera says {cam.width}x{cam.height}")
        frames.append(Frame(cam, name, image))
    return FrameSet(frames)


def write_cameras(path, frames):
    """Write a :class:`FrameSet` (or a list of cameras) as camera JSON."""
    if isinstance(frames, FrameSet):
        recs = [camera_to_record(f.camera, f.image_path) for f in frames.frames]
    else:
        recs = [camera_to_record(c, None) for c in frames]
    Path(path).write_text(json.dumps(recs, indent=1))


# ---------------------------------------------------------------------------
# images

def to_bytes(rgb):
    """Quantize (3, H, W) values in [0, 1] to uint8 (H, W, 3), rounding half up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {rgb.shape}")
    q = np.floor(np.clip(np.nan_to_num(rgb), 0.0, 1.0) * 255.0 + 0.5)
    return np.ascontiguousarray(q.astype(np.uint8).transpose(1, 2, 0))


def write_image(path, rgb):
    """Write an 8-bit PNG (PPM when the suffix is .ppm or Pillow is unavailable)."""
    data = to_bytes(rgb)
    path = Path(path)
    try:
        if path.suffix.lower() in (".ppm", ".pnm"):
            raise ImportError
        from PIL import Image
    except ImportError:
        h, w, _ = data.shape
        try:
            with open(path, "wb") as fh:
                fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
                fh.write(data.tobytes())
        except OSError as exc:
            raise OSError(f"cannot write image {path}: {exc}") from exc
        return path
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
    return path


def read_image(path):
    """Read an 8-bit RGB image as float (3, H, W) in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        raw = path.read_bytes()
        parts = raw.split(maxsplit=4)
        if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
            raise FormatError(f"{path}: only binary 8-bit PPM (P6) is supported")
        w, h = int(parts[1]), int(parts[2])
        body = parts[4]
        if len(body) < w * h * 3:
            raise FormatError(f"{path}: truncated PPM body")
        arr = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"TRIPSCKPT"
CHECKPOINT_VERSION = 1
_MAX_NDIM = 8


class CheckpointError(FormatError):
    pass


def save_checkpoint(path, header: dict, arrays: dict):
    """Write a checkpoint.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header, u32 array
    count, then per array a u16 name length, the name, a u8 rank, u64 dims and
    the float32 little-endian data. A trailing u64 holds the byte count that
    precedes it, so truncation is detected.
    """
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body += struct.pack("<I", len(hdr)) + hdr
    body += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        key = name.encode("utf-8")
        body += struct.pack("<H", len(key)) + key
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<Q", len(body))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(body))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(header, arrays)``; raises :class:`CheckpointError` on any inconsistency."""
    data = Path(path).read_bytes()
    size = len(data)
    if size < len(CHECKPOINT_MAGIC) + 8 + 8 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (trailer,) = struct.unpack_from("<Q", data, size - 8)
    if trailer != size - 8:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint "
                              f"(length field {trailer}, actual {size - 8})")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    end = size - 8

    def take(n):
        nonlocal off
        if n < 0 or off + n > end:
            raise CheckpointError(f"{path}: field at byte {off} overruns the file")
        chunk = data[off:off + n]
        off += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        if ndim > _MAX_NDIM:
            raise CheckpointError(f"{path}: array {name!r} has rank {ndim}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        nbytes = 4 * int(np.prod(shape, dtype=np.uint64))
        arrays[name] = np.frombuffer(take(nbytes), dtype="<f4").reshape(shape).copy()
    if off != end:
        raise CheckpointError(f"{path}: {end - off} unexpected bytes after the last array")
    return header, arrays


def model_state(model):
    """Checkpoint header and arrays for a :class:`~trips.pipeline.SplatModel`."""
    header = {
        "config": model.config.to_dict(),
        "epoch": int(model.epoch),
        "n_points": int(model.n_points),
        "groups": {p.name: p.group for p in model.store},
        "learning_rates": dict(model.store.learning_rates),
        "cameras": [camera_to_record(c) for c in model.cameras],
    }
    arrays = {p.name: p.value for p in model.store}
    return header, arrays


def save_model(path, model):
    model.apply_pose_updates()
    save_checkpoint(path, *model_state(model))


def apply_state(model, header, arrays):
    """Copy checkpoint contents into ``model`` after checking every shape first."""
    n_ckpt = int(header.get("n_points", -1))
    if n_ckpt != model.n_points:
        raise CheckpointError(f"checkpoint has {n_ckpt} points but the model has {model.n_points}")
    names = set(model.store.names())
    if set(arrays) != names:
        extra, missing = sorted(set(arrays) - names), sorted(names - set(arrays))
        raise CheckpointError(f"checkpoint entries differ from the model (extra {extra}, missing {missing})")
    for name, arr in arrays.items():
        if model.store.value(name).shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape}, model {model.store.value(name).shape}")
    cams = header.get("cameras", [])
    if len(cams) != len(model.cameras):
        raise CheckpointError(f"checkpoint has {len(cams)} cameras, model has {len(model.cameras)}")
    for name, arr in arrays.items():
        model.store.value(name)[...] = arr
    model.cameras = [camera_from_record(r, i) for i, r in enumerate(cams)]
    model.epoch = int(header.get("epoch", 0))
    return model


def load_model(path, into=None):
    """Load a checkpoint into ``into`` or into a freshly built model."""
    from .pipeline import ModelConfig, SplatModel

    header, arrays = load_checkpoint(path)
    if into is not None:
        return apply_state(into, header, arrays)
    config = ModelConfig(**header["config"])
    cameras = [camera_from_record(r, i) for i, r in enumerate(header["cameras"])]
    model = SplatModel.from_arrays(config, cameras, arrays, header["groups"],
                                   learning_rates=header.get("learning_rates"))
    model.epoch = int(header.get("epoch", 0))
    return model


# ---------------------------------------------------------------------------
# metrics

METRIC_COLUMNS = ("epoch", "loss", "psnr", "ssim", "ms_raster", "ms_net", "ms_tonemap")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.get(c, "") if isinstance(r, dict) else getattr(r, c) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({k: (int(v) if k == "epoch" else float(v) if v != "" else float("nan"))
                        for k, v in r.items()})
        return out
