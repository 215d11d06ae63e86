"""File formats: scenes, chunked scenes, dataset manifests, .flo flow, PLY points, PNG."""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .dataset import Dataset, Frame
from .scene import KIND_NAMES, Camera, ChunkedScene, MotionModel, Scene, param_count_per_gaussian, sh_coeff_count

SCENE_MAGIC = b"CDGS"
CHUNKED_MAGIC = b"CDGC"
FORMAT_VERSION = 1
# magic, version, kind, order, sh_degree, time-varying-scale flag, pad, count, t0, t1, extent
HEADER = struct.Struct("<4sHBHBBxQddd")
HEADER_SIZE = HEADER.size  # 44
CHUNK_HEADER = struct.Struct("<4sHHI")  # magic, version, reserved, chunk count
CHUNK_ENTRY = struct.Struct("<ddQQ")  # t_lo, t_hi, byte offset, byte length
FLO_MAGIC = 202021.25
FLO_INVALID = 1e9
DATA_ROOT_ENV = "CDGS_DATA_ROOT"


class DataError(ValueError):
    """Base class for malformed or missing input data."""


class SceneFormatError(DataError):
    pass


class BadMagicError(SceneFormatError):
    pass


class VersionMismatchError(SceneFormatError):
    pass


class TruncatedFileError(SceneFormatError):
    pass


class FlowFormatError(DataError):
    pass


class PlyFormatError(DataError):
    pass


class ImageFormatError(DataError):
    pass


class ManifestError(DataError):
    pass


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------- scenes

def _field_layout(model: MotionModel, sh_degree: int) -> list[tuple[str, tuple]]:
    layout = [("center", (3, model.n_coeffs)), ("rot", (4, 2)), ("log_scale", (3,))]
    if model.time_varying_scale:
        layout.append(("scale_slope", (3,)))
    layout += [("sh", (3, sh_coeff_count(sh_degree))), ("opacity_logit", ())]
    return layout


def scene_to_bytes(scene: Scene) -> bytes:
    m = scene.model
    header = HEADER.pack(SCENE_MAGIC, FORMAT_VERSION, m.code, m.order, scene.sh_degree,
                         int(m.time_varying_scale), len(scene), scene.time_range[0],
                         scene.time_range[1], scene.extent)
    n = len(scene)
    cols = [getattr(scene, name).reshape(n, int(np.prod(shape)))
            for name, shape in _field_layout(m, scene.sh_degree)]
    payload = np.concatenate(cols, axis=1).astype("<f4") if n else np.zeros((0,), "<f4")
    return header + payload.tobytes()


def scene_from_bytes(data: bytes) -> Scene:
    if len(data) < HEADER_SIZE:
        if data[:4] and data[:4] != SCENE_MAGIC[:len(data[:4])]:
            raise BadMagicError("not a scene file (bad magic)")
        raise TruncatedFileError(f"file is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header")
    magic, version, kind, order, sh_degree, tvs, count, t0, t1, extent = HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise BadMagicError(f"not a scene file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"scene format version {version}, expected {FORMAT_VERSION}")
    if kind not in KIND_NAMES:
        raise SceneFormatError(f"unknown motion kind code {kind}")
    try:
        model = MotionModel(KIND_NAMES[kind], order, bool(tvs))
        per = param_count_per_gaussian(model, sh_degree)
    except ValueError as e:
        raise SceneFormatError(f"invalid header: {e}") from None
    expected = HEADER_SIZE + count * per * 4
    if len(data) < expected:
        raise TruncatedFileError(f"payload holds {len(data) - HEADER_SIZE} bytes, header declares "
                                 f"{count} gaussians = {expected - HEADER_SIZE} bytes")
    if len(data) > expected:
        raise SceneFormatError(f"{len(data) - expected} trailing bytes after declared payload")
    flat = np.frombuffer(data, dtype="<f4", count=count * per, offset=HEADER_SIZE)
    flat = flat.reshape(count, per).astype(np.float64)
    fields, col = {}, 0
    for name, shape in _field_layout(model, sh_degree):
        size = int(np.prod(shape)) if shape else 1
        fields[name] = flat[:, col:col + size].reshape((count,) + shape)
        col += size
    fields.setdefault("scale_slope", np.zeros((count, 3)))
    return Scene(model, sh_degree, time_range=(t0, t1), extent=extent, **fields)


def save_scene(path, scene: Scene) -> int:
    """Write ``scene``; returns the file size in bytes."""
    data = scene_to_bytes(scene)
    _atomic_write(path, data)
    return len(data)


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())


def scene_file_size(n: int, model: MotionModel, sh_degree: int) -> int:
    return HEADER_SIZE + n * param_count_per_gaussian(model, sh_degree) * 4


def save_chunked(path, cs: ChunkedScene) -> int:
    records = [scene_to_bytes(s) for _, _, s in cs.chunks]
    offset = CHUNK_HEADER.size + CHUNK_ENTRY.size * len(records)
    index = []
    for (lo, hi, _), rec in zip(cs.chunks, records):
        index.append(CHUNK_ENTRY.pack(lo, hi, offset, len(rec)))
        offset += len(rec)
    data = CHUNK_HEADER.pack(CHUNKED_MAGIC, FORMAT_VERSION, 0, len(records)) + b"".join(index) + b"".join(records)
    _atomic_write(path, data)
    return len(data)


def chunked_from_bytes(data: bytes) -> ChunkedScene:
    if len(data) < CHUNK_HEADER.size:
        raise TruncatedFileError("chunked scene file shorter than its header")
    magic, version, _, n = CHUNK_HEADER.unpack_from(data)
    if magic != CHUNKED_MAGIC:
        raise BadMagicError(f"not a chunked scene file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"chunked format version {version}, expected {FORMAT_VERSION}")
    end_index = CHUNK_HEADER.size + n * CHUNK_ENTRY.size
    if len(data) < end_index:
        raise TruncatedFileError("chunk index table is truncated")
    chunks, expected_end = [], end_index
    for i in range(n):
        lo, hi, off, size = CHUNK_ENTRY.unpack_from(data, CHUNK_HEADER.size + i * CHUNK_ENTRY.size)
        if off + size > len(data):
            raise TruncatedFileError(f"chunk {i} extends past end of file")
        chunks.append((lo, hi, scene_from_bytes(data[off:off + size])))
        expected_end = max(expected_end, off + size)
    if len(data) != expected_end:
        raise SceneFormatError("chunked scene file has trailing bytes")
    try:
        return ChunkedScene(chunks)
    except ValueError as e:
        raise SceneFormatError(str(e)) from None


def load_chunked(path) -> ChunkedScene:
    return chunked_from_bytes(Path(path).read_bytes())


def load_any(path) -> Scene | ChunkedScene:
    """Load a scene or chunked scene, dispatching on the magic bytes."""
    data = Path(path).read_bytes()
    if data[:4] == CHUNKED_MAGIC:
        return chunked_from_bytes(data)
    return scene_from_bytes(data)


def save_any(path, scene: Scene | ChunkedScene) -> int:
    return save_chunked(path, scene) if isinstance(scene, ChunkedScene) else save_scene(path, scene)


# ------------------------------------------------------------------- flow

def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    """Middlebury .flo; returns (flow (H, W, 2), valid mask (H, W))."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: too short for a .flo header")
    magic = struct.unpack_from("<f", data)[0]
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad .flo magic {magic}")
    w, h = struct.unpack_from("<ii", data, 4)
    if w < 0 or h < 0 or len(data) != 12 + w * h * 8:
        raise FlowFormatError(f"{path}: size mismatch for {w}x{h} flow ({len(data)} bytes)")
    flow = np.frombuffer(data, "<f4", offset=12).reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.isfinite(flow) & (np.abs(flow) <= FLO_INVALID), axis=2)
    flow[~valid] = 0.0
    return flow, valid


def write_flo(path, flow: np.ndarray, valid: np.ndarray | None = None) -> None:
    """Write Middlebury .flo; pixels outside ``valid`` get the 1e10 unknown-flow sentinel."""
    flow = np.array(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be (H, W, 2)")
    if valid is not None:
        flow[~np.asarray(valid, bool)] = 1e10
    h, w = flow.shape[:2]
    _atomic_write(path, struct.pack("<fii", FLO_MAGIC, w, h) + flow.tobytes())


# -------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PointCloud(NamedTuple):
    positions: np.ndarray  # (M, 3)
    colors: np.ndarray  # (M, 3) in [0, 1]


def read_ply_points(path) -> PointCloud:
    """Vertex positions and colors from an ascii or binary little-endian PLY."""
    data = Path(path).read_bytes()
    if not data.startswith(b"ply"):
        raise PlyFormatError(f"{path}: missing 'ply' signature")
    end = data.find(b"end_header")
    if end < 0:
        raise PlyFormatError(f"{path}: no end_header")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()[1:]
    fmt, elements = None, []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyFormatError(f"{path}: unsupported format {' '.join(tok[1:])!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyFormatError(f"{path}: malformed element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError(f"{path}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyFormatError(f"{path}: malformed property line {line!r}")
        else:
            raise PlyFormatError(f"{path}: unexpected header line {line!r}")
    if fmt is None:
        raise PlyFormatError(f"{path}: missing format line")
    offset, rows = body_start, None
    text_lines = data[body_start:].decode("ascii", errors="replace").splitlines() if fmt == "ascii" else None
    line_pos = 0
    for name, count, props in elements:
        if name == "vertex":
            if any(t is None for _, t in props):
                raise PlyFormatError(f"{path}: list properties on vertices are not supported")
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            if fmt == "ascii":
                chunk = text_lines[line_pos:line_pos + count]
                if len(chunk) < count:
                    raise PlyFormatError(f"{path}: expected {count} vertices, found {len(chunk)}")
                try:
                    vals = np.array([[float(v) for v in ln.split()[:len(props)]] for ln in chunk])
                except ValueError:
                    raise PlyFormatError(f"{path}: non-numeric vertex data") from None
                if vals.size and vals.shape[1] != len(props):
                    raise PlyFormatError(f"{path}: vertex rows have too few values")
                rows = {p: vals[:, i] if count else np.zeros(0) for i, (p, _) in enumerate(props)}
            else:
                if offset + count * dtype.itemsize > len(data):
                    raise PlyFormatError(f"{path}: vertex data truncated")
                arr = np.frombuffer(data, dtype, count, offset)
                rows = {p: arr[p] for p, _ in props}
            break
        # skip an element that precedes the vertices
        if fmt == "ascii":
            line_pos += count
        elif any(t is None for _, t in props):
            raise PlyFormatError(f"{path}: cannot skip list element {name!r} before vertices")
        else:
            offset += count * sum(np.dtype(t).itemsize for _, t in props)
    if rows is None:
        raise PlyFormatError(f"{path}: no vertex element")
    if not all(k in rows for k in "xyz"):
        raise PlyFormatError(f"{path}: vertices need x, y and z")
    pos = np.stack([rows[k].astype(np.float64) for k in "xyz"], axis=1)
    if all(k in rows for k in ("red", "green", "blue")):
        types = dict(next(p for n, c, p in elements if n == "vertex"))
        col = np.stack([rows[k].astype(np.float64) for k in ("red", "green", "blue")], axis=1)
        if not types["red"].startswith("f"):
            col = col / float(np.iinfo(np.dtype(types["red"])).max)
    else:
        col = np.full_like(pos, 0.5)
    return PointCloud(pos, col)


def write_ply_points(path, positions, colors=None, binary: bool = True) -> None:
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}",
            "property float x", "property float y", "property float z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        c8 = np.clip(np.floor(np.asarray(colors) * 255 + 0.5), 0, 255).astype(np.uint8)
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode()
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        arr = np.zeros(n, dtype=fields)
        for i, k in enumerate("xyz"):
            arr[k] = pos[:, i]
        if colors is not None:
            for i, k in enumerate(("red", "green", "blue")):
                arr[k] = c8[:, i]
        body = arr.tobytes()
    else:
        rows = []
        for i in range(n):
            vals = [repr(float(np.float32(v))) for v in pos[i]]
            if colors is not None:
                vals += [str(int(v)) for v in c8[i]]
            rows.append(" ".join(vals))
        body = ("\n".join(rows) + ("\n" if rows else "")).encode()
    _atomic_write(path, header + body)


# ----------------------------------------------------------------- images

def quantize(img) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    a = quantize(img)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] not in (3, 4)):
        raise ImageFormatError(f"cannot write image of shape {a.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """8-bit image as floats in [0, 1]; (H, W), (H, W, 3) or (H, W, 4)."""
    try:
        im = Image.open(path)
    except OSError as e:
        raise ImageFormatError(f"{path}: {e}") from None
    with im:
        if im.mode in ("P", "PA"):
            im = im.convert("RGBA" if "transparency" in im.info or im.mode == "PA" else "RGB")
        elif im.mode == "LA":
            im = im.convert("RGBA")
        if im.mode not in ("L", "RGB", "RGBA"):
            raise ImageFormatError(f"{path}: unsupported bit depth / mode {im.mode!r}; need 8-bit")
        return np.asarray(im, dtype=np.float64) / 255.0


# -------------------------------------------------------------- manifests

@dataclass
class FrameRecord:
    image_path: Path
    time_index: int
    camera_id: str
    camera: Camera
    flow_fwd: Path | None = None
    flow_bwd: Path | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    frames: list[FrameRecord]
    n_times: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    aabb: np.ndarray | None = None
    init_points: Path | None = None

    def split(self, name: str) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == name]


def resolve_data_dir(path) -> Path:
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _resolve_file(root: Path, rel: str, what: str) -> Path:
    p = root / rel
    if p.exists():
        return p
    if not p.suffix and p.with_suffix(".png").exists():
        return p.with_suffix(".png")
    raise ManifestError(f"{what} not found: {p}")


def gl_to_cv_w2c(c2w) -> np.ndarray:
    """OpenGL camera-to-world (x right, y up, looking down -z) to our world-to-camera."""
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape == (3, 4):
        c2w = np.vstack([c2w, [0, 0, 0, 1]])
    if c2w.shape != (4, 4):
        raise ManifestError("transform_matrix must be 4x4")
    return np.linalg.inv(c2w @ np.diag([1.0, -1.0, -1.0, 1.0]))


def _intrinsics(src: dict, base: dict, W: int, H: int) -> tuple[float, float, float, float]:
    merged = {**base, **src}
    if "fl_x" in merged:
        fx = float(merged["fl_x"])
    elif "camera_angle_x" in merged:
        fx = 0.5 * W / math.tan(0.5 * float(merged["camera_angle_x"]))
    else:
        raise ManifestError("missing field 'camera_angle_x' (or 'fl_x')")
    if "fl_y" in merged:
        fy = float(merged["fl_y"])
    elif "camera_angle_y" in merged:
        fy = 0.5 * H / math.tan(0.5 * float(merged["camera_angle_y"]))
    else:
        fy = fx
    return fx, fy, float(merged.get("cx", W / 2)), float(merged.get("cy", H / 2))


def _manifest_files(root: Path) -> list[tuple[Path, str]]:
    if (root / "transforms.json").exists():
        return [(root / "transforms.json", "")]
    files = [(root / f"transforms_{s}.json", s) for s in ("train", "val", "test")
             if (root / f"transforms_{s}.json").exists()]
    if not files:
        raise ManifestError(f"no transforms.json or transforms_train.json in {root}")
    return files


def load_manifest(path) -> DatasetManifest:
    """Parse a NeRF-synthetic style manifest (directory or json file)."""
    path = resolve_data_dir(path)
    if path.is_file():
        root, sources = path.parent, [(path, "")]
    elif path.is_dir():
        root, sources = path, _manifest_files(path)
    else:
        raise ManifestError(f"dataset path does not exist: {path}")
    metas = []
    for file, split in sources:
        try:
            metas.append((json.loads(file.read_text()), split))
        except json.JSONDecodeError as e:
            raise ManifestError(f"{file}: invalid JSON ({e})") from None
    top = metas[0][0]
    raw = []
    for meta, split in metas:
        if "frames" not in meta or not isinstance(meta["frames"], list):
            raise ManifestError("missing field 'frames'")
        for i, fr in enumerate(meta["frames"]):
            for key in ("file_path", "transform_matrix"):
                if key not in fr:
                    raise ManifestError(f"frame {i}: missing field '{key}'")
            if "time" not in fr and "time_index" not in fr:
                raise ManifestError(f"frame {i}: missing field 'time'")
            raw.append((meta, fr, fr.get("split", split or "train")))
    if not raw:
        raise ManifestError("manifest has no frames")

    # timesteps: explicit indices, or the rank of each distinct time value
    if all("time_index" in fr for _, fr, _ in raw):
        idx = [int(fr["time_index"]) for _, fr, _ in raw]
    else:
        times = sorted({float(fr["time"]) for _, fr, _ in raw})
        rank = {t: i for i, t in enumerate(times)}
        idx = [rank[float(fr["time"])] for _, fr, _ in raw]
    n_times = int(top.get("n_times", max(idx) + 1))
    if sorted(set(idx)) != list(range(n_times)):
        raise ManifestError(f"timesteps are not contiguous 0..{n_times - 1}")
    by_cam: dict[str, set] = {}
    for (_, fr, _), i in zip(raw, idx):
        by_cam.setdefault(str(fr.get("camera_id", 0)), set()).add(i)
    for cid, s in by_cam.items():
        if sorted(s) != list(range(min(s), max(s) + 1)):
            raise ManifestError(f"camera {cid}: timesteps are not contiguous")

    cams_meta = top.get("cameras", {})
    records, size_cache = [], {}
    for (meta, fr, split), ti in zip(raw, idx):
        img_path = _resolve_file(root, fr["file_path"], "image")
        cid = str(fr.get("camera_id", 0))
        over = cams_meta.get(cid, {})
        base = {k: meta[k] for k in ("camera_angle_x", "camera_angle_y", "fl_x", "fl_y", "cx", "cy", "w", "h")
                if k in meta}
        merged = {**base, **over, **{k: fr[k] for k in ("fl_x", "fl_y", "cx", "cy") if k in fr}}
        if "w" in merged and "h" in merged:
            W, H = int(merged["w"]), int(merged["h"])
        else:
            if img_path not in size_cache:
                with Image.open(img_path) as im:
                    size_cache[img_path] = im.size
            W, H = size_cache[img_path]
        fx, fy, cx, cy = _intrinsics({}, merged, W, H)
        try:
            cam = Camera(W, H, fx, fy, cx, cy, gl_to_cv_w2c(fr["transform_matrix"]))
        except (ValueError, np.linalg.LinAlgError) as e:
            raise ManifestError(f"frame {fr['file_path']}: bad camera ({e})") from None
        flows = [(_resolve_file(root, fr[k], "flow file") if k in fr else None) for k in ("flow_fwd", "flow_bwd")]
        records.append(FrameRecord(img_path, ti, cid, cam, flows[0], flows[1], split))

    if "background" in top:
        bg = np.asarray(top["background"], dtype=np.float64)
    else:
        bg = np.ones(3) if top.get("white_background") else np.zeros(3)
    aabb = np.asarray(top["aabb"], dtype=np.float64) if "aabb" in top else None
    init = _resolve_file(root, top["init_points"], "init point cloud") if "init_points" in top else None
    return DatasetManifest(root, records, n_times, bg, aabb, init)


def _downscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    H, W = img.shape[:2]
    H2, W2 = H // factor, W // factor
    a = img[:H2 * factor, :W2 * factor]
    return a.reshape(H2, factor, W2, factor, *a.shape[2:]).mean(axis=(1, 3))


def _scaled_camera(cam: Camera, factor: int) -> Camera:
    if factor == 1:
        return cam
    return Camera(cam.width // factor, cam.height // factor, cam.fx / factor, cam.fy / factor,
                  cam.cx / factor, cam.cy / factor, cam.world_to_camera)


def load_frame(rec: FrameRecord, background, downscale: int = 1) -> Frame:
    img = read_image(rec.image_path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.shape[2] == 4:
        a = img[:, :, 3:]
        img = img[:, :, :3] * a + np.asarray(background).reshape(1, 1, 3) * (1 - a)
    if img.shape[:2] != (rec.camera.height, rec.camera.width):
        raise ManifestError(f"{rec.image_path}: image is {img.shape[1]}x{img.shape[0]}, camera says "
                            f"{rec.camera.width}x{rec.camera.height}")
    f = Frame(_downscale(img, downscale), _scaled_camera(rec.camera, downscale), rec.time_index,
              name=rec.image_path.stem)
    if rec.flow_fwd is not None and rec.flow_bwd is not None:
        ff, mf = read_flo(rec.flow_fwd)
        fb, mb = read_flo(rec.flow_bwd)
        if downscale > 1:
            ff, fb = _downscale(ff, downscale) / downscale, _downscale(fb, downscale) / downscale
            mf = _downscale(mf.astype(float), downscale) == 1.0
            mb = _downscale(mb.astype(float), downscale) == 1.0
        f.flow_fwd, f.flow_bwd, f.mask_fwd, f.mask_bwd = ff, fb, mf, mb
    return f


def load_dataset(path, downscale: int = 1, split_test: str = "test") -> Dataset:
    """Manifest plus images and flows, ready for training."""
    man = load_manifest(path)
    cam_ids = {c: i for i, c in enumerate(sorted({r.camera_id for r in man.frames}))}
    train, test = [], []
    for rec in man.frames:
        f = load_frame(rec, man.background, downscale)
        f.camera_id = cam_ids[rec.camera_id]
        (test if rec.split == split_test else train).append(f)
    pts = cols = None
    if man.init_points is not None:
        pts, cols = read_ply_points(man.init_points)
    return Dataset(train, man.n_times, man.background, man.aabb, test, pts, cols)


def write_manifest(root, dataset: Dataset, flows: bool = True) -> Path:
    """Write ``dataset`` as images + .flo files + transforms.json under ``root``."""
    root = Path(root)
    frames = []
    for split, items in (("train", dataset.frames), ("test", dataset.test_frames)):
        for i, f in enumerate(items):
            name = f"{split}/{f.name or f'{i:04d}'}"
            write_image(root / f"{name}.png", f.image)
            c2w = np.linalg.inv(f.camera.world_to_camera) @ np.diag([1.0, -1.0, -1.0, 1.0])
            rec = {"file_path": f"{name}.png", "time_index": f.time_index, "camera_id": f.camera_id,
                   "transform_matrix": c2w.tolist(), "split": split,
                   "fl_x": f.camera.fx, "fl_y": f.camera.fy, "cx": f.camera.cx, "cy": f.camera.cy}
            if flows and f.has_flow:
                write_flo(root / f"{name}_fwd.flo", f.flow_fwd, f.mask_fwd)
                write_flo(root / f"{name}_bwd.flo", f.flow_bwd, f.mask_bwd)
                rec["flow_fwd"], rec["flow_bwd"] = f"{name}_fwd.flo", f"{name}_bwd.flo"
            frames.append(rec)
    f0 = dataset.frames[0].camera
    meta = {"w": f0.width, "h": f0.height, "n_times": dataset.n_times,
            "background": dataset.background.tolist(), "frames": frames}
    if dataset.bbox is not None:
        meta["aabb"] = np.asarray(dataset.bbox).tolist()
    path = root / "transforms.json"
    _atomic_write(path, json.dumps(meta, indent=1).encode())
    return path
