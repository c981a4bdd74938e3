"""Binary file formats: optical flow, depth maps, transform fields, images.

Formats are fixed-layout and little-endian unless the format itself says
otherwise (PFM encodes endianness in its scale field, PNG is big-endian).
Write-then-read reproduces array values bitwise at the stored precision.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .se3 import Se3
from .synth import Scene, SceneSpec, generate_scene

FLO_MAGIC = b"PIEH"
SE3F_MAGIC = b"SE3F"
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class FileFormatError(ValueError):
    """Input bytes do not match the expected file layout."""


# -- optical flow (.flo) ------------------------------------------------------

def write_flo(path, flow):
    """Two-channel float32 flow, interleaved (u, v) row-major."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be (H, W, 2)")
    h, w = flow.shape[:2]
    data = np.ascontiguousarray(flow, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path):
    raw = Path(path).read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise FileFormatError(f"bad flow magic {raw[:4]!r}")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FileFormatError(f"bad flow dimensions {w}x{h}")
    expect = 12 + 8 * h * w
    if len(raw) != expect:
        raise FileFormatError(f"flow payload is {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).copy()


# -- PFM (single-channel float) ------------------------------------------------

def write_pfm(path, data, scale=1.0):
    """Grayscale float32 map; negative scale marks little-endian storage."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("PFM payload must be a 2-d array")
    if scale == 0 or not np.isfinite(scale):
        raise ValueError("scale must be finite and nonzero")
    h, w = data.shape
    body = np.ascontiguousarray(np.flipud(data), dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{-abs(scale):.9g}\n".encode("ascii"))
        f.write(body.tobytes())


def read_pfm(path):
    """Returns (data, scale); data rows restored top-to-bottom."""
    raw = Path(path).read_bytes()

    def token(pos):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError("truncated PFM header")
        return raw[start:pos], pos

    kind, pos = token(0)
    if kind != b"Pf":
        raise FileFormatError(f"bad PFM magic {kind!r} (only grayscale 'Pf' supported)")
    wtok, pos = token(pos)
    htok, pos = token(pos)
    stok, pos = token(pos)
    w, h, scale = int(wtok), int(htok), float(stok)
    pos += 1  # single whitespace byte terminates the header
    dtype = "<f4" if scale < 0 else ">f4"
    count = h * w
    if len(raw) - pos != 4 * count:
        raise FileFormatError("PFM payload size mismatch")
    data = np.frombuffer(raw, dtype=dtype, offset=pos, count=count).reshape(h, w)
    return np.flipud(data).astype(np.float64), abs(scale)


# -- SE(3) field (.se3f) --------------------------------------------------------

def write_se3_field(path, T: Se3):
    """Per-pixel rigid transforms: quaternion wxyz then translation xyz, float64."""
    if len(T.shape) != 2:
        raise ValueError("only (H, W) transform fields are stored")
    h, w = T.shape
    body = np.concatenate([T.quat, T.t], axis=-1)
    with open(path, "wb") as f:
        f.write(SE3F_MAGIC)
        f.write(struct.pack("<ii", h, w))
        f.write(np.ascontiguousarray(body, dtype="<f8").tobytes())


def read_se3_field(path) -> Se3:
    raw = Path(path).read_bytes()
    if raw[:4] != SE3F_MAGIC:
        raise FileFormatError(f"bad field magic {raw[:4]!r}")
    h, w = struct.unpack_from("<ii", raw, 4)
    if h <= 0 or w <= 0:
        raise FileFormatError(f"bad field dimensions {h}x{w}")
    expect = 12 + 8 * 7 * h * w
    if len(raw) != expect:
        raise FileFormatError(f"field payload is {len(raw)} bytes, expected {expect}")
    body = np.frombuffer(raw, dtype="<f8", offset=12).reshape(h, w, 7)
    return Se3(body[..., :4].copy(), body[..., 4:].copy())


# -- PGM / PPM (8-bit images) ---------------------------------------------------

def write_pgm(path, gray):
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("PGM payload must be a 2-d uint8 array")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("PPM payload must be an (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb).tobytes())


def _read_pnm(path, magic, channels):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise FileFormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FileFormatError("only maxval 255 supported")
    pos += 1
    count = h * w * channels
    if len(raw) - pos != count:
        raise FileFormatError("image payload size mismatch")
    img = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=count)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return img.reshape(shape).copy()


def read_pgm(path):
    return _read_pnm(path, b"P5", 1)


def read_ppm(path):
    return _read_pnm(path, b"P6", 3)


# -- 16-bit PNG readers ----------------------------------------------------------
# Narrow decoder for the disparity/flow interchange profile: bit depth 16,
# grayscale or RGB, non-interlaced. Kept dependency-free on purpose; anything
# outside that profile is rejected rather than guessed at.

def _paeth(a, b, c):
    p = int(a) + int(b) - int(c)
    pa, pb, pc = abs(p - int(a)), abs(p - int(b)), abs(p - int(c))
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(decoded, h, stride, bpp):
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prior = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        ftype = decoded[pos]
        pos += 1
        line = np.frombuffer(decoded, dtype=np.uint8, offset=pos, count=stride).copy()
        pos += stride
        if ftype == 0:
            pass
        elif ftype == 1:
            for i in range(bpp, stride):
                line[i] = (int(line[i]) + int(line[i - bpp])) & 0xFF
        elif ftype == 2:
            line = (line.astype(np.uint16) + prior).astype(np.uint8)
        elif ftype == 3:
            for i in range(stride):
                a = int(line[i - bpp]) if i >= bpp else 0
                line[i] = (int(line[i]) + (a + int(prior[i])) // 2) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else np.uint8(0)
                c = prior[i - bpp] if i >= bpp else np.uint8(0)
                line[i] = (int(line[i]) + int(_paeth(a, prior[i], c))) & 0xFF
        else:
            raise FileFormatError(f"unknown PNG filter type {ftype}")
        out[y] = line
        prior = line
    return out


def read_png16(path):
    """Decode a 16-bit grayscale or RGB non-interlaced PNG to uint16 samples."""
    raw = Path(path).read_bytes()
    if raw[:8] != _PNG_SIGNATURE:
        raise FileFormatError("not a PNG file")
    pos = 8
    header = None
    idat = []
    while pos + 8 <= len(raw):
        length, ctype = struct.unpack_from(">I4s", raw, pos)
        pos += 8
        data = raw[pos : pos + length]
        pos += length + 4  # skip CRC
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            idat.append(data)
        elif ctype == b"IEND":
            break
    if header is None or not idat:
        raise FileFormatError("PNG missing IHDR or IDAT")
    w, h, depth, color, comp, filt, interlace = header
    if depth != 16 or color not in (0, 2) or comp != 0 or filt != 0 or interlace != 0:
        raise FileFormatError(
            f"unsupported PNG profile (depth={depth}, color={color}, interlace={interlace})"
        )
    channels = 1 if color == 0 else 3
    bpp = 2 * channels
    stride = bpp * w
    decoded = zlib.decompress(b"".join(idat))
    if len(decoded) != h * (stride + 1):
        raise FileFormatError("PNG pixel payload size mismatch")
    rows = _unfilter(decoded, h, stride, bpp)
    img = rows.reshape(h, w, bpp).view(">u2").astype(np.uint16)
    return img[..., 0] if channels == 1 else img.reshape(h, w, channels)


def read_kitti_disparity(path):
    """Disparity png16: value/256 px, zero marks missing. Returns (disp, valid)."""
    u = read_png16(path)
    if u.ndim != 2:
        raise FileFormatError("disparity PNG must be single-channel")
    valid = u > 0
    return u.astype(np.float64) / 256.0, valid


def read_kitti_flow(path):
    """Flow png16: (value - 2^15)/64 px in channels 0..1, channel 2 validity.

    Returns (flow (H, W, 2), valid).
    """
    u = read_png16(path)
    if u.ndim != 3:
        raise FileFormatError("flow PNG must be 3-channel")
    flow = (u[..., :2].astype(np.float64) - 32768.0) / 64.0
    return flow, u[..., 2] > 0


# -- scene directories ------------------------------------------------------------
# The JSON spec plus seed is the authoritative scene description; generation is
# deterministic, so loading regenerates the exact arrays. The binary siblings
# exist for inspection and interchange with other tools.

def save_scene(scene: Scene, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    doc = {
        "seed": int(scene.seed),
        "spec": {
            "height": spec.height,
            "width": spec.width,
            "fx": spec.fx,
            "fy": spec.fy,
            "cx": spec.cx,
            "cy": spec.cy,
            "num_objects": spec.num_objects,
            "depth_range": list(spec.depth_range),
            "motion_scale": spec.motion_scale,
            "min_object_pixels": spec.min_object_pixels,
        },
    }
    (outdir / "spec.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_pfm(outdir / "invdepth1.pfm", scene.invdepth1.d)
    write_pfm(outdir / "invdepth2.pfm", scene.invdepth2.d)
    # no-surface sentinel (-1) maps to 255 in the 8-bit artifact
    write_pgm(outdir / "labels1.pgm", np.where(scene.labels1 < 0, 255, scene.labels1).astype(np.uint8))
    write_pgm(outdir / "labels2.pgm", np.where(scene.labels2 < 0, 255, scene.labels2).astype(np.uint8))
    write_pgm(outdir / "meas_ok.pgm", np.where(scene.meas_ok, 255, 0).astype(np.uint8))
    write_pgm(outdir / "occluded.pgm", np.where(scene.occluded, 255, 0).astype(np.uint8))
    gt = scene.gt_flow()
    write_flo(outdir / "gt_flow.flo", gt[..., :2].astype(np.float32))
    write_pfm(outdir / "gt_dflow.pfm", gt[..., 2])
    write_se3_field(outdir / "gt_field.se3f", scene.gt_field())


def load_scene(indir) -> Scene:
    indir = Path(indir)
    path = indir / "spec.json"
    if not path.exists():
        raise FileFormatError(f"{indir} is not a scene directory (missing spec.json)")
    doc = json.loads(path.read_text())
    fields = dict(doc["spec"])
    fields["depth_range"] = tuple(fields["depth_range"])
    return generate_scene(SceneSpec(**fields), doc["seed"])
