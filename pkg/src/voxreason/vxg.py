"""File formats: VXG1 voxel-grid container and P6 PPM images.

VXG1 layout (little-endian): magic "VXG1", u32 dims x/y/z, u32 channel
count, f64 voxel size, f64[3] origin, then channel-major f32 payload
(channel outermost, then x, y, z in C order).
"""

import struct

import numpy as np

MAGIC = b"VXG1"


class FormatError(ValueError):
    pass


def write_vxg(path, values, voxel_size, origin):
    """values: (X, Y, Z, C) array; stored as f32."""
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[..., None]
    X, Y, Z, C = values.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", X, Y, Z, C))
        f.write(struct.pack("<d", float(voxel_size)))
        f.write(struct.pack("<3d", *[float(v) for v in origin]))
        payload = np.ascontiguousarray(values.transpose(3, 0, 1, 2), dtype="<f4")
        f.write(payload.tobytes())


def read_vxg(path):
    """-> (values (X, Y, Z, C) float64, voxel_size, origin (3,))."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        X, Y, Z, C = struct.unpack("<IIII", f.read(16))
        (voxel_size,) = struct.unpack("<d", f.read(8))
        origin = np.array(struct.unpack("<3d", f.read(24)))
        n = X * Y * Z * C
        data = f.read(4 * n)
        if len(data) != 4 * n:
            raise FormatError(f"{path}: truncated payload ({len(data)} of {4 * n} bytes)")
        raw = np.frombuffer(data, dtype="<f4")
    values = raw.reshape(C, X, Y, Z).transpose(1, 2, 3, 0).astype(np.float64)
    return values, voxel_size, origin


def write_ppm(path, rgb):
    """rgb: (H, W, 3) floats in [0, 1] -> binary P6, maxval 255."""
    img = np.clip(np.asarray(rgb), 0.0, 1.0)
    q = np.rint(img * 255.0).astype(np.uint8)
    H, W = q.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_ppm(path):
    """-> (H, W, 3) floats in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a P6 PPM")
    # header: magic, width, height, maxval separated by whitespace
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(int(data[i:j]))
        i = j
    i += 1  # single whitespace after maxval
    W, H, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pix = np.frombuffer(data[i : i + W * H * 3], dtype=np.uint8)
    if pix.size != W * H * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return pix.reshape(H, W, 3).astype(np.float64) / 255.0
