"""File formats: the flat tensor container (FTC), key=value configs, splat PLY
export and PNG previews."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FTC_MAGIC = b"FTC1"
# 0 is the only code other tools must understand; the rest carry metadata and optimizer counters
DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3, torch.int32: 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1", 4: "<i4"}


class FormatError(ValueError):
    pass


def encode_ftc(tensors: Mapping[str, torch.Tensor]) -> bytes:
    parts = [FTC_MAGIC]
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name!r}")
        code = DTYPE_CODES[t.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.numpy().astype(NUMPY_DTYPES[code], copy=False).tobytes())
    return b"".join(parts)


def decode_ftc(data: bytes) -> dict[str, torch.Tensor]:
    if data[:4] != FTC_MAGIC:
        raise FormatError("not an FTC1 container")
    out, pos = {}, 4
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            if code not in NUMPY_DTYPES:
                raise FormatError(f"unknown dtype code {code} for {name!r}")
            dt = np.dtype(NUMPY_DTYPES[code])
            count = int(np.prod(dims)) if rank else 1
            nbytes = count * dt.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"truncated data for {name!r}")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(dims)
            pos += nbytes
            out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    except struct.error as exc:
        raise FormatError(f"truncated FTC header: {exc}") from exc
    return out


def write_ftc(path, tensors: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(encode_ftc(tensors))


def read_ftc(path) -> dict[str, torch.Tensor]:
    return decode_ftc(Path(path).read_bytes())


def text_tensor(text: str) -> torch.Tensor:
    return torch.tensor(list(text.encode("utf-8")), dtype=torch.uint8)


def tensor_text(t: torch.Tensor) -> str:
    return bytes(t.tolist()).decode("utf-8")


# ---- key=value -----------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def format_kv(values: Mapping[str, object]) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_kv(path, values: Mapping[str, object]) -> None:
    Path(path).write_text(format_kv(values), encoding="utf-8")


# ---- splat PLY ---------------------------------------------------------

SH_C0 = 0.28209479177387814
PLY_PROPERTIES = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
                  + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])


def encode_ply(cloud) -> bytes:
    """Binary little-endian PLY in the layout common splat viewers read: SH DC
    color, logit opacity, log scale, (w, x, y, z) rotation."""
    n = len(cloud)
    pos = cloud.positions.detach().double()
    eps = 1e-6
    opac = cloud.opacities.detach().double().clamp(eps, 1 - eps)
    cols = [
        pos,
        torch.zeros(n, 3, dtype=torch.float64),
        (cloud.colors.detach().double() - 0.5) / SH_C0,
        torch.log(opac / (1 - opac))[:, None],
        torch.log(cloud.scales.detach().double()),
        cloud.rotations.detach().double(),
    ]
    body = torch.cat(cols, dim=1).numpy().astype("<f4").tobytes()
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + body


def write_ply(path, cloud) -> None:
    Path(path).write_bytes(encode_ply(cloud))


def read_ply(path):
    """Inverse of :func:`write_ply` (lossy to float32)."""
    from .splat import GaussianCloud

    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    props = [h.split()[-1] for h in header if h.startswith("property")]
    arr = torch.from_numpy(np.frombuffer(data, dtype="<f4", offset=end).reshape(n, len(props)).astype(np.float32))
    col = {p: arr[:, i] for i, p in enumerate(props)}
    pos = torch.stack([col["x"], col["y"], col["z"]], 1)
    colors = torch.stack([col[f"f_dc_{i}"] for i in range(3)], 1) * SH_C0 + 0.5
    opac = torch.sigmoid(col["opacity"])
    scales = torch.exp(torch.stack([col[f"scale_{i}"] for i in range(3)], 1))
    rots = torch.stack([col[f"rot_{i}"] for i in range(4)], 1)
    return GaussianCloud(pos, scales, rots, opac, colors)


# ---- PNG -----------------------------------------------------------------

def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) float image in [0, 1] to an 8-bit HWC array. (H, W, 3) input
    is accepted when H != 3."""
    img = image.detach().cpu().double()
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.permute(1, 2, 0)
    return (img.clamp(0, 1) * 255).round().to(torch.uint8).numpy()


def save_png(path, image: torch.Tensor) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)


def load_png(path) -> torch.Tensor:
    """PNG to a (3, H, W) float tensor in [0, 1]."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()
