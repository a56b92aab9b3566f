"""Volume I/O: a minimal single-file NIfTI-1 (``.nii``) reader and writer,
plus a raw-blob format with a JSON descriptor.

Only uncompressed ``n+1`` files with uint8, int16 or float32 voxels are
handled. Voxel axes i, j, k map to H, W, D in file order; the affine is
ignored, so no reorientation ever happens.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MIN_VOX_OFFSET = 352

# code -> (numpy dtype char, bitpix)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32)}
DTYPE_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}


class NiftiError(ValueError):
    pass


# (name, struct format, byte offset)
_FIELDS = [
    ("sizeof_hdr", "i", 0),
    ("dim", "8h", 40),
    ("intent_p", "3f", 56),
    ("intent_code", "h", 68),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("slice_start", "h", 74),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("xyzt_units", "B", 123),
    ("descrip", "80s", 148),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("magic", "4s", 344),
]


@dataclass
class NiftiHeader:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = 16
    bitpix: int = 32
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    vox_offset: float = float(MIN_VOX_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    magic: bytes = b"n+1\0"
    xyzt_units: int = 2  # millimetres
    descrip: bytes = b""
    endian: str = "<"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.dim[1:4])

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in self.pixdim[1:4])


@dataclass
class NiftiVolume:
    header: NiftiHeader
    voxels: np.ndarray                # [H, W, D], scaling applied
    spacing: tuple = field(default=(1.0, 1.0, 1.0))


def _unpack(buf: bytes, endian: str) -> dict:
    out = {}
    for name, fmt, off in _FIELDS:
        vals = struct.unpack_from(endian + fmt, buf, off)
        out[name] = vals[0] if len(vals) == 1 else tuple(vals)
    return out


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise NiftiError(f"header truncated: {len(buf)} bytes")
    endian = None
    for e in ("<", ">"):
        if struct.unpack_from(e + "i", buf, 0)[0] == HEADER_SIZE:
            endian = e
            break
    if endian is None:
        raise NiftiError(f"sizeof_hdr is {struct.unpack_from('<i', buf, 0)[0]} in either byte order, not 348")
    f = _unpack(buf, endian)
    magic = f["magic"]
    if magic == b"ni1\0":
        raise NiftiError("two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\0":
        raise NiftiError(f"bad magic {magic!r}")
    dim = f["dim"]
    if dim[0] not in (3, 4):
        raise NiftiError(f"dim[0] = {dim[0]}; only 3-d volumes are supported")
    if any(n <= 0 for n in dim[1:dim[0] + 1]):
        raise NiftiError(f"non-positive extent in dim {dim}")
    if dim[0] == 4 and dim[4] != 1:
        raise NiftiError("4-d series with more than one volume are not supported")
    if f["datatype"] not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {f['datatype']}")
    if f["bitpix"] != DATATYPES[f["datatype"]][1]:
        raise NiftiError(f"bitpix {f['bitpix']} inconsistent with datatype {f['datatype']}")
    if f["vox_offset"] < MIN_VOX_OFFSET:
        raise NiftiError(f"vox_offset {f['vox_offset']} < {MIN_VOX_OFFSET}")
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE, dim=dim, datatype=f["datatype"], bitpix=f["bitpix"],
        pixdim=f["pixdim"], vox_offset=f["vox_offset"], scl_slope=f["scl_slope"],
        scl_inter=f["scl_inter"], magic=magic, xyzt_units=f["xyzt_units"],
        descrip=f["descrip"].rstrip(b"\0"), endian=endian,
    )


def read_nifti(path) -> NiftiVolume:
    path = Path(path)
    if path.suffix == ".gz":
        raise NiftiError("compressed NIfTI is not supported; decompress first")
    with open(path, "rb") as fh:
        hdr = parse_header(fh.read(MIN_VOX_OFFSET))
        fh.seek(int(hdr.vox_offset))
        raw = fh.read()
    h, w, d = hdr.shape
    dt = np.dtype(hdr.endian + DATATYPES[hdr.datatype][0])
    need = h * w * d * dt.itemsize
    if len(raw) < need:
        raise NiftiError(f"data section truncated: {len(raw)} of {need} bytes")
    if len(raw) > need:
        raise NiftiError(f"data section has {len(raw) - need} trailing bytes; header/data size mismatch")
    # NIfTI stores i fastest, hence Fortran order
    vox = np.frombuffer(raw, dtype=dt).reshape((h, w, d), order="F")
    slope = hdr.scl_slope if hdr.scl_slope not in (0.0,) and np.isfinite(hdr.scl_slope) else 1.0
    inter = hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0
    vox = vox.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        vox = (vox.astype(np.float64) * slope + inter).astype(np.float32)
    return NiftiVolume(hdr, np.ascontiguousarray(vox), hdr.spacing)


def write_nifti(vol: NiftiVolume | np.ndarray, path, spacing=None, mask: bool | None = None) -> None:
    """Write float32 (or uint8 when ``mask``) single-file NIfTI-1, little-endian."""
    data = vol.voxels if isinstance(vol, NiftiVolume) else np.asarray(vol)
    if spacing is None:
        spacing = vol.spacing if isinstance(vol, NiftiVolume) else (1.0, 1.0, 1.0)
    if data.ndim != 3:
        raise NiftiError(f"expected a 3-d volume, got shape {data.shape}")
    if mask is None:
        mask = data.dtype in (np.uint8, np.bool_)
    if mask:
        if not np.isin(data, (0, 1)).all():
            raise NiftiError("mask volumes must be binary")
        arr = data.astype("<u1")
    else:
        arr = data.astype("<f4")
    code = 2 if mask else 16
    bitpix = DATATYPES[code][1]
    buf = bytearray(MIN_VOX_OFFSET)
    h, w, d = data.shape
    values = {
        "sizeof_hdr": HEADER_SIZE,
        "dim": (3, h, w, d, 1, 1, 1, 1),
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0,
        "datatype": code,
        "bitpix": bitpix,
        "slice_start": 0,
        "pixdim": (1.0, *[float(s) for s in spacing], 0.0, 0.0, 0.0, 0.0),
        "vox_offset": float(MIN_VOX_OFFSET),
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "xyzt_units": 2,
        "descrip": b"srmamba",
        "qform_code": 0,
        "sform_code": 0,
        "magic": b"n+1\0",
    }
    for name, fmt, off in _FIELDS:
        v = values[name]
        struct.pack_into("<" + fmt, buf, off, *(v if isinstance(v, tuple) else (v,)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))
        fh.write(arr.tobytes(order="F"))


# --------------------------------------------------------------------------
# Raw + JSON volumes: ``<stem>.bin`` holds little-endian voxels in C order,
# ``<stem>.json`` holds {"shape": [H, W, D], "dtype": "f32", "spacing": [...]}.

RAW_DTYPES = {"u8": "<u1", "i16": "<i2", "f32": "<f4"}


def read_raw_volume(path) -> NiftiVolume:
    path = Path(path)
    meta_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    try:
        import json

        meta = json.loads(meta_path.read_text())
        shape = tuple(int(n) for n in meta["shape"])
        dt = np.dtype(RAW_DTYPES[meta.get("dtype", "f32")])
    except (KeyError, ValueError, TypeError) as e:
        raise NiftiError(f"{meta_path}: bad raw volume descriptor ({e})") from None
    if len(shape) != 3 or min(shape) <= 0:
        raise NiftiError(f"{meta_path}: expected three positive extents, got {shape}")
    spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
    if len(spacing) != 3 or min(spacing) <= 0:
        raise NiftiError(f"{meta_path}: spacing must be three positive values")
    raw = blob_path.read_bytes()
    need = int(np.prod(shape)) * dt.itemsize
    if len(raw) != need:
        raise NiftiError(f"{blob_path}: {len(raw)} bytes, expected {need}")
    vox = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float32)
    hdr = NiftiHeader(dim=(3, *shape, 1, 1, 1, 1), pixdim=(1.0, *spacing, 0.0, 0.0, 0.0, 0.0))
    return NiftiVolume(hdr, vox, spacing)


def write_raw_volume(vol: NiftiVolume | np.ndarray, path, spacing=None, mask: bool | None = None) -> None:
    import json

    path = Path(path)
    data = vol.voxels if isinstance(vol, NiftiVolume) else np.asarray(vol)
    if spacing is None:
        spacing = vol.spacing if isinstance(vol, NiftiVolume) else (1.0, 1.0, 1.0)
    if mask is None:
        mask = data.dtype in (np.uint8, np.bool_)
    if mask and not np.isin(data, (0, 1)).all():
        raise NiftiError("mask volumes must be binary")
    name = "u8" if mask else "f32"
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(data, dtype=RAW_DTYPES[name]).tobytes())
    path.with_suffix(".json").write_text(json.dumps(
        {"shape": list(data.shape), "dtype": name, "spacing": [float(s) for s in spacing]}))


def _is_raw(path: Path) -> bool:
    return path.suffix in (".json", ".bin")


def read_volume(path) -> NiftiVolume:
    """``.nii`` through :func:`read_nifti`, ``.json``/``.bin`` as a raw volume."""
    path = Path(path)
    return read_raw_volume(path) if _is_raw(path) else read_nifti(path)


def write_volume(vol, path, spacing=None, mask: bool | None = None) -> None:
    path = Path(path)
    (write_raw_volume if _is_raw(path) else write_nifti)(vol, path, spacing=spacing, mask=mask)
