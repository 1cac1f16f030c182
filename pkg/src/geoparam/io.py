"""On-disk formats: geomodels, ensembles, PCA bases, latent matrices, images.

All binary payloads are little-endian. Geomodel files carry a JSON header so
they stay self-describing; ensembles are numbered files plus a manifest.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .grid import Geomodel, GridDims
from .pca import PcaBasis

_GEO_MAGIC = b"GEO1"
_PCA_MAGIC = b"PCA1"
_XI_MAGIC = b"XI1"

# facies palette used by the map exports (mud/channel/levee)
PALETTE_RGB = {0: (40, 70, 220), 1: (220, 50, 40), 2: (40, 180, 70)}
PALETTE_GRAY = {0: 0, 1: 255, 2: 128}


# ---------------------------------------------------------------------------
# geomodels
# ---------------------------------------------------------------------------

def save_geomodel(path, model: Geomodel) -> None:
    header = {
        "nx": model.dims.nx,
        "ny": model.dims.ny,
        "nz": model.dims.nz,
        "dx": model.dims.dx,
        "dy": model.dims.dy,
        "dz": model.dims.dz,
        "kind": model.kind,
        "field_name": model.field_name,
    }
    with open(path, "wb") as fh:
        fh.write(_GEO_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(model.flat.astype("<f4").tobytes())


def load_geomodel(path) -> Geomodel:
    with open(path, "rb") as fh:
        if fh.read(4) != _GEO_MAGIC:
            raise ValueError(f"{path}: not a geomodel file")
        header = json.loads(fh.readline().decode("utf-8"))
        dims = GridDims(
            header["nx"], header["ny"], header["nz"],
            header["dx"], header["dy"], header["dz"],
        )
        values = np.frombuffer(fh.read(4 * dims.n_cells), dtype="<f4").astype(np.float64)
    return Geomodel(dims, values, header["kind"], header["field_name"])


def save_ensemble(directory, models: list[Geomodel], prefix: str = "model") -> Path:
    """Numbered geomodel files plus manifest.json; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(models):
        name = f"{prefix}_{i:05d}.geo"
        save_geomodel(directory / name, m)
        names.append(name)
    manifest = {
        "count": len(models),
        "prefix": prefix,
        "files": names,
        "kind": models[0].kind if models else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_ensemble(directory) -> list[Geomodel]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [load_geomodel(directory / name) for name in manifest["files"]]


# ---------------------------------------------------------------------------
# PCA basis
# ---------------------------------------------------------------------------

def save_pca_basis(path, basis: PcaBasis) -> None:
    header = {
        "N_c": int(basis.mean.size),
        "N_r": int(basis.n_r),
        "rank": int(basis.rank),
        "l": basis.l,
        "p": basis.p,
        "dims": {
            "nx": basis.dims.nx, "ny": basis.dims.ny, "nz": basis.dims.nz,
            "dx": basis.dims.dx, "dy": basis.dims.dy, "dz": basis.dims.dz,
        },
    }
    with open(path, "wb") as fh:
        fh.write(_PCA_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(basis.mean.astype("<f8").tobytes())
        fh.write(basis.sigma.astype("<f8").tobytes())
        fh.write(basis.energy_spectrum.astype("<f8").tobytes())
        fh.write(basis.u.astype("<f4").tobytes(order="F"))  # column-major


def load_pca_basis(path) -> PcaBasis:
    with open(path, "rb") as fh:
        if fh.read(4) != _PCA_MAGIC:
            raise ValueError(f"{path}: not a PCA basis file")
        header = json.loads(fh.readline().decode("utf-8"))
        d = header["dims"]
        dims = GridDims(d["nx"], d["ny"], d["nz"], d["dx"], d["dy"], d["dz"])
        n_c, rank = header["N_c"], header["rank"]
        mean = np.frombuffer(fh.read(8 * n_c), dtype="<f8").copy()
        sigma = np.frombuffer(fh.read(8 * rank), dtype="<f8").copy()
        spectrum = np.frombuffer(fh.read(8 * (header["N_r"] - 1)), dtype="<f8").copy()
        u = np.frombuffer(fh.read(4 * n_c * rank), dtype="<f4").astype(np.float64)
        u = u.reshape((n_c, rank), order="F")
    return PcaBasis(
        dims=dims, mean=mean, u=u, sigma=sigma, energy_spectrum=spectrum,
        n_r=header["N_r"], l=header["l"], p=header["p"],
    )


# ---------------------------------------------------------------------------
# latent-vector matrices
# ---------------------------------------------------------------------------

def save_latents(path, xi: np.ndarray) -> None:
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim != 2:
        raise ValueError(f"latent matrix must be 2D (members, l), got {xi.shape}")
    with open(path, "wb") as fh:
        fh.write(_XI_MAGIC)
        fh.write(struct.pack("<II", xi.shape[0], xi.shape[1]))
        fh.write(xi.astype("<f8").tobytes())


def load_latents(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(3) != _XI_MAGIC:
            raise ValueError(f"{path}: not a latent matrix file")
        rows, cols = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5), one byte per pixel; gray is (height, width) uint8."""
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        width, height = (int(v) for v in line.split())
        fh.readline()  # maxval
        data = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    return data.reshape(height, width).copy()


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path, rgb: np.ndarray) -> None:
    """Minimal RGB8 PNG writer (filter type 0 on every row)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (height, width, 3) array, got {rgb.shape}")
    height, width = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(height))
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_png_chunk(b"IHDR", ihdr))
        fh.write(_png_chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(_png_chunk(b"IEND", b""))


def read_png(path) -> np.ndarray:
    """Reader for the subset written by write_png (RGB8, filter 0)."""
    blob = Path(path).read_bytes()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError(f"{path}: not a PNG")
    pos = 8
    width = height = None
    idat = b""
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if tag == b"IHDR":
            width, height, depth, ctype = struct.unpack(">IIBB", payload[:10])
            if depth != 8 or ctype != 2:
                raise ValueError("only RGB8 supported")
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    raw = zlib.decompress(idat)
    stride = width * 3 + 1
    rows = []
    for r in range(height):
        row = raw[r * stride : (r + 1) * stride]
        if row[0] != 0:
            raise ValueError("only filter type 0 supported")
        rows.append(np.frombuffer(row[1:], dtype=np.uint8))
    return np.stack(rows).reshape(height, width, 3)


def layer_to_gray(model: Geomodel, layer: int) -> np.ndarray:
    """(ny, nx) uint8 view of one z layer; facies use the fixed gray palette,
    continuous fields are min-max scaled."""
    if not (0 <= layer < model.dims.nz):
        raise ValueError(f"layer {layer} outside [0, {model.dims.nz})")
    sl = model.values[layer]
    if model.kind == "facies":
        out = np.zeros(sl.shape, np.uint8)
        for code, gray in PALETTE_GRAY.items():
            out[sl == code] = gray
        return out
    lo, hi = float(sl.min()), float(sl.max())
    span = hi - lo if hi > lo else 1.0
    return np.round((sl - lo) / span * 255.0).astype(np.uint8)


def layer_to_rgb(model: Geomodel, layer: int) -> np.ndarray:
    if not (0 <= layer < model.dims.nz):
        raise ValueError(f"layer {layer} outside [0, {model.dims.nz})")
    sl = model.values[layer]
    if model.kind == "facies":
        out = np.zeros((*sl.shape, 3), np.uint8)
        for code, rgb in PALETTE_RGB.items():
            out[sl == code] = rgb
        return out
    gray = layer_to_gray(model, layer)
    return np.stack([gray] * 3, axis=-1)
