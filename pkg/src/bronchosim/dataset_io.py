"""Depth-map, image, and dataset-manifest I/O.

Depth maps travel as grayscale PFM (float32, little-endian via a negative
scale, rows bottom-up per the format) or as 16-bit PNG quantized at a
declared millimeters-per-count scale. Whether a map holds depth or
disparity is carried as explicit manifest metadata — it is never guessed
from pixel statistics, because both conventions appear in the wild.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import FormatError, IngestionError

log = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = "1"
DEFAULT_PNG_DEPTH_SCALE = 100.0  # counts per mm; 16 bits cover 655.35 mm


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM: ``Pf`` header, dimensions, negative scale for
    little-endian, float32 rows ordered bottom-up."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects a 2-D map, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float32 (H, W) array (top-down rows)."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def next_token(pos: int) -> tuple[bytes, int]:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PFM header truncated", offset=start)
        return blob[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        raise FormatError("color PFM not supported, expected grayscale 'Pf'", offset=0)
    if magic != b"Pf":
        raise FormatError(f"not a PFM file (magic {magic!r})", offset=0)
    try:
        w_tok, pos = next_token(pos)
        h_tok, pos = next_token(pos)
        s_tok, pos = next_token(pos)
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError as e:
        raise FormatError(f"malformed PFM header: {e}", offset=pos) from e
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PFM dimensions {width}x{height}", offset=3)
    if scale == 0.0:
        raise FormatError("PFM scale must be nonzero", offset=pos)
    pos += 1  # single whitespace byte terminates the header
    expected = width * height * 4
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"PFM payload holds {len(payload)} bytes, expected {expected}",
            offset=pos + len(payload),
        )
    endian = "<f4" if scale < 0.0 else ">f4"
    arr = np.frombuffer(payload, dtype=endian).reshape(height, width)
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG


def write_png16(path, data: np.ndarray, scale: float = DEFAULT_PNG_DEPTH_SCALE) -> None:
    """16-bit grayscale PNG of ``data * scale``, rounded and clipped to the
    uint16 range. Values above 65535/scale saturate."""
    if not scale > 0:
        raise FormatError("PNG depth scale must be > 0")
    arr = np.asarray(data, dtype=np.float64)
    counts = np.clip(np.rint(arr * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(counts, mode="I;16").save(path)


def read_png16(path, scale: float = DEFAULT_PNG_DEPTH_SCALE) -> np.ndarray:
    """Read a 16-bit grayscale PNG back into native units (counts / scale)."""
    if not scale > 0:
        raise FormatError("PNG depth scale must be > 0")
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I"):
            raise FormatError(f"expected 16-bit grayscale PNG, got mode {im.mode!r}")
        counts = np.asarray(im, dtype=np.uint32)
    return counts.astype(np.float64) / scale


def write_png8(path, image: np.ndarray) -> None:
    """8-bit grayscale PNG from intensities in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="L").save(path)


def read_png8(path) -> np.ndarray:
    """8-bit grayscale or RGB PNG as float intensities in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def read_depth(path, png_scale: float = DEFAULT_PNG_DEPTH_SCALE) -> np.ndarray:
    """Read a depth/disparity map, dispatching on the file extension.

    PFM maps are returned in their native float values; 16-bit PNG maps are
    divided by ``png_scale``. The depth-vs-disparity convention is metadata
    carried by the manifest, not by this function.
    """
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        return read_pfm(path)
    if ext == ".png":
        return read_png16(path, png_scale)
    raise FormatError(f"unknown depth-map extension {ext!r} for {path}")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class FrameRecord:
    """One rendered frame's file set; paths are manifest-relative."""

    index: int
    image_path: str
    depth_path: str
    pose_path: str
    path_id: int = 0
    mask_path: str | None = None

    def to_dict(self) -> dict:
        out = {
            "index": self.index,
            "image_path": self.image_path,
            "depth_path": self.depth_path,
            "pose_path": self.pose_path,
            "path_id": self.path_id,
        }
        if self.mask_path is not None:
            out["mask_path"] = self.mask_path
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(
            index=int(d["index"]),
            image_path=d["image_path"],
            depth_path=d["depth_path"],
            pose_path=d["pose_path"],
            path_id=int(d.get("path_id", 0)),
            mask_path=d.get("mask_path"),
        )


@dataclass
class DatasetManifest:
    """Dataset index: frame file sets plus the metadata needed to interpret
    them (depth convention, PNG scale) and to reproduce them (seeds,
    generation-parameter hash)."""

    frames: list[FrameRecord] = field(default_factory=list)
    format_version: str = MANIFEST_FORMAT_VERSION
    depth_format: str = "pfm"  # "pfm" | "png16"
    disparity_convention: str = "depth"  # "depth" | "disparity"
    png_depth_scale: float = DEFAULT_PNG_DEPTH_SCALE
    seed: int | None = None
    params_hash: str | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "depth_format": self.depth_format,
            "disparity_convention": self.disparity_convention,
            "png_depth_scale": self.png_depth_scale,
            "seed": self.seed,
            "params_hash": self.params_hash,
            "metadata": self.metadata,
            "frames": [f.to_dict() for f in self.frames],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        version = doc.get("format_version")
        if version != MANIFEST_FORMAT_VERSION:
            raise FormatError(f"unsupported manifest format_version {version!r}")
        convention = doc.get("disparity_convention", "depth")
        if convention not in ("depth", "disparity"):
            raise FormatError(f"unknown disparity_convention {convention!r}")
        return cls(
            frames=[FrameRecord.from_dict(f) for f in doc.get("frames", [])],
            format_version=version,
            depth_format=doc.get("depth_format", "pfm"),
            disparity_convention=convention,
            png_depth_scale=float(doc.get("png_depth_scale", DEFAULT_PNG_DEPTH_SCALE)),
            seed=doc.get("seed"),
            params_hash=doc.get("params_hash"),
            metadata=doc.get("metadata", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise FormatError(f"invalid manifest JSON: {e}") from e
        return cls.from_dict(doc)

    def validate_paths(self, root) -> list[str]:
        """Return the manifest-relative paths that do not exist under
        ``root`` (empty list when the manifest is complete)."""
        missing = []
        for rec in self.frames:
            paths = [rec.image_path, rec.depth_path, rec.pose_path]
            if rec.mask_path is not None:
                paths.append(rec.mask_path)
            for rel in paths:
                if not os.path.exists(os.path.join(root, rel)):
                    missing.append(rel)
        return missing


def params_hash(params_dict: dict) -> str:
    """Stable short hash of a JSON-serializable parameter mapping."""
    blob = json.dumps(params_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# evaluation bundles


@dataclass
class EvalFrame:
    """Aligned per-frame inputs for evaluation; ``valid`` marks pixels
    usable by scale-sensitive metrics."""

    frame_id: str
    prediction: np.ndarray
    ground_truth: np.ndarray
    mask: np.ndarray | None
    valid: np.ndarray


@dataclass
class EvalBundle:
    frames: list[EvalFrame]
    disparity_convention: str
    skipped: list[tuple[str, str]] = field(default_factory=list)


def load_eval_bundle(
    manifest_path,
    pred_dir=None,
    allow_partial: bool = False,
) -> EvalBundle:
    """Assemble prediction / ground-truth / mask triplets for evaluation.

    Ground truth and masks come from the dataset manifest; predictions are
    matched from ``pred_dir`` by depth-file stem. With no ``pred_dir`` the
    ground truth doubles as the prediction (identity evaluation). Every
    frame's dimensions are checked before any metric sees the data; frames
    with missing members are rejected, or skipped with a reason under
    ``allow_partial``.
    """
    manifest = DatasetManifest.load(manifest_path)
    root = os.path.dirname(os.path.abspath(str(manifest_path)))
    if not manifest.frames:
        raise IngestionError("manifest lists no frames")

    frames: list[EvalFrame] = []
    skipped: list[tuple[str, str]] = []
    problems: list[str] = []
    for rec in manifest.frames:
        fid = f"frame {rec.index}"
        gt_path = os.path.join(root, rec.depth_path)
        if not os.path.exists(gt_path):
            problems.append(f"{fid}: missing ground truth {rec.depth_path}")
            continue
        gt = np.asarray(read_depth(gt_path, manifest.png_depth_scale), dtype=np.float64)

        if pred_dir is None:
            pred = gt
        else:
            stem = os.path.splitext(os.path.basename(rec.depth_path))[0]
            cand = [
                os.path.join(pred_dir, stem + ext) for ext in (".pfm", ".png")
            ]
            hit = next((c for c in cand if os.path.exists(c)), None)
            if hit is None:
                problems.append(f"{fid}: no prediction named {stem}.pfm/.png")
                continue
            pred = np.asarray(
                read_depth(hit, manifest.png_depth_scale), dtype=np.float64
            )

        mask = None
        if rec.mask_path is not None:
            mask_file = os.path.join(root, rec.mask_path)
            if not os.path.exists(mask_file):
                problems.append(f"{fid}: missing mask {rec.mask_path}")
                continue
            mask = read_png8(mask_file) > 0.0
            if mask.ndim == 3:
                mask = mask[..., 0]

        if pred.shape != gt.shape or (mask is not None and mask.shape != gt.shape):
            problems.append(
                f"{fid}: shape mismatch pred{pred.shape} gt{gt.shape}"
                + (f" mask{mask.shape}" if mask is not None else "")
            )
            continue
        valid = np.isfinite(gt) & (gt > 0.0)
        frames.append(EvalFrame(fid, pred, gt, mask, valid))

    if problems and not allow_partial:
        raise IngestionError(
            "bundle incomplete:\n  " + "\n  ".join(problems)
        )
    skipped = [(p.split(":", 1)[0], p.split(":", 1)[1].strip()) for p in problems]
    if not frames:
        raise IngestionError("no usable frames in bundle")
    return EvalBundle(
        frames=frames,
        disparity_convention=manifest.disparity_convention,
        skipped=skipped,
    )
