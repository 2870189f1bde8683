"""File formats and the synthetic-oracle dataset.

Three concerns live here: the AESC binary tensor format (magic
"AESC", u16 version, u8 dtype code, u8 rank, u32 dims, row-major
little-endian payload), the JSON-lines annotation container, and a
synthetic scene generator that plants a known-optimal crop so
end-to-end training has a ground truth to converge to. Checkpoints
(JSON manifest + one AESC file per parameter) also land here.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .composition import ActivationMap, ClassProbabilities, N_CLASSES, normalize01
from .decoder import ModelConfig, ModelState, init_state
from .errors import (
    BadMagic,
    BadShape,
    BadVersion,
    CropError,
    Degenerate,
    MissingFile,
    OutOfRange,
    ParseError,
    RangeError,
    TruncatedPayload,
)
from .geometry import CropBox, ScoredCrop, from_corners, iou
from .tensor import Tensor

AESC_MAGIC = b"AESC"
AESC_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path, t) -> None:
    """Serialize a Tensor or ndarray (f32/f64, any rank) to AESC."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_CODES:
        raise BadVersion(f"cannot serialize dtype {dtype}; use f32 or f64")
    header = AESC_MAGIC + struct.pack("<HBB", AESC_VERSION, _DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> Tensor:
    """Parse an AESC file back into a (non-trainable) Tensor, bit-exact."""
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"tensor file not found: {p}")
    blob = p.read_bytes()
    if len(blob) < 8 or blob[:4] != AESC_MAGIC:
        raise BadMagic(f"{p}: missing AESC magic")
    version, dtype_code, rank = struct.unpack("<HBB", blob[4:8])
    if version != AESC_VERSION:
        raise BadVersion(f"{p}: version {version}, expected {AESC_VERSION}")
    if dtype_code not in _CODE_DTYPES:
        raise BadVersion(f"{p}: unknown dtype code {dtype_code}")
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise TruncatedPayload(f"{p}: header truncated at {len(blob)} bytes")
    dims = struct.unpack(f"<{rank}I", blob[8:dims_end]) if rank else ()
    dtype = _CODE_DTYPES[dtype_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    actual = len(blob) - dims_end
    if actual != expected:
        raise TruncatedPayload(f"{p}: payload is {actual} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims if rank else (1,))
    if not rank:
        arr = arr.reshape(())
    native = arr.astype(dtype.newbyteorder("="), copy=True)
    return Tensor(native, dtype=native.dtype)


# -- dataset records -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    """One annotated image; tensor payloads stay on disk until asked for."""

    id: str
    channels: int
    height: int
    width: int
    image_path: str | None
    embedding_path: str | None
    class_probs: ClassProbabilities
    cam_paths: tuple[str, ...] | None
    cams_inline: tuple | None
    crops: tuple[ScoredCrop, ...]
    base_dir: str

    def _resolve(self, rel: str) -> Path:
        return Path(self.base_dir) / rel

    def load_image(self) -> np.ndarray:
        if self.image_path is None:
            raise MissingFile(f"record {self.id!r} has no image tensor")
        arr = read_tensor(self._resolve(self.image_path)).data
        if arr.shape != (self.channels, self.height, self.width):
            raise BadShape(f"record {self.id!r}: image shape {arr.shape} != declared "
                           f"({self.channels}, {self.height}, {self.width})")
        return arr

    def load_cams(self) -> list[ActivationMap]:
        if self.cams_inline is not None:
            return [ActivationMap(values=np.array(v, dtype=np.float64)) for v in self.cams_inline]
        if self.cam_paths is None:
            raise MissingFile(f"record {self.id!r} has no activation maps")
        return [ActivationMap(values=read_tensor(self._resolve(p)).data.astype(np.float64))
                for p in self.cam_paths]


def _parse_crop(entry: dict, record_id: str, line_no: int) -> ScoredCrop:
    if not isinstance(entry, dict) or "mos" not in entry:
        raise ParseError("crop entry must be an object with a 'mos' field", line=line_no, field="crops")
    mos = entry["mos"]
    if not isinstance(mos, (int, float)):
        raise ParseError("mos must be numeric", line=line_no, field="mos")
    try:
        if all(k in entry for k in ("cx", "cy", "w", "h")):
            box = CropBox(cx=float(entry["cx"]), cy=float(entry["cy"]), w=float(entry["w"]), h=float(entry["h"]))
        elif all(k in entry for k in ("x1", "y1", "x2", "y2")):
            box = from_corners(float(entry["x1"]), float(entry["y1"]), float(entry["x2"]), float(entry["y2"]))
        else:
            raise ParseError("crop needs cx/cy/w/h or x1/y1/x2/y2", line=line_no, field="crops")
        return ScoredCrop(box=box, mos=float(mos))
    except (Degenerate, OutOfRange) as e:
        raise RangeError(str(e), record=record_id) from e


def _require(obj: dict, key: str, kind, line_no: int):
    if key not in obj:
        raise ParseError(f"missing field {key!r}", line=line_no, field=key)
    val = obj[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        raise ParseError(f"field {key!r} has wrong type {type(val).__name__}", line=line_no, field=key)
    return val


def load_dataset(path) -> list[DatasetRecord]:
    """Read a JSON-lines annotation file, validating every record."""
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"dataset file not found: {p}")
    base_dir = str(p.parent)
    records: list[DatasetRecord] = []
    for line_no, raw in enumerate(p.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=line_no) from e
        if not isinstance(obj, dict):
            raise ParseError("record is not a JSON object", line=line_no)
        rec_id = _require(obj, "id", str, line_no)
        channels = _require(obj, "channels", int, line_no)
        height = _require(obj, "height", int, line_no)
        width = _require(obj, "width", int, line_no)
        if min(channels, height, width) < 1:
            raise RangeError(f"non-positive image dims ({channels}, {height}, {width})", record=rec_id)
        probs_raw = _require(obj, "class_probs", list, line_no)
        try:
            probs = ClassProbabilities(values=tuple(float(v) for v in probs_raw))
        except (TypeError, ValueError) as e:
            raise ParseError(f"class_probs not numeric: {e}", line=line_no, field="class_probs") from e
        except CropError as e:
            raise RangeError(str(e), record=rec_id) from e
        crops_raw = _require(obj, "crops", list, line_no)
        if not crops_raw:
            raise ParseError("record has no crops", line=line_no, field="crops")
        crops = tuple(_parse_crop(c, rec_id, line_no) for c in crops_raw)
        image_path = obj.get("image")
        embedding_path = obj.get("embedding")
        cam_paths = obj.get("cams")
        cams_inline = obj.get("cams_inline")
        if cam_paths is not None and cams_inline is not None:
            raise ParseError("record has both cams and cams_inline", line=line_no, field="cams")
        if cam_paths is not None:
            if not isinstance(cam_paths, list) or len(cam_paths) != N_CLASSES:
                raise ParseError(f"cams must list {N_CLASSES} paths", line=line_no, field="cams")
            cam_paths = tuple(str(c) for c in cam_paths)
        if cams_inline is not None:
            if not isinstance(cams_inline, list) or len(cams_inline) != N_CLASSES:
                raise ParseError(f"cams_inline must list {N_CLASSES} maps", line=line_no, field="cams_inline")
            cams_inline = tuple(cams_inline)
        for rel in filter(None, [image_path, embedding_path, *(cam_paths or ())]):
            if not (Path(base_dir) / rel).exists():
                raise MissingFile(f"record {rec_id!r} references missing file {rel}")
        records.append(
            DatasetRecord(
                id=rec_id,
                channels=channels,
                height=height,
                width=width,
                image_path=image_path,
                embedding_path=embedding_path,
                class_probs=probs,
                cam_paths=cam_paths,
                cams_inline=cams_inline,
                crops=crops,
                base_dir=base_dir,
            )
        )
    return records


def save_dataset(records, path) -> None:
    """Write records back out as JSON lines (paths kept relative)."""
    lines = []
    for r in records:
        obj = {
            "id": r.id,
            "channels": r.channels,
            "height": r.height,
            "width": r.width,
            "image": r.image_path,
            "embedding": r.embedding_path,
            "class_probs": list(r.class_probs.values),
            "cams": list(r.cam_paths) if r.cam_paths is not None else None,
            "crops": [{"cx": c.box.cx, "cy": c.box.cy, "w": c.box.w, "h": c.box.h, "mos": c.mos} for c in r.crops],
        }
        if r.cams_inline is not None:
            obj["cams_inline"] = [np.asarray(v).tolist() for v in r.cams_inline]
            del obj["cams"]
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# -- synthetic scenes -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticScene:
    """In-memory generated scene before serialization."""

    planted: CropBox
    decoys: tuple[CropBox, ...]
    salient_mask: np.ndarray
    image: np.ndarray
    cams: tuple[ActivationMap, ...]
    class_probs: ClassProbabilities
    crops: tuple[ScoredCrop, ...]


def _oracle_mos(candidate: CropBox, planted: CropBox, power: float = 2.0) -> float:
    return 1.0 + 4.0 * iou(candidate, planted) ** power


def _clip_center(c: float, extent: float) -> float:
    lo, hi = extent / 2.0, 1.0 - extent / 2.0
    return min(max(c, lo), hi)


def _jittered(rng: np.random.Generator, base: CropBox, sigma: float) -> CropBox:
    w = float(np.clip(base.w * (1.0 + rng.normal(0.0, sigma)), 0.05, 0.9))
    h = float(np.clip(base.h * (1.0 + rng.normal(0.0, sigma)), 0.05, 0.9))
    cx = _clip_center(base.cx + float(rng.normal(0.0, sigma)), w)
    cy = _clip_center(base.cy + float(rng.normal(0.0, sigma)), h)
    return CropBox(cx=cx, cy=cy, w=w, h=h)


_JITTER_LEVELS = (0.005, 0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15, 0.18, 0.21, 0.25)
_DECOY_PEAK = 0.0


def make_scene(
    rng: np.random.Generator,
    *,
    image_h: int = 64,
    image_w: int = 64,
    channels: int = 3,
    cam_h: int = 32,
    cam_w: int = 32,
    n_candidates: int = 24,
) -> SyntheticScene:
    """Plant one optimal crop plus a look-alike decoy; derive image, maps, MOS.

    The subject and the decoy are textured rectangles with overlapping
    brightness ranges, so raw pixels alone rarely settle which one the
    scored candidates reward. The activation maps resolve it: the
    dominant and runner-up composition categories receive complementary
    halves of a saliency bump over the subject only, so
    probability-weighted fusion recovers the whole region while picking
    only the argmax map covers half.
    """
    if n_candidates < len(_JITTER_LEVELS) + 2:
        raise OutOfRange(f"n_candidates must be >= {len(_JITTER_LEVELS) + 2}")
    w = float(rng.uniform(0.20, 0.40))
    h = float(rng.uniform(0.20, 0.40))
    planted = CropBox(
        cx=float(rng.uniform(w / 2.0 + 0.03, 1.0 - w / 2.0 - 0.03)),
        cy=float(rng.uniform(h / 2.0 + 0.03, 1.0 - h / 2.0 - 0.03)),
        w=w,
        h=h,
    )
    decoys: list[CropBox] = []
    for _ in range(3):
        for _ in range(64):
            dw = float(rng.uniform(0.15, 0.35))
            dh = float(rng.uniform(0.15, 0.35))
            trial = CropBox(
                cx=float(rng.uniform(dw / 2.0 + 0.03, 1.0 - dw / 2.0 - 0.03)),
                cy=float(rng.uniform(dh / 2.0 + 0.03, 1.0 - dh / 2.0 - 0.03)),
                w=dw,
                h=dh,
            )
            others = [planted] + decoys
            if max(iou(trial, o) for o in others) < 0.05:
                decoys.append(trial)
                break

    # image: dim noise, decoy rectangles, and the subject rectangle on top
    image = rng.uniform(0.0, 0.30, size=(channels, image_h, image_w))
    ys = np.arange(image_h)[:, None]
    xs = np.arange(image_w)[None, :]

    def _rect_mask(box: CropBox) -> np.ndarray:
        x1, y1, x2, y2 = box.cx - box.w / 2, box.cy - box.h / 2, box.cx + box.w / 2, box.cy + box.h / 2
        return (
            (ys >= y1 * image_h) & (ys < y2 * image_h) & (xs >= x1 * image_w) & (xs < x2 * image_w)
        )

    mask = _rect_mask(planted)
    for c in range(channels):
        for decoy in decoys:
            dim = rng.uniform(0.55, 0.85, size=(image_h, image_w))
            image[c] = np.where(_rect_mask(decoy), dim, image[c])
        # the leading two channels carry the subject's extents as flat
        # brightness levels, so its size is readable from local content
        if c == 0 and channels >= 2:
            fill = 0.5 + 1.5 * (w - 0.2) + rng.uniform(-0.02, 0.02, size=(image_h, image_w))
        elif c == 1 and channels >= 3:
            fill = 0.5 + 1.5 * (h - 0.2) + rng.uniform(-0.02, 0.02, size=(image_h, image_w))
        else:
            fill = rng.uniform(0.70, 1.0, size=(image_h, image_w))
        image[c] = np.where(mask, fill, image[c])

    # saliency bumps: the subject peak split into two half-maps plus
    # weaker whole bumps over every decoy, present in both leading maps
    cy_grid = (np.arange(cam_h)[:, None] + 0.5) / cam_h
    cx_grid = (np.arange(cam_w)[None, :] + 0.5) / cam_w

    def _bump(box: CropBox) -> np.ndarray:
        return np.exp(
            -(
                ((cx_grid - box.cx) ** 2) / (2.0 * (1.8 * box.w) ** 2)
                + ((cy_grid - box.cy) ** 2) / (2.0 * (1.8 * box.h) ** 2)
            )
        )

    bump = _bump(planted)
    decoy_bumps = _DECOY_PEAK * sum((_bump(d) for d in decoys), np.zeros_like(bump))
    left = 1.0 / (1.0 + np.exp((cx_grid - planted.cx) / 0.02))
    left = np.broadcast_to(left, bump.shape)
    if rng.random() < 0.5:
        left = 1.0 - left
    dominant, runner_up = rng.choice(N_CLASSES, size=2, replace=False)
    cams: list[ActivationMap] = []
    for k in range(N_CLASSES):
        if k == dominant:
            vals = bump * left + decoy_bumps + 0.02 * rng.uniform(size=bump.shape)
        elif k == runner_up:
            vals = bump * (1.0 - left) + decoy_bumps + 0.02 * rng.uniform(size=bump.shape)
        else:
            vals = rng.uniform(size=bump.shape) * 0.5
        cams.append(ActivationMap(values=normalize01(vals)))

    probs = np.full(N_CLASSES, 0.13 / (N_CLASSES - 2))
    probs[dominant] = 0.45
    probs[runner_up] = 0.42
    probs = probs / probs.sum()
    class_probs = ClassProbabilities(values=tuple(float(v) for v in probs))

    crops: list[ScoredCrop] = [ScoredCrop(box=planted, mos=5.0)]
    for sigma in _JITTER_LEVELS:
        box = _jittered(rng, planted, sigma)
        crops.append(ScoredCrop(box=box, mos=_oracle_mos(box, planted)))
    while len(crops) < n_candidates:
        rw = float(rng.uniform(0.15, 0.50))
        rh = float(rng.uniform(0.15, 0.50))
        box = CropBox(
            cx=float(rng.uniform(rw / 2.0, 1.0 - rw / 2.0)),
            cy=float(rng.uniform(rh / 2.0, 1.0 - rh / 2.0)),
            w=rw,
            h=rh,
        )
        crops.append(ScoredCrop(box=box, mos=_oracle_mos(box, planted)))

    return SyntheticScene(
        planted=planted,
        decoys=tuple(decoys),
        salient_mask=mask,
        image=image,
        cams=tuple(cams),
        class_probs=class_probs,
        crops=tuple(crops),
    )


def generate_synthetic(
    seed: int,
    n_images: int,
    out_dir,
    *,
    image_h: int = 64,
    image_w: int = 64,
    channels: int = 3,
    cam_h: int = 32,
    cam_w: int = 32,
    n_candidates: int = 24,
    prefix: str = "scene",
) -> list[DatasetRecord]:
    """Write a complete synthetic dataset and return its loaded records.

    Layout: out_dir/data.jsonl plus images/ and cams/ with AESC files
    (float32). The same seed reproduces the same bytes.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "cams").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_images):
        scene = make_scene(
            rng,
            image_h=image_h,
            image_w=image_w,
            channels=channels,
            cam_h=cam_h,
            cam_w=cam_w,
            n_candidates=n_candidates,
        )
        rec_id = f"{prefix}_{i:04d}"
        image_rel = f"images/{rec_id}.aesc"
        write_tensor(out / image_rel, scene.image.astype(np.float32))
        cam_rels = []
        for k, cam in enumerate(scene.cams):
            rel = f"cams/{rec_id}_c{k}.aesc"
            write_tensor(out / rel, cam.values.astype(np.float32))
            cam_rels.append(rel)
        rows.append(
            DatasetRecord(
                id=rec_id,
                channels=channels,
                height=image_h,
                width=image_w,
                image_path=image_rel,
                embedding_path=None,
                class_probs=scene.class_probs,
                cam_paths=tuple(cam_rels),
                cams_inline=None,
                crops=scene.crops,
                base_dir=str(out),
            )
        )
    save_dataset(rows, out / "data.jsonl")
    return load_dataset(out / "data.jsonl")


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(out_dir, state: ModelState, extra: dict | None = None) -> None:
    """Manifest JSON plus one AESC file per named parameter."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = state.param_names()
    manifest = {
        "format": 1,
        "model": state.config.to_dict(),
        "dtype": "f32" if state.dtype == np.float32 else "f64",
        "params": names,
        "extra": extra or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for name in names:
        write_tensor(out / f"{name}.aesc", state.params[name])


def load_checkpoint(ckpt_dir) -> tuple[ModelState, dict]:
    """Rebuild a ModelState (bit-exact parameters) from a checkpoint."""
    ckpt = Path(ckpt_dir)
    manifest_path = ckpt / "manifest.json"
    if not manifest_path.exists():
        raise MissingFile(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"manifest is not valid JSON: {e.msg}") from e
    for key in ("format", "model", "dtype", "params"):
        if key not in manifest:
            raise ParseError(f"manifest missing field {key!r}", field=key)
    if manifest["format"] != 1:
        raise BadVersion(f"checkpoint format {manifest['format']}, expected 1")
    config = ModelConfig(**manifest["model"])
    dtype = np.float32 if manifest["dtype"] == "f32" else np.float64
    state = init_state(config, seed=0, dtype=dtype)
    if set(manifest["params"]) != set(state.param_names()):
        raise ParseError("manifest parameter list does not match the configured model", field="params")
    for name in manifest["params"]:
        loaded = read_tensor(ckpt / f"{name}.aesc")
        if loaded.dims != state.params[name].dims:
            raise BadShape(f"parameter {name}: stored {loaded.dims} != expected {state.params[name].dims}")
        state.params[name].data[...] = loaded.data.astype(dtype)
    return state, manifest.get("extra", {})


def write_pgm(path, amap: ActivationMap) -> None:
    """Debug-only grayscale dump (ASCII PGM, 8-bit)."""
    vals = np.round(amap.values * 255.0).astype(np.int64)
    h, w = vals.shape
    body = "\n".join(" ".join(str(v) for v in row) for row in vals)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{body}\n")
