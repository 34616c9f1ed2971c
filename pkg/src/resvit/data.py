"""Multi-modality slice datasets, availability masking and phantom generation.

On-disk layout::

    root/manifest.json
    root/<subject>/<slice>_<modality>.mms

Slice files ("MMS1") are ``b"MMS1" | u32 version=1 | u32 H | u32 W |
u32 channels=1`` followed by H*W little-endian float32 raw intensities.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DimensionError

SLICE_MAGIC = b"MMS1"
SLICE_VERSION = 1
HEADER = struct.Struct("<4sIIII")
SPLITS = ("train", "val", "test")
PHANTOM_MODALITIES = ("T1", "T2", "PD")

PathLike = Union[str, Path]


# ------------------------------------------------------------------- tasks
@dataclass(frozen=True)
class TaskConfig:
    """Availability vector over the protocol's modalities (1 = source)."""

    availability: Tuple[int, ...]
    modalities: Tuple[str, ...]

    def __post_init__(self):
        a = tuple(int(v) for v in self.availability)
        object.__setattr__(self, "availability", a)
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if len(a) != len(self.modalities):
            raise DimensionError(f"availability {a} does not match modalities {self.modalities}")
        if any(v not in (0, 1) for v in a):
            raise ConfigError(f"availability must be binary, got {a}")
        if all(a) or not any(a):
            raise ConfigError(f"task {a} needs at least one source and one target")

    @property
    def sources(self) -> List[int]:
        return [i for i, v in enumerate(self.availability) if v]

    @property
    def targets(self) -> List[int]:
        return [i for i, v in enumerate(self.availability) if not v]

    @property
    def name(self) -> str:
        src = "+".join(self.modalities[i] for i in self.sources)
        tgt = "+".join(self.modalities[i] for i in self.targets)
        return f"{src}->{tgt}"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str, modalities: Sequence[str]) -> "TaskConfig":
        """Parse ``"T1+T2->PD"``; names must cover each modality at most once."""
        if text.count("->") != 1:
            raise ConfigError(f"task {text!r} must look like 'A+B->C'")
        left, right = (part.strip() for part in text.split("->"))
        src = [s.strip() for s in left.split("+") if s.strip()]
        tgt = [s.strip() for s in right.split("+") if s.strip()]
        unknown = [s for s in src + tgt if s not in modalities]
        if unknown:
            raise ConfigError(f"task {text!r}: unknown modalities {unknown}; known {list(modalities)}")
        if set(src) & set(tgt) or len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ConfigError(f"task {text!r} repeats a modality")
        a = [1 if m in src else 0 for m in modalities]
        task = cls(tuple(a), tuple(modalities))
        if set(tgt) != {modalities[i] for i in task.targets}:
            raise ConfigError(f"task {text!r} must list every non-source modality as a target")
        return task


def leave_one_out_tasks(modalities: Sequence[str]) -> List[TaskConfig]:
    """Many-to-one tasks synthesising each modality from all others."""
    n = len(modalities)
    tasks = []
    for target in reversed(range(n)):
        a = [1] * n
        a[target] = 0
        tasks.append(TaskConfig(tuple(a), tuple(modalities)))
    return tasks


def all_tasks(modalities: Sequence[str]) -> List[TaskConfig]:
    n = len(modalities)
    out = []
    for k in range(1, n):
        for src in combinations(range(n), k):
            out.append(TaskConfig(tuple(int(i in src) for i in range(n)), tuple(modalities)))
    return out


# ------------------------------------------------------------------ samples
@dataclass
class SliceSample:
    subject: str
    index: int
    images: np.ndarray  # (I, H, W), normalised to [-1, 1]
    modalities: Tuple[str, ...]


def mask_inputs(sample: Union[SliceSample, np.ndarray], task: TaskConfig) -> np.ndarray:
    """Zero every target channel: channel i becomes a_i * m_i.

    Accepts a sample or an array whose third-from-last axis indexes modalities.
    """
    images = sample.images if isinstance(sample, SliceSample) else np.asarray(sample)
    a = np.asarray(task.availability)
    if images.shape[-3] != a.size:
        raise DimensionError(f"{images.shape[-3]} channels but availability of length {a.size}")
    # where(), not a product: negative pixels times 0 would leave -0.0 behind
    return np.where(a.reshape(-1, 1, 1) == 1, images, images.dtype.type(0))


def normalize_intensity(raw: np.ndarray, peak: float) -> np.ndarray:
    """Map raw intensities in [0, peak] to [-1, 1]."""
    if not peak > 0:
        raise DataError(f"normalisation peak must be positive, got {peak}")
    return (np.asarray(raw, dtype=np.float32) / np.float32(peak)) * 2.0 - 1.0


def denormalize_intensity(x: np.ndarray, peak: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) + 1.0) * 0.5 * np.float32(peak)


# -------------------------------------------------------------- slice files
def write_slice(path: PathLike, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype="<f4")
    if image.ndim != 2:
        raise DimensionError(f"slice files hold 2-d images, got shape {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(HEADER.pack(SLICE_MAGIC, SLICE_VERSION, h, w, 1) + image.tobytes())


def read_slice_header(path: PathLike) -> Tuple[int, int]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
    except OSError as exc:
        raise DataError(f"{path}: cannot read slice ({exc.strerror})") from None
    if len(head) < HEADER.size:
        raise DataError(f"{path}: truncated slice header")
    magic, version, h, w, c = HEADER.unpack(head)
    if magic != SLICE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SLICE_VERSION or c != 1:
        raise DataError(f"{path}: unsupported version {version} / channel count {c}")
    return h, w


def read_slice(path: PathLike) -> np.ndarray:
    path = Path(path)
    h, w = read_slice_header(path)
    buf = path.read_bytes()
    if len(buf) != HEADER.size + 4 * h * w:
        raise DataError(f"{path}: payload size {len(buf) - HEADER.size} does not match {h}x{w}")
    return np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(h, w).astype(np.float32)


# ----------------------------------------------------------------- manifest
@dataclass
class SliceRef:
    subject: str
    split: str
    index: int
    files: List[Optional[str]]
    peaks: List[float]


class Dataset:
    """A validated manifest plus on-demand access to its slices."""

    def __init__(self, root: PathLike, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.modalities: Tuple[str, ...] = tuple(manifest["modalities"])
        self.shape: Optional[Tuple[int, int]] = (tuple(manifest["shape"])
                                                  if "shape" in manifest else None)
        self.task: Optional[str] = manifest.get("task")
        self.refs: List[SliceRef] = [
            SliceRef(s["id"], s["split"], int(sl["index"]), list(sl["files"]),
                     [float(v) for v in sl["max"]])
            for s in manifest["subjects"] for sl in s["slices"]
        ]
        self._subject_peaks: Dict[str, np.ndarray] = {}
        for ref in self.refs:
            peaks = np.asarray(ref.peaks, dtype=np.float64)
            prev = self._subject_peaks.get(ref.subject)
            self._subject_peaks[ref.subject] = peaks if prev is None else np.maximum(prev, peaks)

    def __len__(self) -> int:
        return len(self.refs)

    @property
    def subjects(self) -> List[str]:
        return [s["id"] for s in self.manifest["subjects"]]

    def split_subjects(self, split: str) -> List[str]:
        return [s["id"] for s in self.manifest["subjects"] if s["split"] == split]

    def slices(self, split: Optional[str] = None) -> List[SliceRef]:
        return [r for r in self.refs if split is None or r.split == split]

    def subject_peak(self, subject: str) -> np.ndarray:
        """Per-modality maximum over all slices of a subject."""
        return self._subject_peaks[subject]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def read_raw(self, ref: SliceRef, modality: int) -> np.ndarray:
        rel = ref.files[modality]
        if rel is None:
            raise DataError(f"{ref.subject}/{ref.index}: no file for {self.modalities[modality]}")
        return read_slice(self.path(rel))

    def read(self, ref: SliceRef) -> SliceSample:
        peaks = self.subject_peak(ref.subject)
        images = np.stack([normalize_intensity(self.read_raw(ref, i), peaks[i])
                           for i in range(len(self.modalities))])
        return SliceSample(ref.subject, ref.index, images, self.modalities)

    def arrays(self, split: Optional[str] = None) -> Tuple[np.ndarray, List[SliceRef]]:
        """All slices of a split stacked as (N, I, H, W) normalised float32."""
        refs = self.slices(split)
        if not refs:
            return np.zeros((0, len(self.modalities)) + tuple(self.shape or (0, 0)),
                            dtype=np.float32), refs
        return np.stack([self.read(r).images for r in refs]), refs


def _fail(root: Path, msg: str):
    raise DataError(f"{root / 'manifest.json'}: {msg}")


def validate_manifest(root: Path, manifest: dict, check_files: bool = True) -> None:
    if not isinstance(manifest, dict):
        _fail(root, "manifest must be a JSON object")
    mods = manifest.get("modalities")
    if not isinstance(mods, list) or not mods or not all(isinstance(m, str) for m in mods):
        _fail(root, "'modalities' must be a non-empty list of strings")
    if len(set(mods)) != len(mods):
        _fail(root, "duplicate modality names")
    shape = manifest.get("shape")
    if shape is not None and (not isinstance(shape, list) or len(shape) != 2):
        _fail(root, "'shape' must be [H, W]")
    subjects = manifest.get("subjects")
    if not isinstance(subjects, list):
        _fail(root, "'subjects' must be a list")
    seen = set()
    for s in subjects:
        if not isinstance(s, dict) or not {"id", "split", "slices"} <= set(s):
            _fail(root, "each subject needs 'id', 'split' and 'slices'")
        if s["id"] in seen:
            _fail(root, f"subject {s['id']!r} listed twice (splits must be disjoint)")
        seen.add(s["id"])
        if s["split"] not in SPLITS:
            _fail(root, f"subject {s['id']!r} has unknown split {s['split']!r}")
        for sl in s["slices"]:
            if not isinstance(sl, dict) or not {"index", "files", "max"} <= set(sl):
                _fail(root, f"subject {s['id']!r}: slices need 'index', 'files', 'max'")
            if len(sl["files"]) != len(mods) or len(sl["max"]) != len(mods):
                _fail(root, f"subject {s['id']!r} slice {sl['index']}: expected {len(mods)} files/max")
            if not check_files:
                continue
            for rel in sl["files"]:
                if rel is None:
                    continue
                p = root / rel
                if not p.is_file():
                    raise DataError(f"{p}: referenced by manifest but missing")
                hw = read_slice_header(p)
                if shape is not None and list(hw) != list(shape):
                    raise DataError(f"{p}: header says {hw[0]}x{hw[1]}, manifest says "
                                    f"{shape[0]}x{shape[1]}")


def load_dataset(root: PathLike) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DataError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc.msg})") from None
    validate_manifest(root, manifest)
    return Dataset(root, manifest)


def write_manifest(root: PathLike, manifest: dict) -> None:
    Path(root, "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


# ------------------------------------------------------------------ phantom
def default_splits(subjects: int) -> Tuple[int, int, int]:
    test = max(1, round(0.2 * subjects))
    val = max(1, round(0.15 * subjects))
    train = subjects - val - test
    if train < 1:
        raise ConfigError(f"{subjects} subjects are too few to form train/val/test splits")
    return train, val, test


def _shape_mask(x, y, cx, cy, ax, ay, theta, kind):
    c, s = np.cos(theta), np.sin(theta)
    u = ((x - cx) * c + (y - cy) * s) / ax
    v = (-(x - cx) * s + (y - cy) * c) / ay
    if kind == "rect":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return u * u + v * v <= 1.0


def _draw_subject(rng: np.random.Generator) -> dict:
    head = dict(cx=rng.uniform(-0.05, 0.05), cy=rng.uniform(-0.05, 0.05),
                ax=rng.uniform(0.70, 0.85), ay=rng.uniform(0.80, 0.92),
                theta=rng.uniform(-0.2, 0.2), p=rng.uniform(0.3, 0.5))
    tissues = []
    for _ in range(rng.integers(3, 7)):
        tissues.append(dict(kind=("rect" if rng.random() < 0.3 else "ellipse"),
                            r=rng.uniform(0.0, 0.45), phi=rng.uniform(0, 2 * np.pi),
                            ax=rng.uniform(0.10, 0.35), ay=rng.uniform(0.08, 0.30),
                            theta=rng.uniform(0, np.pi), p=rng.uniform(0.05, 1.0),
                            zc=rng.uniform(-0.8, 0.8), dz=rng.uniform(0.6, 1.6)))
    lesions = []
    for _ in range(rng.integers(0, 4)):
        lesions.append(dict(r=rng.uniform(0.0, 0.5), phi=rng.uniform(0, 2 * np.pi),
                            ax=rng.uniform(0.04, 0.10), ay=rng.uniform(0.04, 0.10),
                            theta=rng.uniform(0, np.pi), zc=rng.uniform(-0.5, 0.5),
                            dz=rng.uniform(0.3, 0.8)))
    gains = rng.uniform(0.9, 1.1, size=3)
    return dict(head=head, tissues=tissues, lesions=lesions, gains=gains)


def _phantom_fields(anatomy: dict, z: float, h: int, w: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tissue parameter field p, head mask and lesion mask for one slice."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h * 2 - 1, (np.arange(w) + 0.5) / w * 2 - 1,
                         indexing="ij")
    hd = anatomy["head"]
    shrink = np.sqrt(max(1.0 - 0.6 * z * z, 0.05))
    head = _shape_mask(xs, ys, hd["cx"], hd["cy"], hd["ax"] * shrink, hd["ay"] * shrink,
                       hd["theta"], "ellipse")
    p = np.where(head, hd["p"], 0.0)

    def placed(item, scale):
        cx = hd["cx"] + item["r"] * shrink * np.cos(item["phi"])
        cy = hd["cy"] + item["r"] * shrink * np.sin(item["phi"])
        return cx, cy, item["ax"] * scale, item["ay"] * scale

    for t in anatomy["tissues"]:
        rel = (z - t["zc"]) / t["dz"]
        if abs(rel) >= 1.0:
            continue
        cx, cy, ax, ay = placed(t, np.sqrt(1.0 - rel * rel) * shrink)
        p = np.where(head & _shape_mask(xs, ys, cx, cy, ax, ay, t["theta"], t["kind"]), t["p"], p)
    lesion = np.zeros((h, w), dtype=bool)
    for les in anatomy["lesions"]:
        rel = (z - les["zc"]) / les["dz"]
        if abs(rel) >= 1.0:
            continue
        cx, cy, ax, ay = placed(les, np.sqrt(1.0 - rel * rel))
        lesion |= _shape_mask(xs, ys, cx, cy, ax, ay, les["theta"], "ellipse")
    lesion &= head
    p = ndimage.gaussian_filter(p, 0.7)
    les = ndimage.gaussian_filter(lesion.astype(np.float64), 0.7)
    return p, head.astype(np.float64), les


# unit-scale modality maps of the tissue field, lesion contrast, raw scanner scale
_MODALITY_MAPS = (lambda p: p, lambda p: 1.0 - p * p, lambda p: np.abs(np.sin(np.pi * p)))
_LESION_CONTRAST = (-0.25, 0.45, 0.20)
_RAW_SCALE = (1000.0, 800.0, 1200.0)


def phantom_slice(anatomy: dict, z: float, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Raw (3, H, W) intensities for one phantom cross-section."""
    p, head, les = _phantom_fields(anatomy, z, h, w)
    out = np.empty((3, h, w), dtype=np.float32)
    for i, fn in enumerate(_MODALITY_MAPS):
        img = head * fn(p) + _LESION_CONTRAST[i] * les
        img = img + rng.normal(0.0, 0.01, size=(h, w))
        out[i] = np.clip(img, 0.0, None) * _RAW_SCALE[i] * anatomy["gains"][i]
    return out


def generate_phantom_dataset(root: PathLike, seed: int = 0, subjects: int = 12,
                             slices: int = 16, height: int = 128, width: Optional[int] = None,
                             splits: Optional[Tuple[int, int, int]] = None) -> Dataset:
    """Write a procedural T1/T2/PD-like dataset and return it loaded.

    Every subject has its own random anatomy (a head ellipse with 3-6
    tissue compartments and 0-3 lesions); cross-sections move through the
    3-D layout.  The three modalities are fixed nonlinear maps of a shared
    tissue field, so channels are pixel-aligned.  Output depends only on
    ``seed`` and the indices.
    """
    width = height if width is None else width
    for n in (height, width):
        if n < 70 or n % 16:
            raise ConfigError(f"phantom size {n} must be >= 70 and divisible by 16")
    if slices < 1:
        raise ConfigError("need at least one slice per subject")
    splits = default_splits(subjects) if splits is None else tuple(splits)
    if sum(splits) != subjects or min(splits) < 0:
        raise ConfigError(f"splits {splits} do not add up to {subjects} subjects")
    labels = ["train"] * splits[0] + ["val"] * splits[1] + ["test"] * splits[2]

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    depths = np.linspace(-0.6, 0.6, slices) if slices > 1 else np.zeros(1)
    entries = []
    for s in range(subjects):
        sid = f"sub-{s:03d}"
        anatomy = _draw_subject(np.random.default_rng([seed, s]))
        (root / sid).mkdir(exist_ok=True)
        slice_entries = []
        for k, z in enumerate(depths):
            raw = phantom_slice(anatomy, float(z), height, width, np.random.default_rng([seed, s, k]))
            files = []
            for i, mod in enumerate(PHANTOM_MODALITIES):
                rel = f"{sid}/{k:03d}_{mod}.mms"
                write_slice(root / rel, raw[i])
                files.append(rel)
            slice_entries.append(dict(index=k, files=files,
                                      max=[float(v) for v in raw.reshape(3, -1).max(axis=1)]))
        entries.append(dict(id=sid, split=labels[s], slices=slice_entries))
    manifest = dict(modalities=list(PHANTOM_MODALITIES), shape=[height, width], subjects=entries)
    write_manifest(root, manifest)
    return Dataset(root, manifest)
