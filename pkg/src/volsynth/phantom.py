"""Synthetic multi-slot volumetric phantoms, missing patterns, and dataset IO.

A subject is an ``[m, D, H, W]`` float32 array in [0, 1]. In brain mode the
m slots are modality-like renderings of one shared anatomy (distinct
monotone transfer curves plus slot-specific lesion contrast). In cardiac
mode the slots are the slices of a single volume whose structures drift
smoothly with depth, stored as ``[m, 1, H, W]``.

Generation is a pure function of (global_seed, subject_id, params):
fields are accumulated slot by slot in a fixed blob order so regeneration
is bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Depth compression factor of the tokenizer (three stride-2 stages per axis).
# Cardiac missing runs are aligned to it so image-space missingness maps to
# whole latent depth planes.
DEPTH_FACTOR = 8

MODES = ("brain", "cardiac")


class DatasetError(Exception):
    """Raised for malformed manifests, files, or shape mismatches."""


@dataclass(frozen=True)
class TransferCurve:
    """Monotone intensity mapping applied to the shared anatomy field."""

    gamma: float = 1.0
    scale: float = 1.0
    offset: float = 0.0
    inverted: bool = False

    def apply(self, a: np.ndarray) -> np.ndarray:
        base = np.power(a, self.gamma)
        if self.inverted:
            base = 1.0 - base
        return self.offset + self.scale * base


def default_brain_curves(m: int) -> tuple[TransferCurve, ...]:
    """Distinct per-slot curves (one inverting) so slots stay identifiable."""
    presets = [
        TransferCurve(gamma=0.5, scale=0.80, offset=0.02),
        TransferCurve(gamma=2.2, scale=1.00, offset=0.00),
        TransferCurve(gamma=0.8, scale=0.95, offset=0.03, inverted=True),
        TransferCurve(gamma=1.0, scale=0.40, offset=0.55),
        TransferCurve(gamma=1.8, scale=0.75, offset=0.15),
        TransferCurve(gamma=0.65, scale=0.60, offset=0.25, inverted=True),
    ]
    if m > len(presets):
        raise ValueError(f"no default curves beyond m={len(presets)}, got m={m}")
    return tuple(presets[:m])


@dataclass(frozen=True)
class GeneratorParams:
    """Configuration for one phantom family.

    ``shape`` is the per-slot spatial shape (D, H, W). Brain slots are full
    3D volumes; cardiac slots are single slices, shape (1, H, W), with the
    slot axis acting as depth.
    """

    mode: str
    m: int
    shape: tuple[int, int, int]
    blob_count: tuple[int, int] = (2, 4)
    lesion_count: tuple[int, int] = (1, 3)
    curves: tuple[TransferCurve, ...] = ()
    lesion_contrast: tuple[float, ...] = ()
    bias_amplitude: float = 0.05
    drift_amplitude: float = 0.08  # cardiac: center drift across depth

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.m < 2:
            raise ValueError(f"need at least 2 slots, got m={self.m}")
        d, h, w = self.shape
        if self.mode == "brain":
            bad = [n for n in (d, h, w) if n % DEPTH_FACTOR != 0]
            if bad:
                raise ValueError(
                    f"brain dims {self.shape} must be divisible by {DEPTH_FACTOR}"
                )
            if not self.curves:
                object.__setattr__(self, "curves", default_brain_curves(self.m))
            if not self.lesion_contrast:
                base = (0.0, 0.50, -0.35, 0.90, 0.25, -0.15)
                object.__setattr__(self, "lesion_contrast", base[: self.m])
            if len(self.curves) != self.m or len(self.lesion_contrast) != self.m:
                raise ValueError("curves/lesion_contrast must have one entry per slot")
        else:
            if d != 1:
                raise ValueError(f"cardiac slots are single slices, got depth {d}")
            if self.m % DEPTH_FACTOR != 0 or h % DEPTH_FACTOR != 0 or w % DEPTH_FACTOR != 0:
                raise ValueError(
                    f"cardiac (m, H, W)=({self.m}, {h}, {w}) must be divisible by {DEPTH_FACTOR}"
                )
            if not self.curves:
                object.__setattr__(self, "curves", (TransferCurve(gamma=0.8, scale=0.9, offset=0.05),))
            if not self.lesion_contrast:
                object.__setattr__(self, "lesion_contrast", (0.5,))


@dataclass
class SubjectVolume:
    subject_id: int
    mode: str
    data: np.ndarray  # [m, D, H, W] float32 in [0, 1]
    modality_names: list[str]

    @property
    def m(self) -> int:
        return self.data.shape[0]


def _axis_coords(n: int) -> np.ndarray:
    return (np.arange(n, dtype=np.float64) + 0.5) / n


def _blob_field(coords, centers, radii, amps) -> np.ndarray:
    """Sum of Gaussian-falloff ellipsoids, accumulated in blob order."""
    zz, yy, xx = coords
    out = np.zeros(zz.shape, dtype=np.float64)
    for c, r, a in zip(centers, radii, amps):
        q = ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2
        out += a * np.exp(-0.5 * q)
    return out


def _subject_rng(global_seed: int, subject_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([global_seed, subject_id])))


def generate_subject(global_seed: int, subject_id: int, params: GeneratorParams) -> SubjectVolume:
    """Render one deterministic phantom subject.

    Brain: one shared anatomy (sum of Gaussian ellipsoids squashed to
    [0, 1)) plus lesion blobs; slot i = clip(g_i(anatomy) +
    kappa_i * lesions + shared smooth bias, 0, 1). Cardiac: one anatomy
    whose blob centers drift smoothly along the slice axis, rendered
    through a single curve.
    """
    rng = _subject_rng(global_seed, subject_id)
    d, h, w = params.shape

    n_blobs = int(rng.integers(params.blob_count[0], params.blob_count[1] + 1))
    n_lesions = int(rng.integers(params.lesion_count[0], params.lesion_count[1] + 1))

    blob_centers = rng.uniform(0.22, 0.78, size=(n_blobs, 3))
    blob_radii = rng.uniform(0.20, 0.42, size=(n_blobs, 3))
    blob_amps = rng.uniform(0.6, 1.0, size=n_blobs)
    lesion_centers = rng.uniform(0.25, 0.75, size=(max(n_lesions, 1), 3))
    lesion_radii = rng.uniform(0.07, 0.15, size=(max(n_lesions, 1), 3))
    lesion_amps = rng.uniform(0.6, 1.0, size=max(n_lesions, 1))
    bias_center = rng.uniform(0.0, 1.0, size=3)
    bias_sign = 1.0 if rng.uniform() < 0.5 else -1.0

    if params.mode == "brain":
        coords = np.meshgrid(_axis_coords(d), _axis_coords(h), _axis_coords(w), indexing="ij")
        anatomy = 1.0 - np.exp(-1.0 * _blob_field(coords, blob_centers, blob_radii, blob_amps))
        lesions = np.zeros_like(anatomy)
        if n_lesions > 0:
            lesions = np.clip(
                _blob_field(coords, lesion_centers[:n_lesions], lesion_radii[:n_lesions], lesion_amps[:n_lesions]),
                0.0,
                1.0,
            )
        q = sum(((coords[k] - bias_center[k]) / 1.5) ** 2 for k in range(3))
        bias = bias_sign * params.bias_amplitude * np.exp(-0.5 * q)
        slots = []
        for i in range(params.m):
            img = params.curves[i].apply(anatomy) + params.lesion_contrast[i] * lesions + bias
            slots.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        data = np.stack(slots, axis=0)
        names = [f"slot{i}" for i in range(params.m)]
    else:
        # slice axis = depth; blob centers drift smoothly with depth
        drift_freq = rng.uniform(0.5, 1.5, size=(n_blobs, 2))
        drift_phase = rng.uniform(0.0, 2 * math.pi, size=(n_blobs, 2))
        zc = _axis_coords(params.m)
        coords = np.meshgrid(zc, _axis_coords(h), _axis_coords(w), indexing="ij")
        zz, yy, xx = coords
        anatomy_raw = np.zeros((params.m, h, w), dtype=np.float64)
        for k in range(n_blobs):
            cy = blob_centers[k, 1] + params.drift_amplitude * np.sin(
                2 * math.pi * drift_freq[k, 0] * zz + drift_phase[k, 0]
            )
            cx = blob_centers[k, 2] + params.drift_amplitude * np.sin(
                2 * math.pi * drift_freq[k, 1] * zz + drift_phase[k, 1]
            )
            q = (
                ((zz - blob_centers[k, 0]) / blob_radii[k, 0]) ** 2
                + ((yy - cy) / blob_radii[k, 1]) ** 2
                + ((xx - cx) / blob_radii[k, 2]) ** 2
            )
            anatomy_raw += blob_amps[k] * np.exp(-0.5 * q)
        anatomy = 1.0 - np.exp(-1.0 * anatomy_raw)
        lesions = np.zeros_like(anatomy)
        if n_lesions > 0:
            lesions = np.clip(
                _blob_field(coords, lesion_centers[:n_lesions], lesion_radii[:n_lesions], lesion_amps[:n_lesions]),
                0.0,
                1.0,
            )
        q = sum(((coords[k] - bias_center[k]) / 1.5) ** 2 for k in range(3))
        bias = bias_sign * params.bias_amplitude * np.exp(-0.5 * q)
        vol = params.curves[0].apply(anatomy) + params.lesion_contrast[0] * lesions + bias
        data = np.clip(vol, 0.0, 1.0).astype(np.float32)[:, None, :, :]
        names = [f"slice{i:02d}" for i in range(params.m)]

    return SubjectVolume(subject_id=subject_id, mode=params.mode, data=data, modality_names=names)


# ---------------------------------------------------------------------------
# Missing patterns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MissingPattern:
    """Partition of the m slot indices into available and missing sets."""

    m: int
    missing: tuple[int, ...]
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        miss = tuple(sorted(set(self.missing)))
        object.__setattr__(self, "missing", miss)
        if not 1 <= len(miss) <= self.m - 1:
            raise ValueError(f"need 1 <= |C| <= m-1, got |C|={len(miss)} with m={self.m}")
        if any(i < 0 or i >= self.m for i in miss):
            raise ValueError(f"missing indices {miss} out of range for m={self.m}")
        if self.mode == "cardiac":
            lo, hi = miss[0], miss[-1]
            if hi - lo + 1 != len(miss):
                raise ValueError(f"cardiac missing set must be one consecutive run, got {miss}")
            if lo % DEPTH_FACTOR != 0 or len(miss) % DEPTH_FACTOR != 0:
                raise ValueError(
                    f"cardiac run (start={lo}, length={len(miss)}) must align to {DEPTH_FACTOR}"
                )

    @property
    def available(self) -> tuple[int, ...]:
        miss = set(self.missing)
        return tuple(i for i in range(self.m) if i not in miss)

    @property
    def c(self) -> int:
        return len(self.missing)

    def unit_count(self) -> int:
        """Number of completeness units: slots (brain) or latent planes (cardiac)."""
        return self.m if self.mode == "brain" else self.m // DEPTH_FACTOR

    def missing_units(self) -> tuple[int, ...]:
        """Missing completeness units (slot indices, or depth-plane indices)."""
        if self.mode == "brain":
            return self.missing
        start = self.missing[0] // DEPTH_FACTOR
        return tuple(range(start, start + len(self.missing) // DEPTH_FACTOR))


def sample_missing_pattern(rng: np.random.Generator, m: int, mode: str) -> MissingPattern:
    """Dual-random draw: first the missing count, then the missing set.

    Brain: count uniform on {1..m-1}, then a uniform size-c subset.
    Cardiac: plane count uniform on {1..m/f-1}, then a uniform aligned
    start; the missing set is the corresponding consecutive slice run.
    """
    if mode == "brain":
        if m < 2:
            raise ValueError(f"need m >= 2, got {m}")
        c = int(rng.integers(1, m))
        miss = tuple(int(i) for i in rng.choice(m, size=c, replace=False))
        return MissingPattern(m=m, missing=miss, mode="brain")
    if mode == "cardiac":
        n_units = m // DEPTH_FACTOR
        if m % DEPTH_FACTOR != 0 or n_units < 2:
            raise ValueError(f"cardiac m={m} must be a multiple of {DEPTH_FACTOR} with >= 2 planes")
        c_units = int(rng.integers(1, n_units))
        start = int(rng.integers(0, n_units - c_units + 1)) * DEPTH_FACTOR
        miss = tuple(range(start, start + c_units * DEPTH_FACTOR))
        return MissingPattern(m=m, missing=miss, mode="cardiac")
    raise ValueError(f"unknown mode {mode!r}")


def apply_missing(vol: SubjectVolume, pattern: MissingPattern) -> tuple[np.ndarray, np.ndarray]:
    """Split a complete volume into zero-filled (incomplete, complement) parts.

    The two outputs sum to the input exactly.
    """
    if pattern.m != vol.m:
        raise ValueError(f"pattern m={pattern.m} does not match volume m={vol.m}")
    miss = list(pattern.missing)
    incomplete = vol.data.copy()
    incomplete[miss] = 0.0
    complement = vol.data.copy()
    complement[pattern.available, ...] = 0.0
    return incomplete, complement


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

MANIFEST_VERSION = "1"
MANIFEST_NAME = "manifest.json"


def split_of(subject_id: int) -> str:
    """Stable 80/20 split by subject-id hash."""
    digest = hashlib.sha256(str(subject_id).encode("utf-8")).hexdigest()
    return "test" if int(digest[:8], 16) % 5 == 4 else "train"


@dataclass
class DatasetManifest:
    version: str
    mode: str
    m: int
    shape: tuple[int, int, int]
    subject_count: int
    train_fraction: float
    test_fraction: float
    global_seed: int
    subjects: list[dict]  # {"id", "path", "split"}

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "mode": self.mode,
            "m": self.m,
            "shape": list(self.shape),
            "subject_count": self.subject_count,
            "train_fraction": self.train_fraction,
            "test_fraction": self.test_fraction,
            "global_seed": self.global_seed,
            "subjects": self.subjects,
        }
        return json.dumps(payload, indent=1, sort_keys=True)


class Dataset:
    """Read-only access to a written phantom dataset."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._by_id = {s["id"]: s for s in manifest.subjects}

    @property
    def subject_ids(self) -> list[int]:
        return [s["id"] for s in self.manifest.subjects]

    @property
    def train_ids(self) -> list[int]:
        return [s["id"] for s in self.manifest.subjects if s["split"] == "train"]

    @property
    def test_ids(self) -> list[int]:
        return [s["id"] for s in self.manifest.subjects if s["split"] == "test"]

    def load(self, subject_id: int) -> SubjectVolume:
        entry = self._by_id.get(subject_id)
        if entry is None:
            raise DatasetError(f"subject {subject_id} not in manifest")
        path = self.root / entry["path"]
        shape = (self.manifest.m, *self.manifest.shape)
        expected = 4 * int(np.prod(shape))
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise DatasetError(f"cannot read {path}: {e}") from e
        if len(raw) != expected:
            raise DatasetError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        names = (
            [f"slot{i}" for i in range(self.manifest.m)]
            if self.manifest.mode == "brain"
            else [f"slice{i:02d}" for i in range(self.manifest.m)]
        )
        return SubjectVolume(subject_id=subject_id, mode=self.manifest.mode, data=data, modality_names=names)


def write_dataset(
    root: Path,
    params: GeneratorParams,
    global_seed: int,
    subject_count: int,
    train_fraction: float = 0.8,
) -> Dataset:
    """Generate subjects and write the raw-binary dataset layout.

    Per-subject files hold IEEE-754 binary32, little-endian, C-order, no
    header. The manifest is UTF-8 JSON.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid in range(subject_count):
        vol = generate_subject(global_seed, sid, params)
        rel = f"subject_{sid:05d}.f32"
        arr = np.ascontiguousarray(vol.data.astype("<f4"))
        (root / rel).write_bytes(arr.tobytes(order="C"))
        subjects.append({"id": sid, "path": rel, "split": split_of(sid)})
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        mode=params.mode,
        m=params.m,
        shape=params.shape,
        subject_count=subject_count,
        train_fraction=train_fraction,
        test_fraction=round(1.0 - train_fraction, 12),
        global_seed=global_seed,
        subjects=subjects,
    )
    (root / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return Dataset(root, manifest)


def read_dataset(root: Path) -> Dataset:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON: {e}") from e
    if payload.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unknown version tag {payload.get('version')!r}")
    if abs(payload["train_fraction"] + payload["test_fraction"] - 1.0) > 1e-9:
        raise DatasetError(f"{path}: split fractions do not sum to 1")
    manifest = DatasetManifest(
        version=payload["version"],
        mode=payload["mode"],
        m=int(payload["m"]),
        shape=tuple(payload["shape"]),
        subject_count=int(payload["subject_count"]),
        train_fraction=float(payload["train_fraction"]),
        test_fraction=float(payload["test_fraction"]),
        global_seed=int(payload["global_seed"]),
        subjects=payload["subjects"],
    )
    expected = 4 * manifest.m * int(np.prod(manifest.shape))
    for entry in manifest.subjects:
        p = root / entry["path"]
        if not p.exists():
            raise DatasetError(f"{p}: listed in manifest but missing on disk")
        size = p.stat().st_size
        if size != expected:
            raise DatasetError(f"{p}: expected {expected} bytes, found {size}")
    return Dataset(root, manifest)


def as_encoder_input(data: np.ndarray, mode: str) -> np.ndarray:
    """View subject data as tokenizer encoding slots [S, D, H, W].

    Brain volumes encode slot by slot (S = m). A cardiac volume encodes as
    a single 3D volume whose depth axis is the slice axis (S = 1).
    """
    if mode == "brain":
        return data
    if mode == "cardiac":
        return data[:, 0][None]
    raise ValueError(f"unknown mode {mode!r}")
