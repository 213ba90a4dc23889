"""Synthetic slice corpus: phantoms, dose degradation, augmentation, storage.

Clean slices are elliptical phantoms on a flat background with anti-aliased
rims; the degraded counterpart adds i.i.d. Gaussian noise plus a few
one-pixel-wide streak lines, then clips to the display range. Every stage
is a pure function of its seed, with independent substreams (gaussian vs
streaks, phantom vs noise) derived by seed-sequence splitting so that
same-seed renders can be differenced to isolate a single component.

On disk a slice is a "CTSL" binary container; a corpus is
<root>/clean/<patient_id>/<index>.ctsl plus the mirrored noisy/ subtree.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError, ShapeError
from .tensor import Tensor

SLICE_MAGIC = b"CTSL"
SLICE_VERSION = 1
KINDS = ("clean", "noisy", "denoised")
PATIENT_PREFIX = "L"
PATIENT_SUFFIX = "-syn"


@dataclass(frozen=True)
class SliceImage:
    pixels: Tensor
    patient_id: str
    slice_index: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 1:
            raise ShapeError(f"pixels must be (1, H, W), got {self.pixels.shape}")
        d = self.pixels.data
        if not np.isfinite(d).all():
            raise ContractError("slice pixels must be finite")
        if d.min() < 0.0 or d.max() > 255.0:
            raise ContractError(
                f"slice pixels must lie in [0, 255], got [{d.min()}, {d.max()}]"
            )
        if self.slice_index < 0:
            raise ContractError(f"slice_index must be >= 0, got {self.slice_index}")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 128
    ellipse_count: tuple[int, int] = (3, 8)
    intensity: tuple[float, float] = (40.0, 220.0)
    background: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ContractError(f"phantom size must be >= 8, got {self.size}")
        lo, hi = self.ellipse_count
        if lo < 0 or hi < lo:
            raise ContractError(f"bad ellipse count range {self.ellipse_count}")
        ilo, ihi = self.intensity
        if not (0.0 <= ilo <= ihi <= 255.0):
            raise ContractError(f"intensity range {self.intensity} outside [0, 255]")
        if not 0.0 <= self.background <= 255.0:
            raise ContractError(f"background {self.background} outside [0, 255]")


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 15.0
    streak_count: int = 4
    streak_amplitude: float = 25.0
    streak_angle_range: tuple[float, float] = (0.0, 180.0)
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0.0:
            raise ContractError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if self.streak_count < 0:
            raise ContractError(f"streak_count must be >= 0, got {self.streak_count}")
        if self.streak_amplitude < 0.0:
            raise ContractError(f"streak_amplitude must be >= 0, got {self.streak_amplitude}")
        lo, hi = self.streak_angle_range
        if hi < lo:
            raise ContractError(f"bad angle range {self.streak_angle_range}")


def patient_name(index: int) -> str:
    return f"{PATIENT_PREFIX}{500 + index}{PATIENT_SUFFIX}"


def generate_phantom(spec: PhantomSpec) -> SliceImage:
    """Background plus random ellipses with a ~2-pixel anti-aliased rim."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    img = np.full((size, size), spec.background, np.float64)
    count = int(rng.integers(spec.ellipse_count[0], spec.ellipse_count[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    axis_hi = max(size / 4.0, 3.0)  # keep the draw valid at the minimum size
    for _ in range(count):
        a = float(rng.uniform(3.0, axis_hi))
        b = float(rng.uniform(3.0, axis_hi))
        cx = float(rng.uniform(a + 1.0, size - a - 1.0))
        cy = float(rng.uniform(b + 1.0, size - b - 1.0))
        value = float(rng.uniform(*spec.intensity))
        r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
        # radial alpha ramp ~1 px wide either side of the rim
        alpha = np.clip(0.5 + (1.0 - r) * min(a, b) / 2.0, 0.0, 1.0)
        img = img * (1.0 - alpha) + value * alpha
    return SliceImage(Tensor(img[None].astype(np.float32)), "phantom", 0, "clean")


def _streak_field(shape: tuple[int, int], spec: NoiseSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """Additive field of 1-pixel-wide full-crossing lines at random angles."""
    h, w = shape
    field = np.zeros((h, w), np.float64)
    for _ in range(spec.streak_count):
        angle = np.deg2rad(rng.uniform(*spec.streak_angle_range))
        cx = rng.uniform(0, w - 1)
        cy = rng.uniform(0, h - 1)
        amp = spec.streak_amplitude * (1.0 if rng.integers(0, 2) else -1.0)
        dx, dy = np.cos(angle), np.sin(angle)
        if abs(dx) >= abs(dy):
            x = np.arange(w)
            y = np.rint(cy + (x - cx) * dy / dx).astype(int)
            keep = (y >= 0) & (y < h)
            field[y[keep], x[keep]] += amp
        else:
            y = np.arange(h)
            x = np.rint(cx + (y - cy) * dx / dy).astype(int)
            keep = (x >= 0) & (x < w)
            field[y[keep], x[keep]] += amp
    return field


def inject_noise(clean: SliceImage, spec: NoiseSpec) -> SliceImage:
    """Gaussian noise, then streak lines, then clip to the display range.

    The gaussian and streak substreams are split from the seed, so two
    renders with the same seed and different streak counts share the exact
    same gaussian component.
    """
    if clean.kind != "clean":
        raise ContractError(f"can only degrade a clean slice, got kind {clean.kind!r}")
    img = clean.pixels.data[0].astype(np.float64)
    gauss_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    streak_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    out = img.copy()
    if spec.gaussian_sigma > 0.0:
        out = out + gauss_rng.normal(0.0, spec.gaussian_sigma, size=img.shape)
    out = out + _streak_field(img.shape, spec, streak_rng)
    out = np.clip(out, 0.0, 255.0)
    return SliceImage(Tensor(out[None].astype(np.float32)), clean.patient_id,
                      clean.slice_index, "noisy")


AUGMENT_CHOICES = tuple((k, f) for k in range(4) for f in (False, True))


def augment(pair: tuple[SliceImage, SliceImage], seed: int) -> tuple[SliceImage, SliceImage]:
    """One shared right-angle rotation / horizontal flip for both members."""
    clean, noisy = pair
    if clean.pixels.shape != noisy.pixels.shape:
        raise ShapeError(
            f"pair shapes differ: {clean.pixels.shape} vs {noisy.pixels.shape}"
        )
    rng = np.random.default_rng(seed)
    k, flip = AUGMENT_CHOICES[int(rng.integers(0, len(AUGMENT_CHOICES)))]

    def apply(s: SliceImage) -> SliceImage:
        data = np.rot90(s.pixels.data, k, axes=(1, 2))
        if flip:
            data = data[:, :, ::-1]
        return replace(s, pixels=Tensor(np.ascontiguousarray(data)))

    return apply(clean), apply(noisy)


def split_patients(slices: list[SliceImage], holdout_patient: str
                   ) -> tuple[list[SliceImage], list[SliceImage]]:
    """All slices of the holdout patient to test, the rest to train."""
    patients = {s.patient_id for s in slices}
    if holdout_patient not in patients:
        raise ContractError(
            f"holdout patient {holdout_patient!r} not in corpus "
            f"({sorted(patients)})"
        )
    train = [s for s in slices if s.patient_id != holdout_patient]
    test = [s for s in slices if s.patient_id == holdout_patient]
    if not train:
        warnings.warn("holdout covers every patient; training set is empty",
                      stacklevel=2)
    return train, test


# ---------------------------------------------------------------------------
# container format


_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


def save_slice(s: SliceImage, path) -> None:
    h, w = s.pixels.shape[1], s.pixels.shape[2]
    pid = s.patient_id.encode("utf-8")
    parts = [SLICE_MAGIC,
             struct.pack("<I", SLICE_VERSION),
             struct.pack("<I", h),
             struct.pack("<I", w),
             struct.pack("<B", _KIND_CODE[s.kind]),
             struct.pack("<I", len(pid)), pid,
             struct.pack("<I", s.slice_index),
             np.ascontiguousarray(s.pixels.data[0], dtype="<f4").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_slice(path) -> SliceImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise IntegrityError(f"slice file truncated in {what}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4, "magic") != SLICE_MAGIC:
        raise IntegrityError("not a slice file (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != SLICE_VERSION:
        raise IntegrityError(f"unsupported slice format version {version}")
    h = struct.unpack("<I", take(4, "height"))[0]
    w = struct.unpack("<I", take(4, "width"))[0]
    kind_code = struct.unpack("<B", take(1, "kind"))[0]
    if kind_code >= len(KINDS):
        raise IntegrityError(f"unknown slice kind code {kind_code}")
    pid_len = struct.unpack("<I", take(4, "patient id length"))[0]
    if pid_len > 4096:
        raise IntegrityError(f"implausible patient id length {pid_len}")
    pid = take(pid_len, "patient id").decode("utf-8", errors="replace")
    index = struct.unpack("<I", take(4, "slice index"))[0]
    data = take(4 * h * w, "pixel data")
    if off != len(blob):
        raise IntegrityError(f"{len(blob) - off} trailing bytes after pixel data")
    pixels = np.frombuffer(data, dtype="<f4").reshape(1, h, w).astype(np.float32)
    return SliceImage(Tensor(pixels), pid, index, KINDS[kind_code])


def export_pgm(s: SliceImage, path) -> None:
    """16-bit grayscale PGM; display units scaled by 257 and truncated."""
    data = s.pixels.data[0]
    samples = (data.astype(np.float64) * 257.0).astype(np.uint16)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(samples.astype(">u2").tobytes())


# ---------------------------------------------------------------------------
# corpus


def _slice_seed(master_seed: int, patient: int, index: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, patient, index, stream])


def build_corpus(root, patients: int = 10, slices_per_patient: int = 20,
                 size: int = 128, master_seed: int = 0,
                 gaussian_sigma: float = 15.0, streak_count: int = 4,
                 streak_amplitude: float = 25.0) -> list[tuple[SliceImage, SliceImage]]:
    """Generate and store the synthetic corpus; returns (clean, noisy) pairs."""
    if patients < 1 or slices_per_patient < 1:
        raise ContractError("corpus needs at least one patient and one slice")
    root = Path(root)
    pairs = []
    for p in range(patients):
        pid = patient_name(p)
        for s in range(slices_per_patient):
            phantom_seed = int(_slice_seed(master_seed, p, s, 0).generate_state(1)[0])
            noise_seed = int(_slice_seed(master_seed, p, s, 1).generate_state(1)[0])
            clean = generate_phantom(PhantomSpec(size=size, seed=phantom_seed))
            clean = replace(clean, patient_id=pid, slice_index=s)
            noisy = inject_noise(clean, NoiseSpec(
                gaussian_sigma=gaussian_sigma, streak_count=streak_count,
                streak_amplitude=streak_amplitude, seed=noise_seed))
            for kind, img in (("clean", clean), ("noisy", noisy)):
                folder = root / kind / pid
                folder.mkdir(parents=True, exist_ok=True)
                save_slice(img, folder / f"{s:04d}.ctsl")
            pairs.append((clean, noisy))
    return pairs


def load_corpus(root) -> list[tuple[SliceImage, SliceImage]]:
    """Read back (clean, noisy) pairs, ordered by (patient, slice index)."""
    root = Path(root)
    clean_root, noisy_root = root / "clean", root / "noisy"
    if not clean_root.is_dir() or not noisy_root.is_dir():
        raise ContractError(f"{root} does not contain clean/ and noisy/ subtrees")
    pairs = []
    for patient_dir in sorted(clean_root.iterdir()):
        if not patient_dir.is_dir():
            continue
        for path in sorted(patient_dir.glob("*.ctsl")):
            clean = load_slice(path)
            twin = noisy_root / patient_dir.name / path.name
            if not twin.exists():
                raise ContractError(f"missing noisy twin for {path}")
            noisy = load_slice(twin)
            if clean.pixels.shape != noisy.pixels.shape:
                raise ContractError(f"pair shape mismatch for {path}")
            pairs.append((clean, noisy))
    if not pairs:
        raise ContractError(f"no slice pairs found under {root}")
    return pairs
