"""Synthetic longitudinal cohorts of paired pre/post toy volumes.

Each subject gets a smooth "brain" volume and a post-operative copy carrying
a spherical intensity decrement (the cavity) whose location distribution
depends on the label, plus class-independent post-operative changes (smooth
low-frequency fields) that act as nuisance variation.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, NormalizationError, ParseError

COHORT_FORMAT = "trajoracle-cohort"
COHORT_VERSION = 1

AGE_RANGE = (18.0, 65.0)


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 268
    positive_fraction: float = 53 / 268
    volume_dim: int = 16
    class_separation: float = 4.0
    seed: int = 42
    # amplitude of the class-independent post-operative change fields
    nuisance_scale: float = 1.5

    def n_positive(self) -> int:
        return int(math.floor(self.n_subjects * self.positive_fraction + 0.5))

    def validate(self) -> None:
        if not isinstance(self.n_subjects, int) or self.n_subjects < 2:
            raise ConfigError("n_subjects: must be an integer >= 2")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError("positive_fraction: must lie in (0, 1)")
        if not 1 <= self.n_positive() <= self.n_subjects - 1:
            raise ConfigError(
                "positive_fraction: round(n_subjects * positive_fraction) must be "
                "in [1, n_subjects - 1]"
            )
        if not isinstance(self.volume_dim, int) or self.volume_dim < 4:
            raise ConfigError("volume_dim: must be an integer >= 4")
        if not (self.class_separation >= 0.0 and math.isfinite(self.class_separation)):
            raise ConfigError("class_separation: must be finite and >= 0")
        if not (self.nuisance_scale >= 0.0 and math.isfinite(self.nuisance_scale)):
            raise ConfigError("nuisance_scale: must be finite and >= 0")
        if not isinstance(self.seed, int) or not -(2**63) <= self.seed < 2**64:
            raise ConfigError("seed: must be a 64-bit integer")

    @classmethod
    def from_dict(cls, data: dict) -> "CohortSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cohort spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SubjectRecord:
    subject_id: str
    age: float
    sex: str
    label: int
    pre_volume: np.ndarray
    post_volume: np.ndarray

    def __post_init__(self):
        if self.sex not in ("M", "F"):
            raise ConfigError(f"{self.subject_id}: sex must be 'M' or 'F'")
        if self.label not in (0, 1):
            raise ConfigError(f"{self.subject_id}: label must be 0 or 1")
        if not self.age > 0:
            raise ConfigError(f"{self.subject_id}: age must be positive")
        check_volume(self.pre_volume)
        check_volume(self.post_volume)
        if self.pre_volume.shape != self.post_volume.shape:
            raise ConfigError(f"{self.subject_id}: pre/post dimensions differ")


def check_volume(v: np.ndarray) -> None:
    if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 4:
        raise ConfigError(f"volume must be cubic with side >= 4, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ConfigError("volume contains non-finite intensities")


def _seed_words(seed: int) -> int:
    return seed & 0xFFFFFFFFFFFFFFFF


def _grid(d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # voxel-centred coordinates scaled to [-1, 1]
    c = (np.arange(d) - (d - 1) / 2.0) / (d / 2.0)
    return np.meshgrid(c, c, c, indexing="ij")


def _nuisance_bank(d: int) -> np.ndarray:
    """Fixed smooth fields shared by every subject (low-frequency cosines)."""
    x, y, z = _grid(d)
    freqs = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1), (1, 0, 1)]
    bank = [np.cos(0.5 * np.pi * fx * (x + 1)) * np.cos(0.5 * np.pi * fy * (y + 1))
            * np.cos(0.5 * np.pi * fz * (z + 1)) for fx, fy, fz in freqs]
    return np.stack(bank)


def _subject_volumes(spec: CohortSpec, index: int, label: int, bank: np.ndarray):
    d = spec.volume_dim
    rng = np.random.default_rng([_seed_words(spec.seed), 1, index])
    x, y, z = _grid(d)

    radii = np.array([0.82, 0.72, 0.76]) * rng.uniform(0.95, 1.05, size=3)
    ell = (x / radii[0]) ** 2 + (y / radii[1]) ** 2 + (z / radii[2]) ** 2
    brain = 1.0 / (1.0 + np.exp((ell - 1.0) * 12.0))
    coef = rng.normal(0.0, 0.08, size=bank.shape[0])
    anatomy = 1.0 + np.tensordot(coef, bank, axes=1)
    pre = 0.05 + brain * anatomy + rng.normal(0.0, 0.02, size=x.shape)

    # cavity depth (distance from the centre, voxels) carries the class signal;
    # direction is isotropic so axis flips leave the class statistics unchanged
    scale = d / 16.0
    jitter = 1.0 * scale
    limit = 0.45 * d - 2.0 * scale
    depth = 0.5 * limit + (2 * label - 1) * 0.5 * spec.class_separation * jitter
    depth = float(np.clip(depth + rng.normal(0.0, jitter), 0.0, limit))
    direction = rng.normal(size=3)
    direction /= max(float(np.linalg.norm(direction)), 1e-12)
    centre = depth * direction
    half = (d - 1) / 2.0
    idx = np.arange(d) - half
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    dist = np.sqrt((gx - centre[0]) ** 2 + (gy - centre[1]) ** 2 + (gz - centre[2]) ** 2)
    radius = 2.0 * scale * rng.uniform(0.9, 1.1)
    cavity = 1.0 / (1.0 + np.exp((dist - radius) * 3.0))

    change = np.tensordot(rng.normal(0.0, spec.nuisance_scale, size=bank.shape[0]), bank, axes=1)
    post = pre * (1.0 - cavity) + 0.05 * cavity + brain * change
    post = post + rng.normal(0.0, 0.02, size=x.shape)

    age = round(float(rng.uniform(*AGE_RANGE)), 1)
    sex = "M" if rng.random() < 0.5 else "F"
    return age, sex, pre, post


def generate_cohort(spec: CohortSpec) -> list[SubjectRecord]:
    """Deterministic cohort; each subject draws from its own (seed, index) stream."""
    spec.validate()
    n_pos = spec.n_positive()
    label_rng = np.random.default_rng([_seed_words(spec.seed), 0])
    labels = np.zeros(spec.n_subjects, dtype=int)
    labels[label_rng.permutation(spec.n_subjects)[:n_pos]] = 1
    bank = _nuisance_bank(spec.volume_dim)
    width = max(3, len(str(spec.n_subjects - 1)))
    records = []
    for i in range(spec.n_subjects):
        age, sex, pre, post = _subject_volumes(spec, i, int(labels[i]), bank)
        records.append(SubjectRecord(f"s{i:0{width}d}", age, sex, int(labels[i]), pre, post))
    return records


def zscore_normalize(v: np.ndarray) -> np.ndarray:
    """Z-score the whole volume with statistics of the voxels above its global mean."""
    v = np.asarray(v, dtype=np.float64)
    mask = v > v.mean()
    if not mask.any():
        raise NormalizationError("no voxel exceeds the volume mean (constant volume)")
    sel = v[mask]
    mu = sel.mean()
    sigma = sel.std()
    if not sigma > 0:
        raise NormalizationError("zero spread among supra-mean voxels")
    return (v - mu) / sigma


def crop_or_pad(v: np.ndarray, target: int) -> np.ndarray:
    """Centre-crop or zero-pad every axis to ``target``; odd remainders go high."""
    if target < 1:
        raise ConfigError("target must be >= 1")
    out = np.asarray(v, dtype=np.float64)
    for axis in range(out.ndim):
        n = out.shape[axis]
        if n > target:
            lo = (n - target) // 2
            out = np.take(out, np.arange(lo, lo + target), axis=axis)
        elif n < target:
            lo = (target - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (lo, target - n - lo)
            out = np.pad(out, pad)
    return out


def preprocess(v: np.ndarray, target: int) -> np.ndarray:
    return crop_or_pad(zscore_normalize(v), target)


# ---------------------------------------------------------------- file format

def _record_to_json(r: SubjectRecord) -> str:
    return json.dumps({
        "subject_id": r.subject_id,
        "age": r.age,
        "sex": r.sex,
        "label": r.label,
        "dims": list(r.pre_volume.shape),
        "pre_voxels": r.pre_volume.ravel().tolist(),
        "post_voxels": r.post_volume.ravel().tolist(),
    })


def write_cohort(path, records: Iterable[SubjectRecord], spec: CohortSpec | None = None) -> None:
    """Write JSON lines: a header carrying the spec and record count, then one subject per line."""
    records = list(records)
    header = {
        "format": COHORT_FORMAT,
        "version": COHORT_VERSION,
        "n_records": len(records),
        "spec": asdict(spec) if spec is not None else None,
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".cohort-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for r in records:
                fh.write(_record_to_json(r) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_record(obj, lineno: int) -> SubjectRecord:
    try:
        dims = tuple(int(x) for x in obj["dims"])
        pre = np.array(obj["pre_voxels"], dtype=np.float64)
        post = np.array(obj["post_voxels"], dtype=np.float64)
        n = int(np.prod(dims))
        if len(dims) != 3 or pre.size != n or post.size != n:
            raise ParseError(f"line {lineno}: voxel count does not match dims {dims}")
        return SubjectRecord(
            subject_id=str(obj["subject_id"]),
            age=float(obj["age"]),
            sex=obj["sex"],
            label=int(obj["label"]),
            pre_volume=pre.reshape(dims),
            post_volume=post.reshape(dims),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {lineno}: bad record ({exc})") from exc


def read_cohort_with_spec(path) -> tuple[list[SubjectRecord], CohortSpec | None]:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"line 1: header is not JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != COHORT_FORMAT:
        raise ParseError("line 1: not a cohort file")
    if header.get("version") != COHORT_VERSION:
        raise ParseError(f"line 1: unsupported version {header.get('version')!r}")
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: record is not JSON ({exc})") from exc
        rec = _parse_record(obj, lineno)
        if rec.subject_id in seen:
            raise ParseError(f"line {lineno}: duplicate subject_id {rec.subject_id!r}")
        seen.add(rec.subject_id)
        records.append(rec)
    if len(records) != header.get("n_records"):
        raise ParseError(
            f"line {len(lines) + 1}: expected {header.get('n_records')} records, "
            f"found {len(records)} (truncated file?)"
        )
    spec = CohortSpec.from_dict(header["spec"]) if header.get("spec") else None
    return records, spec


def read_cohort(path) -> list[SubjectRecord]:
    return read_cohort_with_spec(path)[0]


def records_equal(a: SubjectRecord, b: SubjectRecord) -> bool:
    return (
        a.subject_id == b.subject_id
        and a.age == b.age
        and a.sex == b.sex
        and a.label == b.label
        and a.pre_volume.shape == b.pre_volume.shape
        and np.array_equal(a.pre_volume, b.pre_volume)
        and np.array_equal(a.post_volume, b.post_volume)
    )
