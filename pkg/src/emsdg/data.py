"""Synthetic labeled volumes grouped into cohorts with controllable domain shift.

Each sample is a single sphere whose radius and contrast depend on the class,
passed through a cohort-specific acquisition model: gain, a smooth polynomial
bias field, additive noise from a chosen family, and a power-law intensity
warp. The noise family and warp move the third and fourth intensity moments
while leaving the geometry (and thus the label) intact.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

VOL_MAGIC = "EMVOL v1"
NOISE_FAMILIES = ("gaussian", "lognormal", "student_t")
# bias-field monomials over normalized coordinates (u, v, w) in [-1, 1]
BIAS_TERMS = ("1", "u", "v", "w", "uu", "vv", "ww", "uv", "uw", "vw")
# normalization headroom, in noise scales, on each side of the noise-free range
NOISE_MARGIN = 4.0


@dataclass
class NoiseSpec:
    family: str = "gaussian"
    scale: float = 0.05
    shape: float = 0.0  # lognormal: sigma of log; student_t: degrees of freedom

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"noise family must be one of {NOISE_FAMILIES}, got {self.family!r}")
        if self.scale < 0:
            raise ValueError("noise scale must be >= 0")
        if self.family == "student_t" and not self.shape > 4:
            raise ValueError(f"student_t needs nu > 4 for finite kurtosis, got {self.shape}")
        if self.family == "lognormal" and self.scale > 0 and not self.shape > 0:
            raise ValueError("lognormal needs a positive log-sigma")


@dataclass
class CohortSpec:
    name: str
    n_per_class: tuple[int, ...]
    radii: tuple[float, ...] = (9.0, 7.5, 6.0)
    contrasts: tuple[float, ...] = (0.9, 0.8, 0.7)
    volume_size: int = 32
    gain: float = 1.0
    bias: tuple[float, ...] = (0.0,) * len(BIAS_TERMS)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    warp: float = 1.0
    jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        self.n_per_class = tuple(int(n) for n in self.n_per_class)
        self.radii = tuple(float(r) for r in self.radii)
        self.contrasts = tuple(float(c) for c in self.contrasts)
        self.bias = tuple(float(b) for b in self.bias) + (0.0,) * (len(BIAS_TERMS) - len(self.bias))
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        K = len(self.n_per_class)
        if len(self.radii) != K or len(self.contrasts) != K:
            raise ValueError(f"cohort {self.name}: need {K} radii and contrasts")
        if len(self.bias) != len(BIAS_TERMS):
            raise ValueError(f"cohort {self.name}: at most {len(BIAS_TERMS)} bias coefficients")
        diffs = np.diff(self.radii)
        if K > 1 and not (np.all(diffs < 0) or np.all(diffs > 0)):
            raise ValueError(f"cohort {self.name}: radii must be strictly ordered, got {self.radii}")
        if not all(0 < c <= 1 for c in self.contrasts):
            raise ValueError(f"cohort {self.name}: contrasts must lie in (0, 1]")
        if not self.gain > 0 or not self.warp > 0:
            raise ValueError(f"cohort {self.name}: gain and warp must be > 0")
        if self.volume_size < 4:
            raise ValueError("volume_size must be >= 4")

    @property
    def num_classes(self) -> int:
        return len(self.n_per_class)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CohortSpec":
        d = json.loads(text)
        d["noise"] = NoiseSpec(**d["noise"])
        return cls(**d)


@dataclass
class Sample:
    volume: np.ndarray  # float32, (1, D, H, W), values in [0, 1]
    label: int
    cohort: str
    id: str


def sample_rng(spec: CohortSpec, sample_id: str) -> np.random.Generator:
    """Independent stream per (cohort seed, cohort name, sample id)."""
    key = zlib.crc32(f"{spec.name}/{sample_id}".encode("utf-8"))
    return np.random.default_rng([spec.seed, key])


def _grid(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ax = np.arange(n, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def bias_field(spec: CohortSpec) -> np.ndarray:
    n = spec.volume_size
    u, v, w = (2.0 * g / (n - 1) - 1.0 for g in _grid(n))
    terms = {"1": np.ones_like(u), "u": u, "v": v, "w": w, "uu": u * u, "vv": v * v,
             "ww": w * w, "uv": u * v, "uw": u * w, "vw": v * w}
    field_ = np.zeros_like(u)
    for coef, name in zip(spec.bias, BIAS_TERMS):
        if coef:
            field_ += coef * terms[name]
    return field_


def draw_noise(noise: NoiseSpec, shape, rng: np.random.Generator) -> np.ndarray:
    if noise.scale == 0:
        return np.zeros(shape)
    if noise.family == "gaussian":
        return noise.scale * rng.standard_normal(shape)
    if noise.family == "lognormal":
        s = noise.shape
        # zero-mean, right-skewed
        return noise.scale * (np.exp(s * rng.standard_normal(shape)) - np.exp(0.5 * s * s))
    return noise.scale * rng.standard_t(noise.shape, shape)


def generate_sample(k: int, spec: CohortSpec, rng: np.random.Generator,
                    sample_id: str = "") -> Sample:
    """One volume of class ``k`` under the cohort's acquisition model.

    Intensities are mapped to [0, 1] with the noise-free range of the cohort
    (background plus bias minimum to full-contrast plus bias maximum), widened
    by ``NOISE_MARGIN`` noise scales on each side so that clipping rarely
    touches the noise. A noise-free, flat-bias, unwarped sample therefore
    keeps its class contrast exactly.
    """
    if not 0 <= k < spec.num_classes:
        raise ValueError(f"class {k} out of range for {spec.num_classes} classes")
    n = spec.volume_size
    zz, yy, xx = _grid(n)
    c = (n - 1) / 2.0
    offset = rng.integers(-spec.jitter, spec.jitter + 1, size=3) if spec.jitter else np.zeros(3)
    r2 = (zz - c - offset[0]) ** 2 + (yy - c - offset[1]) ** 2 + (xx - c - offset[2]) ** 2
    signal = np.where(r2 <= spec.radii[k] ** 2, spec.contrasts[k], 0.0)

    bias = bias_field(spec)
    vol = spec.gain * signal + bias + draw_noise(spec.noise, signal.shape, rng)
    margin = NOISE_MARGIN * spec.noise.scale
    lo = bias.min() - margin
    hi = spec.gain * 1.0 + bias.max() + margin
    vol = np.clip((vol - lo) / (hi - lo), 0.0, 1.0)
    if spec.warp != 1.0:
        vol = vol ** spec.warp
    return Sample(volume=vol.astype(np.float32)[None], label=int(k), cohort=spec.name, id=sample_id)


def make_cohort(spec: CohortSpec) -> list[Sample]:
    """All samples of a cohort, class by class, each from its own RNG stream."""
    out = []
    for k, count in enumerate(spec.n_per_class):
        for j in range(count):
            sid = f"{spec.name}-c{k}-{j:04d}"
            out.append(generate_sample(k, spec, sample_rng(spec, sid), sid))
    return out


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.volume for s in samples]).astype(np.float32)
    y = np.asarray([s.label for s in samples], dtype=np.int64)
    return x, y


# --- default benchmark suite ----------------------------------------------

SOURCE_COUNTS = (100, 50, 40)
TARGET_COUNTS = (40, 60, 30)


def source_spec(counts=SOURCE_COUNTS, volume_size: int = 32, seed: int = 0) -> CohortSpec:
    return CohortSpec(name="source", n_per_class=counts, volume_size=volume_size, seed=seed,
                      gain=1.0, bias=(0.0, 0.03, 0.0, 0.0),
                      noise=NoiseSpec("gaussian", 0.08), warp=1.0)


TARGET_RECIPES = {
    # right-skewed multiplicative-looking noise, brightened intensities
    "target_lognormal": dict(gain=0.9, bias=(0.0, 0.0, 0.05, 0.0),
                             noise=NoiseSpec("lognormal", 0.06, 0.9), warp=0.7),
    # heavy-tailed noise with a strong linear bias gradient
    "target_student_t": dict(gain=1.1, bias=(0.05, -0.08, 0.0, 0.04),
                             noise=NoiseSpec("student_t", 0.1, 5.0), warp=1.3),
    # compressed dark intensities under a quadratic bias
    "target_warp": dict(gain=1.0, bias=(0.0, 0.0, 0.0, 0.0, 0.08, 0.08, 0.0),
                        noise=NoiseSpec("gaussian", 0.1), warp=1.8),
}


def target_spec(name: str, counts=TARGET_COUNTS, volume_size: int = 32, seed: int = 0) -> CohortSpec:
    if name not in TARGET_RECIPES:
        raise ValueError(f"unknown target cohort {name!r}; known: {sorted(TARGET_RECIPES)}")
    return CohortSpec(name=name, n_per_class=counts, volume_size=volume_size, seed=seed,
                      **TARGET_RECIPES[name])


def default_suite(source_counts=SOURCE_COUNTS, target_counts=TARGET_COUNTS,
                  volume_size: int = 32, seed: int = 0,
                  targets: Sequence[str] = tuple(TARGET_RECIPES)) -> tuple[CohortSpec, list[CohortSpec]]:
    """One source cohort and the shifted target cohorts."""
    src = source_spec(source_counts, volume_size, seed)
    tgts = [target_spec(t, target_counts, volume_size, seed + 1 + i) for i, t in enumerate(targets)]
    return src, tgts


def sphere_features(samples: Sequence[Sample]) -> np.ndarray:
    """Per-sample (bright-voxel fraction, mean intensity), for sanity classifiers."""
    feats = []
    for s in samples:
        v = s.volume.reshape(-1)
        thr = 0.5 * (np.percentile(v, 99.5) + np.median(v))
        feats.append([np.mean(v > thr), v.mean()])
    return np.asarray(feats)


# --- on-disk cache ---------------------------------------------------------

def save_cohort(samples: Sequence[Sample], spec: CohortSpec, path) -> None:
    n = spec.volume_size
    lines = [VOL_MAGIC, f"spec {spec.to_json()}", f"samples {len(samples)} {n}"]
    lines += [f"{s.id}\t{s.label}" for s in samples]
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for s in samples:
            fh.write(np.ascontiguousarray(s.volume, dtype="<f4").tobytes())


def load_cohort(path) -> tuple[CohortSpec, list[Sample]]:
    with open(path, "rb") as fh:
        raw = fh.read()

    def next_line(pos):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ValueError(f"{path}: truncated header")
        return raw[pos:end].decode("utf-8"), end + 1

    line, pos = next_line(0)
    if line != VOL_MAGIC:
        raise ValueError(f"{path}: bad header {line!r}, expected {VOL_MAGIC!r}")
    line, pos = next_line(pos)
    if not line.startswith("spec "):
        raise ValueError(f"{path}: missing spec echo")
    spec = CohortSpec.from_json(line[5:])
    line, pos = next_line(pos)
    _, count, n = line.split()
    count, n = int(count), int(n)
    meta = []
    for _ in range(count):
        line, pos = next_line(pos)
        sid, label = line.split("\t")
        meta.append((sid, int(label)))
    blob = raw[pos:]
    per = n ** 3
    if len(blob) != 4 * per * count:
        raise ValueError(f"{path}: expected {4 * per * count} volume bytes, found {len(blob)}")
    vols = np.frombuffer(blob, dtype="<f4").reshape(count, 1, n, n, n)
    samples = [Sample(vols[i].astype(np.float32), lab, spec.name, sid)
               for i, (sid, lab) in enumerate(meta)]
    return spec, samples
