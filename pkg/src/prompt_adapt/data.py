"""Procedural glyph images, corruption families and domain streams.

Clean images are 3x32x32 in [0, 1], quantized to multiples of 1/256 so they
store compactly as hex floats. Class identity lives only in spatial
structure: foreground/background colours are drawn per sample and carry no
label information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy import ndimage

from . import ckpt

SIZE = 32

# Severity tables, index 0 is severity 1.
SEVERITY = {
    "gaussian_noise": [0.05, 0.1, 0.15, 0.2, 0.25],  # pixel sigma
    "shot_noise": [10.0, 4.0, 2.0, 1.0, 0.6],  # photon scale (lower is noisier)
    "impulse_noise": [0.1, 0.25, 0.4, 0.55, 0.65],  # salt-and-pepper fraction
    "defocus_blur": [2.0, 3.0, 4.5, 6.0, 7.0],  # disk radius, px
    "motion_blur": [5, 9, 12, 15, 18],  # streak length, px
    "fog": [0.3, 0.4, 0.5, 0.6, 0.65],  # haze opacity
    "brightness": [0.1, 0.2, 0.3, 0.35, 0.4],  # additive shift
    "contrast": [0.6, 0.4, 0.3, 0.2, 0.16],  # contrast factor (lower is harsher)
    "pixelate": [0.6, 0.4, 0.25, 0.18, 0.13],  # downscale factor
    "jpeg_like": [(0.3, 24), (0.5, 16), (0.7, 10), (0.85, 6), (1.0, 3)],  # (block blend, levels)
}
FAMILIES = tuple(SEVERITY)
NOISE_FAMILIES = ("gaussian_noise", "shot_noise", "impulse_noise")


# ------------------------------------------------------------------ glyphs


def _pattern(cls: int, yy, xx, freq: float, phase: float) -> np.ndarray:
    r = np.sqrt(yy**2 + xx**2)
    two_pi = 2 * np.pi * freq
    # every class is invariant under a horizontal flip (up to phase)
    if cls == 0:  # horizontal stripes
        v = np.sin(two_pi * yy + phase)
    elif cls == 1:  # vertical stripes
        v = np.sin(two_pi * xx + phase)
    elif cls == 2:  # diagonal X
        d = np.minimum(np.abs(xx - yy), np.abs(xx + yy)) / np.sqrt(2)
        return ((d < 2.5) & (r < 14)).astype(float)
    elif cls == 3:  # diamond outline
        m = np.abs(xx) + np.abs(yy)
        return ((m > 8) & (m < 13)).astype(float)
    elif cls == 4:  # rings
        v = np.sin(two_pi * r + phase)
    elif cls == 5:  # upward triangle
        return ((yy < 9) & (yy > -11) & (np.abs(xx) < (yy + 11) * 0.6)).astype(float)
    elif cls == 6:  # plus-shaped cross
        bar = (np.abs(xx) < 3.5) | (np.abs(yy) < 3.5)
        return (bar & (r < 13)).astype(float)
    elif cls == 7:  # soft blob
        return np.exp(-(r**2) / (2 * 6.0**2))
    elif cls == 8:  # square frame
        m = np.maximum(np.abs(xx), np.abs(yy))
        return ((m > 7) & (m < 11.5)).astype(float)
    elif cls == 9:  # letter H
        posts = (np.abs(np.abs(xx) - 7) < 2.5) & (np.abs(yy) < 11)
        bar = (np.abs(xx) < 7) & (np.abs(yy) < 2.5)
        return (posts | bar).astype(float)
    else:
        raise ValueError(f"no glyph pattern for class {cls}")
    return 0.5 + 0.5 * np.clip(2.0 * v, -1.0, 1.0)


NUM_PATTERNS = 10


def glyph_template(cls: int) -> np.ndarray:
    """Canonical white-on-black [32, 32] pattern of a class (no jitter)."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] - (SIZE - 1) / 2
    return _pattern(cls, yy, xx, 1 / 8, 0.0)


@dataclass
class GlyphDataset:
    images: np.ndarray  # [N, 3, 32, 32]
    labels: np.ndarray  # [N] int
    num_classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "GlyphDataset":
        return GlyphDataset(self.images[idx], self.labels[idx], self.num_classes, self.seed)


def generate_glyphs(n: int, num_classes: int = 10, seed: int = 7) -> GlyphDataset:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_classes > NUM_PATTERNS:
        raise ValueError(f"at most {NUM_PATTERNS} glyph classes are available")
    if n < num_classes:
        raise ValueError(f"need at least one image per class (n={n} < C={num_classes})")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    base_y, base_x = np.mgrid[0:SIZE, 0:SIZE] - (SIZE - 1) / 2
    images = np.empty((n, 3, SIZE, SIZE))
    for i, cls in enumerate(labels):
        dy, dx = rng.uniform(-3, 3, size=2)
        freq = rng.uniform(0.9, 1.1) / 8
        phase = rng.uniform(0, 2 * np.pi)
        pat = _pattern(int(cls), base_y - dy, base_x - dx, freq, phase)
        fg = rng.uniform(0.0, 1.0, size=3)
        bg = rng.uniform(0.0, 1.0, size=3)
        gap = fg.mean() - bg.mean()
        if abs(gap) < 0.4:  # enforce luminance contrast between ink and paper
            shift = np.sign(gap or 1.0) * (0.4 - abs(gap)) / 2
            fg, bg = np.clip(fg + shift, 0, 1), np.clip(bg - shift, 0, 1)
        images[i] = bg[:, None, None] + (fg - bg)[:, None, None] * pat[None]
    images = np.round(np.clip(images, 0, 1) * 256) / 256
    return GlyphDataset(images, labels.astype(np.int64), num_classes, seed)


def save_dataset(ds: GlyphDataset, path) -> bytes:
    meta = {"kind": "dataset", "version": 1, "num_classes": ds.num_classes, "seed": ds.seed}
    return ckpt.write(path, meta, {"images": ds.images, "labels": ds.labels.astype(np.float64)})


def load_dataset(path) -> GlyphDataset:
    meta, tensors = ckpt.read(path)
    if meta.get("kind") != "dataset":
        raise ckpt.CheckpointError(path, f"not a dataset file (kind={meta.get('kind')!r})")
    try:
        images, labels = tensors["images"], tensors["labels"].astype(np.int64)
    except KeyError as exc:
        raise ckpt.CheckpointError(path, f"missing tensor {exc}") from None
    return GlyphDataset(images, labels, int(meta["num_classes"]), int(meta["seed"]))


# ------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.family not in SEVERITY:
            raise ValueError(f"unknown corruption family {self.family!r}")
        if self.severity not in range(0, 6):
            raise ValueError(f"severity must be in 0..5, got {self.severity}")


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (yy**2 + xx**2 <= radius**2).astype(float)
    k = ndimage.gaussian_filter(k, 0.5)
    return k / k.sum()


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2
    for t in np.linspace(-c, c, 4 * length):
        y, x = int(round(c + t * np.sin(angle))), int(round(c + t * np.cos(angle)))
        k[y, x] = 1.0
    return k / k.sum()


def _filter_each(images: np.ndarray, kernels) -> np.ndarray:
    out = np.empty_like(images)
    for i, k in enumerate(kernels):
        for ch in range(images.shape[1]):
            out[i, ch] = ndimage.convolve(images[i, ch], k, mode="reflect")
    return out


def _fog_field(rng, n: int) -> np.ndarray:
    field = np.empty((n, SIZE, SIZE))
    for i in range(n):
        f = sum(
            ndimage.zoom(rng.normal(size=(s, s)), SIZE / s, order=1)[:SIZE, :SIZE] * (s ** -0.5)
            for s in (2, 4, 8)
        )
        f -= f.min()
        field[i] = f / max(f.max(), 1e-12)
    return field


def corrupt(images, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption family at one severity. Severity 0 is the identity."""
    x = np.asarray(images, dtype=np.float64)
    if x.min(initial=0.0) < 0 or x.max(initial=0.0) > 1:
        raise ValueError("images must lie in [0, 1]")
    if spec.severity == 0:
        return x.copy()
    fam = spec.family
    c = SEVERITY[fam][spec.severity - 1]
    rng = np.random.default_rng([spec.seed, FAMILIES.index(fam), spec.severity])
    n = len(x)
    if fam == "gaussian_noise":
        out = x + rng.normal(0.0, c, size=x.shape)
    elif fam == "shot_noise":
        out = rng.poisson(x * c) / c
    elif fam == "impulse_noise":
        u = rng.random(size=x.shape)
        out = x.copy()
        out[u < c / 2] = 0.0
        out[(u >= c / 2) & (u < c)] = 1.0
    elif fam == "defocus_blur":
        out = _filter_each(x, [_disk_kernel(c)] * n)
    elif fam == "motion_blur":
        angles = rng.uniform(0, np.pi, size=n)
        out = _filter_each(x, [_motion_kernel(c, a) for a in angles])
    elif fam == "fog":
        haze = _fog_field(rng, n)[:, None]
        out = x * (1 - c) + c * (0.5 + 0.5 * haze)
    elif fam == "brightness":
        out = x + c
    elif fam == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - mean) * c + mean
    elif fam == "pixelate":
        small = ndimage.zoom(x, (1, 1, c, c), order=1, grid_mode=True, mode="nearest")
        out = ndimage.zoom(small, (1, 1, SIZE / small.shape[2], SIZE / small.shape[3]), order=0, grid_mode=True, mode="nearest")
    elif fam == "jpeg_like":
        blend, levels = c
        n_, ch, h, w = x.shape
        blocks = x.reshape(n_, ch, h // 4, 4, w // 4, 4).mean(axis=(3, 5))
        coarse = np.repeat(np.repeat(blocks, 4, axis=2), 4, axis=3)
        out = (1 - blend) * x + blend * coarse
        out = np.round(out * (levels - 1)) / (levels - 1)
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(fam)
    return np.clip(out, 0.0, 1.0)


# ----------------------------------------------------------------- streams


@dataclass(frozen=True)
class Domain:
    family: str
    severity: int
    round: int = 0

    @property
    def tag(self) -> str:
        return f"{self.family}@{self.severity}"


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray  # evaluation only
    domain_index: int
    domain: Domain


@dataclass
class DomainStream:
    domains: list[Domain]
    batches: list[Batch] = field(repr=False)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)

    def boundaries(self) -> list[int]:
        """Batch indices at which a new domain segment starts (excluding 0)."""
        return [i for i in range(1, len(self.batches)) if self.batches[i].domain_index != self.batches[i - 1].domain_index]


def schedule_domains(schedule: dict) -> list[Domain]:
    kind = schedule.get("kind", "standard")
    families = list(schedule.get("families", FAMILIES))
    if kind == "standard":
        sev = int(schedule.get("severity", 5))
        domains = [Domain(f, sev) for f in families]
    elif kind == "gradual":
        ladder = [1, 2, 3, 4, 5, 4, 3, 2, 1]
        domains = [Domain(f, s) for f in families for s in ladder]
    elif kind == "rounds":
        sev = int(schedule.get("severity", 5))
        rounds = int(schedule.get("rounds", 3))
        domains = [Domain(f, sev, r) for r in range(rounds) for f in families]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not domains:
        raise ValueError("empty schedule")
    return domains


def build_stream(dataset: GlyphDataset, schedule: dict, batch_size: int = 100, seed: int = 0) -> DomainStream:
    """Every domain is the full ``dataset`` corrupted, cut into ordered batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    domains = schedule_domains(schedule)
    batches = []
    cache: dict[tuple[str, int], np.ndarray] = {}
    for d_idx, dom in enumerate(domains):
        # a reoccurring (family, severity) replays the exact images of its first visit
        key = (dom.family, dom.severity)
        if key not in cache:
            cache[key] = corrupt(dataset.images, CorruptionSpec(dom.family, dom.severity, seed=seed * 1000 + d_idx))
        imgs = cache[key]
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            batches.append(Batch(imgs[sl], dataset.labels[sl], d_idx, dom))
    return DomainStream(domains, batches)
