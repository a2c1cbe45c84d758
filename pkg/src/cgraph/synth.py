"""Procedural multi-domain "anatomy" generator.

Geometry (which pixel belongs to which class) depends only on a layout seed;
domain styles change intensities and texture but never the labels.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


# (row, col, radius_row, radius_col) as canvas fractions, exponent, inner cutout ratio
_TEMPLATES = {
    1: (0.40, 0.38, 0.31, 0.28, 3.0, 0.0),
    2: (0.75, 0.72, 0.13, 0.11, 2.0, 0.0),
    3: (0.78, 0.28, 0.12, 0.14, 2.2, 0.0),
    4: (0.30, 0.76, 0.19, 0.18, 2.0, 0.5),
    5: (0.58, 0.55, 0.08, 0.08, 2.0, 0.0),
    6: (0.50, 0.90, 0.10, 0.07, 2.5, 0.0),
}
MIN_AREA = 16


@dataclass(frozen=True)
class Region:
    class_id: int
    center: tuple[float, float]
    radii: tuple[float, float]
    exponent: float
    rotation: float
    inner: float = 0.0  # ring cutout as a fraction of the radii; 0 means solid

    def footprint(self, canvas: int) -> np.ndarray:
        yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
        dy, dx = yy - self.center[0], xx - self.center[1]
        cos_r, sin_r = math.cos(self.rotation), math.sin(self.rotation)
        u = cos_r * dy + sin_r * dx
        v = -sin_r * dy + cos_r * dx
        level = np.abs(u / self.radii[0]) ** self.exponent + np.abs(v / self.radii[1]) ** self.exponent
        inside = level <= 1.0
        if self.inner > 0:
            inside &= level > self.inner ** self.exponent
        return inside


@dataclass(frozen=True)
class PatientLayout:
    seed: int
    regions: tuple[Region, ...]
    canvas: int

    def labels(self) -> np.ndarray:
        """Class-id mask; earlier classes keep pixels they already own."""
        out = np.zeros((self.canvas, self.canvas), dtype=np.int64)
        for region in self.regions:
            fp = region.footprint(self.canvas) & (out == 0)
            out[fp] = region.class_id
        return out


@dataclass(frozen=True)
class DomainStyle:
    domain: str
    background: float
    intensities: dict
    gamma: float = 1.0
    blur_radius: int = 0
    noise: float = 0.0
    texture_freq: float = 0.0
    texture_amp: float = 0.0
    seed: int = 0


STYLE_A = DomainStyle(
    domain="A", background=0.12,
    intensities={1: 0.75, 2: 0.92, 3: 0.55, 4: 0.65, 5: 0.45, 6: 0.85},
    gamma=1.0, blur_radius=1, noise=0.02, seed=11,
)
STYLE_B = DomainStyle(
    domain="B", background=0.72,
    intensities={1: 0.3, 2: 0.12, 3: 0.45, 4: 0.28, 5: 0.55, 6: 0.18},
    gamma=1.8, blur_radius=1, noise=0.05, texture_freq=0.11, texture_amp=0.08, seed=23,
)
BUILTIN_STYLES = {"A": STYLE_A, "B": STYLE_B}


@dataclass
class LabeledImage:
    image: np.ndarray  # 3 x H x W in [0, 1], identical channels
    labels: np.ndarray  # H x W class ids


@dataclass
class Episode:
    supports: list[tuple[np.ndarray, np.ndarray]]  # (image, binary mask) pairs
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    domain: str
    seed: int
    support_seeds: tuple[int, ...] = ()
    query_seed: int = -1

    @property
    def shots(self) -> int:
        return len(self.supports)


@dataclass
class DatasetSpec:
    canvas: int = 64
    n_classes: int = 4
    patients: int = 200
    styles: dict = field(default_factory=lambda: dict(BUILTIN_STYLES))

    def patient_seed(self, domain: str, index: int) -> int:
        return (sorted(self.styles).index(domain) + 1) * 1_000_000 + index


def generate_layout(seed: int, n_classes: int = 4, canvas: int = 64,
                    max_retries: int = 50) -> PatientLayout:
    """Deterministic per-patient layout: template placement plus jitter."""
    if not 2 <= n_classes <= 6:
        raise ValueError(f"class count must lie in [2, 6], got {n_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_classes, canvas]))
    for _ in range(max_retries):
        regions = []
        for cid in range(1, n_classes + 1):
            row, col, rr, rc, expo, inner = _TEMPLATES[cid]
            regions.append(Region(
                class_id=cid,
                center=((row + rng.uniform(-0.04, 0.04)) * canvas,
                        (col + rng.uniform(-0.04, 0.04)) * canvas),
                radii=(rr * canvas * rng.uniform(0.85, 1.15), rc * canvas * rng.uniform(0.85, 1.15)),
                exponent=expo + rng.uniform(-0.3, 0.3),
                rotation=rng.uniform(-0.35, 0.35),
                inner=inner,
            ))
        layout = PatientLayout(seed=seed, regions=tuple(regions), canvas=canvas)
        counts = np.bincount(layout.labels().reshape(-1), minlength=n_classes + 1)
        if counts[1:].min() >= MIN_AREA:
            return layout
    raise GenerationError(f"layout seed {seed}: could not place all {n_classes} classes")


def render_domain(layout: PatientLayout, style: DomainStyle) -> LabeledImage:
    """Fill base intensities, add texture, blur, clip, apply gamma, add noise, clip."""
    labels = layout.labels()
    img = np.full(labels.shape, style.background, dtype=np.float64)
    for cid in range(1, labels.max() + 1):
        img[labels == cid] = style.intensities[cid]
    rng = np.random.default_rng(np.random.SeedSequence([style.seed, layout.seed]))
    if style.texture_amp > 0:
        phase = rng.uniform(0, 2 * np.pi, size=2)
        yy, xx = np.mgrid[0:layout.canvas, 0:layout.canvas]
        f = 2 * np.pi * style.texture_freq
        img = img + style.texture_amp * np.sin(f * xx + phase[0]) * np.sin(f * yy + phase[1])
    if style.blur_radius > 0:
        img = ndimage.uniform_filter(img, size=2 * style.blur_radius + 1, mode="nearest")
    img = np.clip(img, 0.0, 1.0)
    if style.gamma != 1.0:
        img = img ** style.gamma
    if style.noise > 0:
        img = np.clip(img + style.noise * rng.standard_normal(img.shape), 0.0, 1.0)
    return LabeledImage(image=np.repeat(img[None], 3, axis=0), labels=labels)


def render_patient(spec: DatasetSpec, domain: str, index: int) -> LabeledImage:
    layout = generate_layout(spec.patient_seed(domain, index), spec.n_classes, spec.canvas)
    return render_domain(layout, spec.styles[domain])


def sample_episode(spec: DatasetSpec, domain: str, class_id: int, shots: int, seed: int,
                   max_attempts: int = 20) -> Episode:
    """K supports and one query from distinct patients of one domain, masked to one class."""
    if not 1 <= class_id <= spec.n_classes:
        raise ValueError(f"class {class_id} not in 1..{spec.n_classes}")
    if shots + 1 > spec.patients:
        raise ValueError(f"{shots} shots need more than {spec.patients} patients")
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        picks = rng.choice(spec.patients, size=shots + 1, replace=False)
        rendered = [render_patient(spec, domain, int(i)) for i in picks]
        masks = [(r.labels == class_id).astype(np.uint8) for r in rendered]
        if all(m.any() for m in masks):
            seeds = tuple(spec.patient_seed(domain, int(i)) for i in picks)
            return Episode(
                supports=[(r.image, m) for r, m in zip(rendered[:-1], masks[:-1])],
                query_image=rendered[-1].image,
                query_mask=masks[-1],
                class_id=class_id,
                domain=domain,
                seed=seed,
                support_seeds=seeds[:-1],
                query_seed=seeds[-1],
            )
    raise SamplingError(f"no valid episode for class {class_id} in domain {domain} "
                        f"after {max_attempts} attempts (seed {seed})")


def write_pgm(path: Path, array: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    data = np.asarray(array)
    if data.dtype != np.uint8:
        data = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if header is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in header.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    start = header.end()
    return np.frombuffer(raw[start:start + w * h], dtype=np.uint8).reshape(h, w)


def export_preview(spec: DatasetSpec, out_dir: Path, patients: int = 4) -> Path:
    """Write images and label masks for the first patients of every domain plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_seed", "domain", "path_image", "path_mask"])
        for domain in sorted(spec.styles):
            for i in range(patients):
                seed = spec.patient_seed(domain, i)
                sample = render_patient(spec, domain, i)
                img_name = f"{domain}_{seed}_image.pgm"
                mask_name = f"{domain}_{seed}_mask.pgm"
                write_pgm(out_dir / img_name, sample.image[0])
                write_pgm(out_dir / mask_name, sample.labels.astype(np.uint8))
                writer.writerow([seed, domain, img_name, mask_name])
    return manifest
