"""Procedural paired-domain benchmark for segmentation domain adaptation.

A "domain" is a set of rendered shape scenes: class 0 is the textured
background and every other class id owns a characteristic shape kind and base
color. The unlabeled "target" domain is produced by rendering the same kind of
scenes and then applying a purely photometric shift (hue rotation, contrast
change, illumination ramp, sensor noise), so the label maps stay exact and can
be withheld for evaluation.

Everything is deterministic: sample ``i`` of a domain draws from an rng seeded
by ``(spec.seed, i)``, so serial and parallel generation produce identical
bytes, and regenerating with the same spec reproduces the dataset exactly.
"""

from __future__ import annotations

import ast
import colorsys
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .validation import IGNORE_LABEL, MIN_IMAGE_SIZE, ValidationError, require

RASTER_FORMAT = "png"
MANIFEST_NAME = "manifest"

# Scene texture noise is part of the scene content (identical across domains
# for matched seeds), not part of the domain shift.
_SCENE_TEXTURE_SIGMA = 0.02

_SHAPE_KINDS = ("disk", "square", "triangle", "ring")


@dataclass
class DomainSpec:
    """Parameters of one generated domain.

    Shift parameters describe the photometric gap of this domain relative to
    the canonical rendering; a spec with all-zero shift (and contrast 1.0)
    renders the canonical "source" appearance.

    Documented ranges: hue_rotation in [-180, 180] degrees, contrast in
    (0, 4], noise_sigma in [0, 0.25], illumination in [0, 1).
    """

    class_count: int = 5
    image_size: int = 64
    sample_count: int = 1000
    seed: int = 0
    # scene parameters
    shapes_min: int = 4
    shapes_max: int = 9
    size_min: float = 0.12   # shape diameter as a fraction of image size
    size_max: float = 0.35
    # photometric shift parameters
    hue_rotation: float = 0.0    # degrees around the RGB gray axis
    contrast: float = 1.0        # contrast scale about mid-gray
    noise_sigma: float = 0.0     # additive Gaussian noise std
    illumination: float = 0.0    # amplitude of a linear shading ramp

    def validate(self) -> None:
        require(self.class_count >= 2, f"class_count must be >= 2, got {self.class_count}")
        require(self.class_count < IGNORE_LABEL,
                f"class_count must be < {IGNORE_LABEL} (ignore sentinel)")
        require(self.image_size >= MIN_IMAGE_SIZE,
                f"image_size must be >= {MIN_IMAGE_SIZE}, got {self.image_size}")
        require(self.sample_count > 0, f"sample_count must be positive, got {self.sample_count}")
        require(1 <= self.shapes_min <= self.shapes_max,
                f"need 1 <= shapes_min <= shapes_max, got [{self.shapes_min}, {self.shapes_max}]")
        require(0.0 < self.size_min <= self.size_max <= 1.0,
                f"need 0 < size_min <= size_max <= 1, got [{self.size_min}, {self.size_max}]")
        require(-180.0 <= self.hue_rotation <= 180.0,
                f"hue_rotation must lie in [-180, 180], got {self.hue_rotation}")
        require(0.0 < self.contrast <= 4.0, f"contrast must lie in (0, 4], got {self.contrast}")
        require(0.0 <= self.noise_sigma <= 0.25,
                f"noise_sigma must lie in [0, 0.25], got {self.noise_sigma}")
        require(0.0 <= self.illumination < 1.0,
                f"illumination must lie in [0, 1), got {self.illumination}")


@dataclass
class Domain:
    """An in-memory domain: images in [0, 1], labels with exact class ids."""

    images: np.ndarray          # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray          # (N, H, W) uint8, values < class_count
    spec: DomainSpec
    manifest: dict = field(default_factory=dict)


def class_palette(class_count: int) -> np.ndarray:
    """Base color per class id: muted background plus evenly spaced hues."""
    colors = [np.array([0.22, 0.24, 0.30], dtype=np.float64)]
    for c in range(1, class_count):
        hue = (c - 1) / max(class_count - 1, 1)
        colors.append(np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.82), dtype=np.float64))
    return np.stack(colors)


def _shape_mask(kind: str, size: int, cx: float, cy: float, radius: float,
                angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    if kind == "disk":
        return u * u + v * v <= radius * radius
    if kind == "square":
        half = radius * 0.9
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        width = 0.6 * radius - 0.5 * v
        return (v >= -0.6 * radius) & (np.abs(u) <= width)
    if kind == "ring":
        rsq = u * u + v * v
        return (rsq <= radius * radius) & (rsq >= (0.55 * radius) ** 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def _scene_rng(spec: DomainSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index, 0])


def _shift_rng(spec: DomainSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index, 1])


def render_scene(spec: DomainSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Render scene ``index`` of the domain before any photometric shift.

    Returns (image float64 (H, W, 3) in [0, 1], labels uint8 (H, W)).
    The first ``class_count - 1`` shapes cycle through the foreground classes
    (offset by the sample index) so every sample contains every class, which
    keeps class coverage deterministic even for tiny domains.
    """
    rng = _scene_rng(spec, index)
    size = spec.image_size
    palette = class_palette(spec.class_count)

    tint = rng.normal(0.0, 0.02, size=3)
    img = np.clip(palette[0] + tint, 0.0, 1.0) * np.ones((size, size, 3))
    yy, xx = (np.mgrid[0:size, 0:size].astype(np.float64) + 0.5) / size
    bg_phi = rng.uniform(0.0, 2.0 * math.pi)
    img *= (1.0 + 0.25 * ((xx - 0.5) * math.cos(bg_phi)
                          + (yy - 0.5) * math.sin(bg_phi)))[..., None]
    labels = np.zeros((size, size), dtype=np.uint8)

    fg = spec.class_count - 1
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for s in range(n_shapes):
        if s < fg:
            cls = 1 + (index + s) % fg
        else:
            cls = int(rng.integers(1, spec.class_count))
        kind = _SHAPE_KINDS[(cls - 1) % len(_SHAPE_KINDS)]
        radius = 0.5 * size * rng.uniform(spec.size_min, spec.size_max)
        cx, cy = rng.uniform(0, size, size=2)
        angle = rng.uniform(0.0, math.pi)
        mask = _shape_mask(kind, size, cx, cy, radius, angle)
        color = np.clip(palette[cls] * rng.uniform(0.85, 1.15) + rng.normal(0, 0.03, 3),
                        0.0, 1.0)
        # shade each shape along a random direction; flat regions would make
        # distinct cells of one shape pixel-identical, so appearance must vary
        # within a region for location-sensitive objectives to be satisfiable
        phi = rng.uniform(0.0, 2.0 * math.pi)
        gain = rng.uniform(0.25, 0.55)
        ramp = ((xx - cx / size) * math.cos(phi)
                + (yy - cy / size) * math.sin(phi)) * (size / max(radius, 1.0))
        shading = 1.0 + gain * np.clip(ramp, -1.0, 1.0)
        img[mask] = color[None, :] * shading[mask, None]
        labels[mask] = cls

    img += rng.normal(0.0, _SCENE_TEXTURE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB vectors about the gray axis (Rodrigues formula)."""
    theta = math.radians(degrees)
    axis = np.ones(3) / math.sqrt(3.0)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


def apply_shift(image: np.ndarray, spec: DomainSpec,
                rng: np.random.Generator) -> np.ndarray:
    """Apply the domain's photometric shift to one rendered scene.

    Purely per-pixel color operations: the paired label map is untouched by
    construction. Output is clipped to [0, 1].
    """
    out = np.asarray(image, dtype=np.float64)
    if spec.hue_rotation != 0.0:
        out = out @ _hue_rotation_matrix(spec.hue_rotation).T
    if spec.contrast != 1.0:
        out = (out - 0.5) * spec.contrast + 0.5
    if spec.illumination != 0.0:
        size_y, size_x = out.shape[:2]
        phi = rng.uniform(0.0, 2.0 * math.pi)
        yy, xx = np.mgrid[0:size_y, 0:size_x]
        ramp = ((xx / size_x - 0.5) * math.cos(phi)
                + (yy / size_y - 0.5) * math.sin(phi))
        out = out * (1.0 + 2.0 * spec.illumination * ramp)[..., None]
    if spec.noise_sigma > 0.0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_sample(spec: DomainSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Fully render sample ``index``: scene, shift, 8-bit quantization.

    Returns (image float32 (H, W, 3), labels uint8 (H, W)). The float image is
    the dequantized 8-bit raster, i.e. exactly what a round trip through disk
    yields.
    """
    img, labels = render_scene(spec, index)
    img = apply_shift(img, spec, _shift_rng(spec, index))
    quantized = np.round(img * 255.0).astype(np.uint8)
    return quantized.astype(np.float32) / 255.0, labels


def augment(image: np.ndarray, rng: np.random.Generator,
            jitter: float = 0.2, blur_sigma: float = 0.8) -> np.ndarray:
    """Photometric training augmentation: per-channel color jitter + blur.

    ``jitter`` bounds the per-channel affine distortion and ``blur_sigma`` the
    Gaussian blur std (drawn uniformly in [0, blur_sigma]). Both at zero is the
    identity. Output has the input's shape, clipped to [0, 1]; any paired
    label map is unaffected by construction.
    """
    require(jitter >= 0.0 and blur_sigma >= 0.0, "augment: parameters must be >= 0")
    out = np.asarray(image, dtype=np.float32)
    if jitter > 0.0:
        scale = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3).astype(np.float32)
        shift = rng.uniform(-0.5 * jitter, 0.5 * jitter, size=3).astype(np.float32)
        out = out * scale + shift
    if blur_sigma > 0.0:
        sigma = float(rng.uniform(0.0, blur_sigma))
        if sigma > 1e-4:
            out = gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="nearest")
    return np.clip(out, 0.0, 1.0)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def generate_domain(spec: DomainSpec, out_dir: Path | str | None = None,
                    prefix: str = "domain") -> Domain:
    """Generate a full domain; optionally persist it under ``out_dir``.

    The manifest records the spec fields, the raster format, and a sha256
    checksum of each raster's raw pixel bytes (encoder-independent), plus an
    aggregate checksum per domain. Identical specs produce identical manifests
    and rasters.
    """
    spec.validate()
    images = np.empty((spec.sample_count, spec.image_size, spec.image_size, 3),
                      dtype=np.float32)
    labels = np.empty((spec.sample_count, spec.image_size, spec.image_size),
                      dtype=np.uint8)
    image_sums, label_sums = [], []
    for i in range(spec.sample_count):
        img, lab = render_sample(spec, i)
        images[i], labels[i] = img, lab
        image_sums.append(_sha256(np.round(img * 255.0).astype(np.uint8).tobytes()))
        label_sums.append(_sha256(lab.tobytes()))

    covered = set(np.unique(labels).tolist())
    missing = sorted(set(range(spec.class_count)) - covered)
    if missing:
        import logging
        logging.getLogger(__name__).warning(
            "domain %s: classes %s never appear (sample_count too small?)", prefix, missing)

    manifest: dict[str, str] = {f"{prefix}.{f.name}": repr(getattr(spec, f.name))
                                for f in fields(spec)}
    manifest[f"{prefix}.raster_format"] = RASTER_FORMAT
    manifest[f"{prefix}.ignore_label"] = str(IGNORE_LABEL)
    for i, (ih, lh) in enumerate(zip(image_sums, label_sums)):
        manifest[f"{prefix}.checksum.images.{i:05d}"] = ih
        manifest[f"{prefix}.checksum.labels.{i:05d}"] = lh
    manifest[f"{prefix}.checksum.aggregate"] = _sha256(
        "".join(image_sums + label_sums).encode())

    domain = Domain(images=images, labels=labels, spec=spec, manifest=manifest)
    if out_dir is not None:
        _write_domain(domain, Path(out_dir))
    return domain


def _write_domain(domain: Domain, out_dir: Path) -> None:
    img_dir = out_dir / "images"
    lab_dir = out_dir / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    for i in range(domain.images.shape[0]):
        raster = np.round(domain.images[i] * 255.0).astype(np.uint8)
        Image.fromarray(raster, mode="RGB").save(img_dir / f"{i:05d}.{RASTER_FORMAT}")
        Image.fromarray(domain.labels[i], mode="L").save(lab_dir / f"{i:05d}.{RASTER_FORMAT}")


def write_manifest(root: Path | str, manifest: dict) -> None:
    lines = [f"{key} = {manifest[key]}" for key in sorted(manifest)]
    Path(root, MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(root: Path | str) -> dict[str, str]:
    path = Path(root, MANIFEST_NAME)
    require(path.exists(), f"no manifest found at {path}")
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


def generate_dataset(source_spec: DomainSpec, target_spec: DomainSpec,
                     root: Path | str) -> dict[str, str]:
    """Generate the paired benchmark under ``root`` and write one manifest.

    Layout: ``root/{source,target}/{images,labels}/<idx>.png`` plus
    ``root/manifest``. Target labels are written too: they are the evaluation
    oracle and must never be read by training code.
    """
    root = Path(root)
    src = generate_domain(source_spec, root / "source", prefix="source")
    tgt = generate_domain(target_spec, root / "target", prefix="target")
    manifest = {**src.manifest, **tgt.manifest}
    write_manifest(root, manifest)
    return manifest


def load_domain(root: Path | str, domain: str) -> Domain:
    """Load a persisted domain ("source" or "target") back into memory."""
    root = Path(root)
    require(domain in ("source", "target"), f"domain must be source|target, got {domain!r}")
    manifest = read_manifest(root)
    spec_kwargs = {}
    for f in fields(DomainSpec):
        key = f"{domain}.{f.name}"
        require(key in manifest, f"manifest is missing key {key}")
        spec_kwargs[f.name] = ast.literal_eval(manifest[key])
    spec = DomainSpec(**spec_kwargs)

    img_dir = root / domain / "images"
    lab_dir = root / domain / "labels"
    images = np.empty((spec.sample_count, spec.image_size, spec.image_size, 3),
                      dtype=np.float32)
    labels = np.empty((spec.sample_count, spec.image_size, spec.image_size),
                      dtype=np.uint8)
    for i in range(spec.sample_count):
        img_path = img_dir / f"{i:05d}.{RASTER_FORMAT}"
        lab_path = lab_dir / f"{i:05d}.{RASTER_FORMAT}"
        require(img_path.exists() and lab_path.exists(),
                f"dataset at {root} is missing sample {i} of domain {domain}")
        raster = np.asarray(Image.open(img_path), dtype=np.uint8)
        images[i] = raster.astype(np.float32) / 255.0
        labels[i] = np.asarray(Image.open(lab_path), dtype=np.uint8)
        expect = manifest.get(f"{domain}.checksum.images.{i:05d}")
        if expect is not None and _sha256(raster.tobytes()) != expect:
            raise ValidationError(f"checksum mismatch for {img_path}; dataset corrupt")
    return Domain(images=images, labels=labels, spec=spec, manifest=manifest)


def spec_to_dict(spec: DomainSpec) -> dict:
    return asdict(spec)
