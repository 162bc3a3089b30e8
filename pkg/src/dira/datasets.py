"""Synthetic anatomy-phantom dataset: generation, disk layout, and splits.

Each sample is rendered from one of ``k_templates`` fixed structure templates
(soft ellipses plus oriented intensity bands) with per-sample geometric
jitter, multi-scale noise texture, and, with configurable probability, one
small bright blob lesion.  The lesion has an exact binary mask and a tight
half-open bounding box.  All randomness derives from integer seeds, so a
dataset directory is bit-reproducible from ``(seed, params)``.

Disk layout written by :func:`build_dataset`::

    <out_dir>/
        images/<image_id>.png   8-bit grayscale
        masks/<image_id>.png    binary (0 or 255)
        manifest.json

Pixel convention everywhere in this package: float32 arrays shaped
``[H, W, C]`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image as PILImage

GENERATOR_VERSION = "1"

# Salts keep the independent seed streams (templates, splits, ...) from
# colliding when a user passes small consecutive seeds.
_TEMPLATE_SALT = 0x7E31
_SPLIT_SALT = 0x5911
_TEST_SALT = 0x7E57


class BBox(NamedTuple):
    """Half-open pixel box: x in [x_min, x_max), y in [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return max(0, self.width) * max(0, self.height)

    def to_list(self) -> list[int]:
        return [int(v) for v in self]

    @classmethod
    def from_list(cls, v: Sequence[int]) -> "BBox":
        if len(v) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(v)}")
        return cls(int(v[0]), int(v[1]), int(v[2]), int(v[3]))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PhantomParams:
    """Generator knobs.  Defaults give a 64x64 grayscale phantom."""

    height: int = 64
    width: int = 64
    k_templates: int = 8
    lesion_probability: float = 0.5
    n_lesion_classes: int = 3
    template_jitter: float = 1.5      # std of geometric jitter, in pixels
    texture_strength: float = 0.08    # amplitude of the multi-scale noise
    lesion_amplitude: float = 0.35    # peak intensity bump of the lesion
    lesion_radius: tuple[float, float] = (3.0, 7.0)  # pixels, pre-clamping

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"height/width must be >= 16, got {self.height}x{self.width}")
        if not (0.0 <= self.lesion_probability <= 1.0):
            raise ValueError(f"lesion_probability must lie in [0, 1], got {self.lesion_probability}")
        if self.k_templates < 1:
            raise ValueError(f"k_templates must be >= 1, got {self.k_templates}")
        if self.n_lesion_classes < 1:
            raise ValueError(f"n_lesion_classes must be >= 1, got {self.n_lesion_classes}")
        if self.template_jitter < 0:
            raise ValueError(f"template_jitter must be >= 0, got {self.template_jitter}")
        if self.texture_strength < 0:
            raise ValueError(f"texture_strength must be >= 0, got {self.texture_strength}")
        lo, hi = self.lesion_radius
        if not (0 < lo <= hi):
            raise ValueError(f"lesion_radius must satisfy 0 < lo <= hi, got {self.lesion_radius}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_radius"] = list(self.lesion_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom parameter(s): {sorted(unknown)}")
        kw = dict(d)
        if "lesion_radius" in kw:
            kw["lesion_radius"] = tuple(kw["lesion_radius"])
        return cls(**kw)


@dataclass
class Sample:
    """One generated phantom, pixels included."""

    image_id: str
    image: np.ndarray            # [H, W, 1] float32 in [0, 1]
    mask: np.ndarray             # [H, W] uint8, 1 inside the lesion
    boxes: list[BBox]
    lesion_present: bool
    lesion_class: int | None
    pseudo_class: int            # template id, usable as a free pseudo label


# --------------------------------------------------------------------------
# template bank
# --------------------------------------------------------------------------

def _template_spec(template_id: int) -> dict:
    """Fixed geometry of one template; independent of all generator params
    except the version.  Same id always yields the same primitives."""
    rng = np.random.default_rng(np.random.SeedSequence([_TEMPLATE_SALT, int(template_id)]))
    u = rng.uniform
    spec = {
        "grad": (float(u(-1.0, 1.0)), float(u(-1.0, 1.0))),
        "body": {
            "cx": float(0.5 + u(-0.06, 0.06)),
            "cy": float(0.5 + u(-0.06, 0.06)),
            "ax": float(u(0.30, 0.42)),
            "ay": float(u(0.36, 0.48)),
            "angle": float(u(-0.3, 0.3)),
            "amp": float(u(0.12, 0.20)),
        },
        "organs": [],
        "bands": [],
    }
    for _ in range(int(rng.integers(2, 5))):
        sign = 1.0 if u() < 0.5 else -1.0
        spec["organs"].append({
            "cx": float(u(0.28, 0.72)),
            "cy": float(u(0.28, 0.72)),
            "ax": float(u(0.05, 0.14)),
            "ay": float(u(0.05, 0.14)),
            "angle": float(u(0.0, math.pi)),
            "amp": float(sign * u(0.08, 0.18)),
        })
    for _ in range(int(rng.integers(1, 4))):
        spec["bands"].append({
            "angle": float(u(0.0, math.pi)),
            "freq": float(u(4.0, 9.0)),
            "phase": float(u(0.0, 1.0)),
            "amp": float(u(0.03, 0.07)),
        })
    return spec


def _soft_ellipse(xx, yy, cx, cy, ax, ay, angle, width=0.12):
    """Smooth indicator of a rotated ellipse, ~1 inside, ~0 outside."""
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = xx - cx, yy - cy
    xr = ca * dx + sa * dy
    yr = -sa * dx + ca * dy
    d2 = (xr / ax) ** 2 + (yr / ay) ** 2
    # clip the logit so exp never overflows far outside the ellipse
    z = np.clip((1.0 - d2) / width, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


def _render_template(h: int, w: int, spec: dict, jitter: dict) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx /= max(w - 1, 1)
    yy /= max(h - 1, 1)

    gx, gy = spec["grad"]
    img = 0.35 + 0.12 * (gx * (xx - 0.5) + gy * (yy - 0.5))

    b = spec["body"]
    dcx, dcy, dang = jitter["body"]
    img = img + b["amp"] * _soft_ellipse(
        xx, yy, b["cx"] + dcx, b["cy"] + dcy, b["ax"], b["ay"], b["angle"] + dang)

    for organ, (ocx, ocy, oang) in zip(spec["organs"], jitter["organs"]):
        img = img + organ["amp"] * _soft_ellipse(
            xx, yy, organ["cx"] + ocx, organ["cy"] + ocy,
            organ["ax"], organ["ay"], organ["angle"] + oang, width=0.10)

    for band, dphase in zip(spec["bands"], jitter["bands"]):
        ca, sa = math.cos(band["angle"]), math.sin(band["angle"])
        img = img + band["amp"] * np.sin(
            2.0 * math.pi * (band["freq"] * (ca * xx + sa * yy) + band["phase"] + dphase))

    return img


def _draw_jitter(rng: np.random.Generator, spec: dict, scale_px: float, h: int, w: int) -> dict:
    """Per-sample geometric perturbation of a template.  Draws are always
    consumed so the stream layout does not depend on the jitter scale; a
    scale of zero therefore yields exactly the un-jittered template."""
    s = scale_px / float(min(h, w))
    return {
        "body": tuple(rng.normal(0.0, 1.0, size=3) * np.array([s, s, 2.0 * s])),
        "organs": [tuple(rng.normal(0.0, 1.0, size=3) * np.array([s, s, 4.0 * s]))
                   for _ in spec["organs"]],
        "bands": [float(rng.normal(0.0, 1.0) * 2.0 * s) for _ in spec["bands"]],
    }


def _draw_texture(rng: np.random.Generator, h: int, w: int, strength: float) -> np.ndarray:
    """Multi-scale noise field.  Draws are consumed even at strength 0."""
    import cv2

    acc = np.zeros((h, w), dtype=np.float64)
    weights = {1: 0.5, 2: 0.7, 4: 1.0, 8: 1.3}
    wsum = math.sqrt(sum(v * v for v in weights.values()))
    for cell, weight in weights.items():
        gh = max(2, math.ceil(h / cell))
        gw = max(2, math.ceil(w / cell))
        grid = rng.standard_normal((gh, gw))
        if (gh, gw) != (h, w):
            grid = cv2.resize(grid, (w, h), interpolation=cv2.INTER_LINEAR)
        acc += weight * grid
    return strength * acc / wsum


def _draw_lesion(rng: np.random.Generator, params: PhantomParams):
    """Returns (bump, mask, lesion_class).  Mask is exactly the compact
    support of the intensity bump, so mask extremal coordinates give the
    tight box."""
    h, w = params.height, params.width
    c = int(rng.integers(params.n_lesion_classes))
    r_cap = (min(h, w) - 6) / 2.0
    lo = min(params.lesion_radius[0], r_cap)
    hi = min(params.lesion_radius[1], r_cap)
    r = float(rng.uniform(lo, hi))
    ratio = (1.0, 0.55, 0.35)[c % 3]
    angle = float(rng.uniform(0.0, math.pi))
    margin = r + 2.0
    cy = float(rng.uniform(margin, h - margin))
    cx = float(rng.uniform(margin, w - margin))
    amp = params.lesion_amplitude * float(rng.uniform(0.8, 1.2))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = xx - cx, yy - cy
    xr = ca * dx + sa * dy
    yr = -sa * dx + ca * dy
    d2 = (xr / r) ** 2 + (yr / (r * ratio)) ** 2
    inside = d2 < 1.0
    bump = np.where(inside, amp * np.square(1.0 - np.minimum(d2, 1.0)), 0.0)
    return bump, inside.astype(np.uint8), c


def _mask_to_boxes(mask: np.ndarray) -> list[BBox]:
    """Tight half-open box per connected region of the mask (the generator
    only ever places one)."""
    if not mask.any():
        return []
    ys, xs = np.nonzero(mask)
    return [BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)]


def generate_phantom(seed: int, params: PhantomParams, image_id: str | None = None) -> Sample:
    """Render one phantom.  Everything about the sample is a pure function
    of ``(seed, params, GENERATOR_VERSION)``.

    Draw order from the sample rng is fixed: template id, jitter, texture,
    lesion coin, lesion geometry.
    """
    params.validate()
    h, w = params.height, params.width
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))

    pseudo_class = int(rng.integers(params.k_templates))
    spec = _template_spec(pseudo_class)
    jitter = _draw_jitter(rng, spec, params.template_jitter, h, w)
    img = _render_template(h, w, spec, jitter)
    img = img + _draw_texture(rng, h, w, params.texture_strength)

    lesion_present = bool(rng.uniform() < params.lesion_probability)
    mask = np.zeros((h, w), dtype=np.uint8)
    lesion_class: int | None = None
    if lesion_present:
        bump, mask, lesion_class = _draw_lesion(rng, params)
        img = img + bump

    img = np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]
    return Sample(
        image_id=image_id if image_id is not None else f"sample_{int(seed)}",
        image=img,
        mask=mask,
        boxes=_mask_to_boxes(mask),
        lesion_present=lesion_present,
        lesion_class=lesion_class,
        pseudo_class=pseudo_class,
    )


# --------------------------------------------------------------------------
# disk format
# --------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    image_id: str
    lesion_present: bool
    lesion_class: int | None
    pseudo_class: int | None
    boxes: list[BBox]
    image_file: str
    mask_file: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "lesion_present": self.lesion_present,
            "lesion_class": self.lesion_class,
            "pseudo_class": self.pseudo_class,
            "boxes": [b.to_list() for b in self.boxes],
            "image_file": self.image_file,
            "mask_file": self.mask_file,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        return cls(
            image_id=d["image_id"],
            lesion_present=bool(d["lesion_present"]),
            lesion_class=d.get("lesion_class"),
            pseudo_class=d.get("pseudo_class"),
            boxes=[BBox.from_list(b) for b in d.get("boxes", [])],
            image_file=d["image_file"],
            mask_file=d["mask_file"],
        )


@dataclass
class DatasetManifest:
    seed: int
    n_samples: int
    K_templates: int
    lesion_probability: float
    generator_version: str
    records: list[ManifestRecord]
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_samples": self.n_samples,
            "K_templates": self.K_templates,
            "lesion_probability": self.lesion_probability,
            "generator_version": self.generator_version,
            "params": self.params,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            seed=int(d["seed"]),
            n_samples=int(d["n_samples"]),
            K_templates=int(d["K_templates"]),
            lesion_probability=float(d["lesion_probability"]),
            generator_version=str(d["generator_version"]),
            records=[ManifestRecord.from_dict(r) for r in d["records"]],
            params=d.get("params", {}),
        )

    @classmethod
    def load(cls, dataset_dir: str | Path) -> "DatasetManifest":
        path = Path(dataset_dir)
        if path.is_dir():
            path = path / "manifest.json"
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]


def _write_json(path: Path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def save_png(path: Path, arr01: np.ndarray) -> None:
    """8-bit grayscale PNG from a [H, W] or [H, W, 1] float array in [0, 1]."""
    a = np.asarray(arr01, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., 0]
    q = np.floor(a * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(q, mode="L").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back to [H, W, 1] float32 in [0, 1]."""
    with PILImage.open(path) as im:
        a = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return a[..., None]


def build_dataset(seed: int, n: int, params: PhantomParams, out_dir: str | Path) -> DatasetManifest:
    """Generate ``n`` phantoms into ``out_dir`` and write the manifest.

    Per-sample seeds are spawned from the dataset seed, so sample ``i`` is
    stable regardless of ``n``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    params.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    sample_seeds = np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)
    records = []
    for i in range(n):
        image_id = f"img_{i:05d}"
        s = generate_phantom(int(sample_seeds[i]), params, image_id=image_id)
        image_file = f"images/{image_id}.png"
        mask_file = f"masks/{image_id}.png"
        save_png(out / image_file, s.image)
        save_png(out / mask_file, s.mask.astype(np.float64))
        records.append(ManifestRecord(
            image_id=image_id,
            lesion_present=s.lesion_present,
            lesion_class=s.lesion_class,
            pseudo_class=s.pseudo_class,
            boxes=s.boxes,
            image_file=image_file,
            mask_file=mask_file,
        ))

    manifest = DatasetManifest(
        seed=int(seed),
        n_samples=n,
        K_templates=params.k_templates,
        lesion_probability=params.lesion_probability,
        generator_version=GENERATOR_VERSION,
        records=records,
        params=params.to_dict(),
    )
    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def load_images(dataset_dir: str | Path, ids: Sequence[str] | None = None,
                manifest: DatasetManifest | None = None) -> np.ndarray:
    """Stack images for the given ids (manifest order by default) into
    [N, H, W, 1] float32."""
    root = Path(dataset_dir)
    manifest = manifest or DatasetManifest.load(root)
    by_id = {r.image_id: r for r in manifest.records}
    ids = list(ids) if ids is not None else manifest.ids()
    return np.stack([load_png(root / by_id[i].image_file) for i in ids])


def load_masks(dataset_dir: str | Path, ids: Sequence[str] | None = None,
               manifest: DatasetManifest | None = None) -> np.ndarray:
    """Binary masks for the given ids, [N, H, W] float32 in {0, 1}."""
    root = Path(dataset_dir)
    manifest = manifest or DatasetManifest.load(root)
    by_id = {r.image_id: r for r in manifest.records}
    ids = list(ids) if ids is not None else manifest.ids()
    out = []
    for i in ids:
        m = load_png(root / by_id[i].mask_file)[..., 0]
        out.append((m > 0.5).astype(np.float32))
    return np.stack(out)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Label-fraction subset request."""

    fraction: float
    seed: int
    stratify_on: str = "lesion_present"   # or "none"

    def validate(self) -> None:
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.stratify_on not in ("lesion_present", "none"):
            raise ValueError(f"stratify_on must be 'lesion_present' or 'none', got {self.stratify_on!r}")


def select_fraction(records: Sequence[ManifestRecord], spec: SplitSpec) -> list[str]:
    """Deterministic subset of ``records`` of size max(1, round(fraction*n)),
    returned in the original record order.  Stratified selection keeps the
    positive/negative balance within one sample of the full set."""
    spec.validate()
    n = len(records)
    if n == 0:
        raise ValueError("cannot split an empty record list")
    if spec.fraction == 1.0:
        return [r.image_id for r in records]

    n_take = max(1, _round_half_up(spec.fraction * n))
    rng = np.random.default_rng(np.random.SeedSequence([_SPLIT_SALT, int(spec.seed)]))
    order = {r.image_id: i for i, r in enumerate(records)}

    if spec.stratify_on == "none":
        ids = [r.image_id for r in records]
        perm = rng.permutation(n)
        chosen = [ids[j] for j in perm[:n_take]]
    else:
        pos = [r.image_id for r in records if r.lesion_present]
        neg = [r.image_id for r in records if not r.lesion_present]
        n_pos = _round_half_up(spec.fraction * len(pos))
        n_pos = min(max(n_pos, n_take - len(neg)), n_take, len(pos))
        n_neg = n_take - n_pos
        chosen = [pos[j] for j in rng.permutation(len(pos))[:n_pos]]
        chosen += [neg[j] for j in rng.permutation(len(neg))[:n_neg]]

    return sorted(chosen, key=order.__getitem__)


def split_label_fraction(manifest: DatasetManifest, spec: SplitSpec) -> list[str]:
    """Label-fraction subset over a whole manifest."""
    return select_fraction(manifest.records, spec)


def train_test_ids(manifest: DatasetManifest, test_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Canonical stratified train/test split of a dataset, fixed by the
    dataset's own seed so every consumer sees the same test set."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    records = manifest.records
    order = {r.image_id: i for i, r in enumerate(records)}
    rng = np.random.default_rng(np.random.SeedSequence([_TEST_SALT, int(manifest.seed)]))

    pos = [r.image_id for r in records if r.lesion_present]
    neg = [r.image_id for r in records if not r.lesion_present]
    test: list[str] = []
    for group in (pos, neg):
        k = _round_half_up(test_fraction * len(group))
        k = min(k, len(group))
        perm = rng.permutation(len(group))
        test += [group[j] for j in perm[:k]]
    test_set = set(test)
    train = [r.image_id for r in records if r.image_id not in test_set]
    return train, sorted(test, key=order.__getitem__)
