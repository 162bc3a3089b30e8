"""Input distortion pipeline T(.) producing paired training views.

A view is built by applying, in fixed order: random resized crop, horizontal
flip, brightness/contrast jitter, Gaussian blur, cutout, and patch shuffle.
Every stochastic choice is drawn up front into a plain-dict record, and
:func:`replay` applies a record bit-exactly, so any emitted view can be
reconstructed from ``(source image, record)`` alone.

Magnitudes are configuration, not claims: the op family is fixed, the
strengths are desk-scale defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import cv2
import numpy as np

_DEFAULT_OPS = ("crop", "flip", "jitter", "blur", "cutout", "shuffle")


@dataclass(frozen=True)
class AugmentationConfig:
    out_size: int = 64
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    flip_probability: float = 0.5
    jitter_strength: float = 0.2
    blur_sigma_range: tuple[float, float] = (0.1, 1.2)
    cutout_count: int = 1
    cutout_size_fraction: float = 0.25
    cutout_fill: float = 0.5
    shuffle_grid: int = 4
    enabled_ops: tuple[str, ...] = _DEFAULT_OPS

    def validate(self) -> None:
        if self.out_size < 8:
            raise ValueError(f"out_size must be >= 8, got {self.out_size}")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ValueError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        if self.jitter_strength < 0:
            raise ValueError(f"jitter_strength must be >= 0, got {self.jitter_strength}")
        blo, bhi = self.blur_sigma_range
        if not (0.0 <= blo <= bhi):
            raise ValueError(f"blur_sigma_range must satisfy 0 <= lo <= hi, got {self.blur_sigma_range}")
        if self.cutout_count < 0:
            raise ValueError(f"cutout_count must be >= 0, got {self.cutout_count}")
        if not (0.0 < self.cutout_size_fraction < 1.0):
            raise ValueError(f"cutout_size_fraction must lie in (0, 1), got {self.cutout_size_fraction}")
        if not (0.0 <= self.cutout_fill <= 1.0):
            raise ValueError(f"cutout_fill must lie in [0, 1], got {self.cutout_fill}")
        if self.shuffle_grid < 1:
            raise ValueError(f"shuffle_grid must be >= 1, got {self.shuffle_grid}")
        if "shuffle" in self.enabled_ops and self.out_size % self.shuffle_grid != 0:
            raise ValueError(
                f"shuffle_grid must divide out_size, got {self.shuffle_grid} vs {self.out_size}")
        unknown = set(self.enabled_ops) - set(_DEFAULT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation op(s): {sorted(unknown)}")

    @classmethod
    def disabled(cls, out_size: int = 64) -> "AugmentationConfig":
        """No-op pipeline: views equal the resized source."""
        return cls(out_size=out_size, enabled_ops=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale_range"] = list(self.crop_scale_range)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        d["enabled_ops"] = list(self.enabled_ops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augment key(s): {sorted(unknown)}")
        kw = dict(d)
        for key in ("crop_scale_range", "blur_sigma_range", "enabled_ops"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of [H, W, C] float to [size, size, C].  Identity when
    the shape already matches (exactness matters for no-op pipelines)."""
    h, w = image.shape[:2]
    if h == size and w == size:
        return image.astype(np.float32, copy=True)
    flat = image[..., 0] if image.shape[2] == 1 else image
    out = cv2.resize(flat.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
    if out.ndim == 2:
        out = out[..., None]
    return out


def shuffle_patches(image: np.ndarray, grid: int, permutation: Sequence[int]) -> np.ndarray:
    """Rearrange non-overlapping grid x grid patches: output cell ``i`` takes
    input cell ``permutation[i]`` (row-major cell order)."""
    h, w = image.shape[:2]
    if h % grid or w % grid:
        raise ValueError(f"grid {grid} must divide image sides {h}x{w}")
    perm = list(int(p) for p in permutation)
    if sorted(perm) != list(range(grid * grid)):
        raise ValueError("permutation must be a bijection over grid*grid cells")
    ph, pw = h // grid, w // grid
    c = image.shape[2]
    cells = (image.reshape(grid, ph, grid, pw, c)
                  .transpose(0, 2, 1, 3, 4)
                  .reshape(grid * grid, ph, pw, c))
    out = cells[perm]
    return (out.reshape(grid, grid, ph, pw, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(h, w, c))


def _draw_record(rng: np.random.Generator, in_shape: tuple[int, int], config: AugmentationConfig) -> dict:
    """Sample every stochastic choice for one view.  Only enabled ops consume
    draws, and the record holds everything needed for bit-exact replay."""
    h, w = in_shape
    s = config.out_size
    ops: list[dict] = []
    enabled = set(config.enabled_ops)

    if "crop" in enabled:
        scale = float(rng.uniform(*config.crop_scale_range))
        side = np.sqrt(scale)
        ch = max(1, int(round(h * side)))
        cw = max(1, int(round(w * side)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        ops.append({"op": "crop", "y0": y0, "x0": x0, "h": ch, "w": cw})

    if "flip" in enabled:
        ops.append({"op": "flip", "apply": bool(rng.uniform() < config.flip_probability)})

    if "jitter" in enabled:
        js = config.jitter_strength
        contrast = float(rng.uniform(max(0.0, 1.0 - js), 1.0 + js))
        brightness = float(rng.uniform(-0.5 * js, 0.5 * js))
        ops.append({"op": "jitter", "contrast": contrast, "brightness": brightness})

    if "blur" in enabled:
        ops.append({"op": "blur", "sigma": float(rng.uniform(*config.blur_sigma_range))})

    if "cutout" in enabled:
        rects = []
        size = max(1, int(round(s * config.cutout_size_fraction)))
        for _ in range(config.cutout_count):
            y0 = int(rng.integers(0, s - size + 1))
            x0 = int(rng.integers(0, s - size + 1))
            rects.append([y0, x0, y0 + size, x0 + size])
        ops.append({"op": "cutout", "rects": rects, "fill": config.cutout_fill})

    if "shuffle" in enabled:
        n = config.shuffle_grid
        perm = [int(p) for p in rng.permutation(n * n)]
        ops.append({"op": "shuffle", "grid": n, "perm": perm})

    return {"out_size": s, "ops": ops}


def replay(image: np.ndarray, record: dict) -> np.ndarray:
    """Apply a previously drawn record to a source image.  Pure function:
    same (image, record) always gives the same bits."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    s = int(record["out_size"])

    crop = next((o for o in record["ops"] if o["op"] == "crop"), None)
    if crop is not None:
        img = img[crop["y0"]:crop["y0"] + crop["h"], crop["x0"]:crop["x0"] + crop["w"], :]
    img = resize_image(img, s)

    for op in record["ops"]:
        kind = op["op"]
        if kind == "crop":
            continue
        if kind == "flip":
            if op["apply"]:
                img = img[:, ::-1, :].copy()
        elif kind == "jitter":
            img = np.clip((img - 0.5) * op["contrast"] + 0.5 + op["brightness"], 0.0, 1.0)
        elif kind == "blur":
            if op["sigma"] > 1e-3:
                flat = img[..., 0] if img.shape[2] == 1 else img
                blurred = cv2.GaussianBlur(flat, ksize=(0, 0), sigmaX=op["sigma"])
                if blurred.ndim == 2:
                    blurred = blurred[..., None]
                img = np.clip(blurred, 0.0, 1.0)
        elif kind == "cutout":
            img = img.copy()
            for y0, x0, y1, x1 in op["rects"]:
                img[y0:y1, x0:x1, :] = op["fill"]
        elif kind == "shuffle":
            img = shuffle_patches(img, op["grid"], op["perm"])
        else:
            raise ValueError(f"unknown op in record: {kind!r}")

    return np.ascontiguousarray(img, dtype=np.float32)


def apply_T(image: np.ndarray, config: AugmentationConfig, rng_seed) -> tuple[np.ndarray, dict]:
    """Distort one image.  ``rng_seed`` may be an int, a sequence of ints, or
    a numpy SeedSequence; it is the only source of randomness."""
    config.validate()
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    seed = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    rng = np.random.default_rng(seed)
    record = _draw_record(rng, img.shape[:2], config)
    return replay(img, record), record


@dataclass
class ViewPair:
    """Two distorted views plus the undistorted restoration target for the
    first one.  ``record`` replays both views."""

    view1: np.ndarray     # [S, S, C] distorted
    view2: np.ndarray     # [S, S, C] distorted
    target1: np.ndarray   # [S, S, C] undistorted resize of x1
    record: dict


def make_view_pair(x1: np.ndarray, x2: np.ndarray, config: AugmentationConfig, seed) -> ViewPair:
    """Build the training pair (T(x1), T(x2)) with independent draws per
    view, plus the clean resized x1 as restoration target."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s1, s2 = root.spawn(2)
    view1, rec1 = apply_T(x1, config, s1)
    view2, rec2 = apply_T(x2, config, s2)
    target1 = resize_image(np.asarray(x1, dtype=np.float32), config.out_size)
    return ViewPair(view1=view1, view2=view2, target1=target1,
                    record={"view1": rec1, "view2": rec2})
