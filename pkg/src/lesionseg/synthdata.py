"""Synthetic head-CT-like phantoms with exact lesion masks.

Each case is a stack of axial slices through an elliptical head: a bright
skull ring, a textured brain interior peppered with small bright distractor
spots, and a lesion whose shape depends on the phenotype:

* ``iph``          one compact ellipse (cross-section of an ellipsoid),
* ``contusion``    2-5 small blobs,
* ``extra_axial``  a crescent lying against the inner skull boundary.

Lesion intensities (0.6-0.8) overlap the distractor intensities, so a fixed
threshold cannot separate them; the model has to use shape and context.
Images are produced directly in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PHENOTYPES = ("iph", "contusion", "extra_axial")

SKULL_LEVEL = 0.95
BRAIN_LEVEL = 0.35
MIN_AREA_FRAC = 0.005
MAX_AREA_FRAC = 0.10
_MASK64 = (1 << 64) - 1


@dataclass
class SliceSample:
    image: np.ndarray  # float32 [1, 1, h, w] in [0, 1]
    mask: np.ndarray  # uint8 [1, 1, h, w]
    phenotype: str
    case_id: int
    slice_idx: int


@dataclass(frozen=True)
class PhantomSpec:
    h: int = 64
    w: int = 64
    n_cases: int = 30
    slices_per_case: int = 8
    phenotype: str = "iph"
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.phenotype not in PHENOTYPES:
            raise ValueError(f"phenotype must be one of {PHENOTYPES}, got {self.phenotype!r}")
        if self.h < 16 or self.w < 16:
            raise ValueError("phantom slices must be at least 16x16")
        if self.n_cases < 0 or self.slices_per_case < 1:
            raise ValueError("n_cases must be >= 0 and slices_per_case >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


class PlacementError(RuntimeError):
    pass


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def case_seed(seed: int, case_id: int) -> int:
    """Seed of case ``case_id``: splitmix64 applied to (seed, case_id) in turn."""
    return splitmix64(splitmix64(seed & _MASK64) ^ (case_id & _MASK64))


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return u * u + v * v


def _head(rng, h, w):
    """Case-level head geometry."""
    return {
        "cy": h / 2 + rng.uniform(-1.5, 1.5),
        "cx": w / 2 + rng.uniform(-1.5, 1.5),
        "ay": h * rng.uniform(0.40, 0.45),
        "ax": w * rng.uniform(0.34, 0.40),
        "theta": rng.uniform(-0.15, 0.15),
        "thick": rng.uniform(2.5, 3.5),
    }


def _brain_region(yy, xx, head, shrink=0.0):
    t = head["thick"] + shrink
    return _ellipse(yy, xx, head["cy"], head["cx"], head["ay"] - t, head["ax"] - t, head["theta"]) <= 1.0


def _skull_ring(yy, xx, head):
    outer = _ellipse(yy, xx, head["cy"], head["cx"], head["ay"], head["ax"], head["theta"]) <= 1.0
    return outer & ~_brain_region(yy, xx, head)


def _inside_point(rng, margin_mask):
    ys, xs = np.nonzero(margin_mask)
    if len(ys) == 0:
        raise PlacementError("no admissible lesion position")
    i = rng.integers(len(ys))
    return float(ys[i]), float(xs[i])


def _plan_lesion(rng, phenotype, yy, xx, head):
    """Case-level lesion parameters."""
    if phenotype == "iph":
        deep = _brain_region(yy, xx, head, shrink=9.0)
        cy, cx = _inside_point(rng, deep)
        return {
            "cy": cy,
            "cx": cx,
            "ay": rng.uniform(4.5, 8.5),
            "ax": rng.uniform(4.5, 8.5),
            "theta": rng.uniform(0, np.pi),
        }
    if phenotype == "contusion":
        ring = _brain_region(yy, xx, head, shrink=4.0) & ~_brain_region(yy, xx, head, shrink=14.0)
        blobs = []
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = _inside_point(rng, ring)
            blobs.append((cy, cx, rng.uniform(2.6, 4.5)))
        return {"blobs": blobs}
    # extra_axial: angular sector against the inner table
    return {
        "phi": rng.uniform(0, 2 * np.pi),
        "span": rng.uniform(0.9, 1.7),
        "depth": rng.uniform(4.0, 7.0),
    }


def _lesion_mask(plan, phenotype, yy, xx, head, scale):
    """Slice cross-section; ``scale`` in (0, 1] shrinks it towards the case extremes."""
    if phenotype == "iph":
        return _ellipse(yy, xx, plan["cy"], plan["cx"], plan["ay"] * scale, plan["ax"] * scale, plan["theta"]) <= 1.0
    if phenotype == "contusion":
        m = np.zeros(yy.shape, dtype=bool)
        for cy, cx, r in plan["blobs"]:
            m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= (r * scale) ** 2
        return m
    t = head["thick"]
    # normalised radius w.r.t. the inner skull boundary; 1 on the boundary
    r = np.sqrt(_ellipse(yy, xx, head["cy"], head["cx"], head["ay"] - t, head["ax"] - t, head["theta"]))
    ang = np.arctan2(yy - head["cy"], xx - head["cx"])
    dphi = np.angle(np.exp(1j * (ang - plan["phi"])))
    half = plan["span"] * (0.6 + 0.4 * scale) / 2
    # lens-shaped: thickest at the sector centre, tapering to the tips
    depth = plan["depth"] * scale * np.sqrt(np.clip(1 - (dphi / half) ** 2, 0, None))
    mean_axis = 0.5 * (head["ay"] + head["ax"]) - t
    return (r <= 1.0) & (r > 1.0 - depth / mean_axis)


def _texture(rng, h, w, amp, sigma):
    t = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma)
    t /= t.std() + 1e-12
    return amp * t


def _render(rng, spec, yy, xx, head, lesion, n_spots):
    h, w = spec.h, spec.w
    brain = _brain_region(yy, xx, head)
    skull = _skull_ring(yy, xx, head)
    img = np.full((h, w), 0.02)
    img[skull] = SKULL_LEVEL
    brain_tex = BRAIN_LEVEL + _texture(rng, h, w, 0.04, 3.0)
    img[brain] = brain_tex[brain]
    # bright distractors: tiny spots in the same intensity band as lesions
    ys, xs = np.nonzero(brain & ~lesion)
    for _ in range(n_spots):
        if len(ys) == 0:
            break
        i = rng.integers(len(ys))
        r = rng.uniform(0.6, 1.5)
        spot = ((yy - ys[i]) ** 2 + (xx - xs[i]) ** 2 <= r * r) & brain & ~lesion
        img[spot] = rng.uniform(0.6, 0.8)
    if lesion.any():
        level = rng.uniform(0.62, 0.78)
        lt = level + _texture(rng, h, w, 0.03, 1.0)
        img[lesion] = lt[lesion]
    if spec.noise_std:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_case(spec: PhantomSpec, seed: int, case_id: int = 0, max_retries: int = 20) -> list[SliceSample]:
    """All slices of one case, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    h, w, n = spec.h, spec.w, spec.slices_per_case
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    head = _head(rng, h, w)
    brain = _brain_region(yy, xx, head)
    min_area = MIN_AREA_FRAC * h * w
    max_area = MAX_AREA_FRAC * h * w
    for _attempt in range(max_retries):
        plan = _plan_lesion(rng, spec.phenotype, yy, xx, head)
        # lesion occupies a contiguous run of slices centred somewhere in the stack
        centre = rng.uniform(0.3, 0.7) * (n - 1)
        radius = rng.uniform(0.45, 0.75) * n
        masks = []
        ok = True
        for k in range(n):
            z = (k - centre) / radius
            m = np.zeros((h, w), dtype=bool)
            if abs(z) < 1:
                m = _lesion_mask(plan, spec.phenotype, yy, xx, head, np.sqrt(1 - z * z)) & brain
                area = m.sum()
                if area < min_area:
                    m[:] = False
                elif area > max_area:
                    ok = False
                    break
            masks.append(m)
        if ok and any(m.any() for m in masks):
            break
    else:
        raise PlacementError(f"lesion placement failed after {max_retries} attempts (case {case_id})")
    samples = []
    n_spots = int(rng.integers(4, 9))
    for k, m in enumerate(masks):
        img = _render(rng, spec, yy, xx, head, m, n_spots)
        samples.append(
            SliceSample(
                image=img.astype(np.float32)[None, None],
                mask=m.astype(np.uint8)[None, None],
                phenotype=spec.phenotype,
                case_id=case_id,
                slice_idx=k,
            )
        )
    return samples


def generate_dataset(spec: PhantomSpec) -> list[SliceSample]:
    """``n_cases * slices_per_case`` samples; case ``i`` uses ``case_seed(spec.seed, i)``."""
    out: list[SliceSample] = []
    for case_id in range(spec.n_cases):
        out.extend(generate_case(spec, case_seed(spec.seed, case_id), case_id))
    return out


def split(dataset, train_fraction: float, seed: int):
    """Split by case id so no case contributes slices to both sides."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    cases = sorted({s.case_id for s in dataset})
    order = np.random.default_rng(seed).permutation(len(cases))
    n_train = int(round(train_fraction * len(cases)))
    if n_train == 0 or n_train == len(cases):
        raise ValueError(
            f"train_fraction {train_fraction} on {len(cases)} cases leaves one side empty"
        )
    train_ids = {cases[i] for i in order[:n_train]}
    train = [s for s in dataset if s.case_id in train_ids]
    val = [s for s in dataset if s.case_id not in train_ids]
    return train, val


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate samples into ``(images, masks)`` arrays of shape [n, 1, h, w]."""
    samples = list(samples)
    return (
        np.concatenate([s.image for s in samples]),
        np.concatenate([s.mask for s in samples]),
    )
