"""Procedural preference world: user styles, a deterministic renderer, and oracles.

Images are ``(3, S, S)`` arrays in [-1, 1]. The background colour comes from
(hue, saturation) and is darkened in ``texture_freq`` horizontal bands. The
subject is ``count`` black copies of ``shape`` stacked in a column. The column
is centred at the prompt position shifted by the user's ``offset``, and its
corners are softened by ``roundness``.

The estimators below invert the renderer in closed form (colour, bands) or by
exhaustive template search (placement, roundness). They stand in for learned
proxy metrics.
"""

from __future__ import annotations

import colorsys
import functools
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .prompts import COUNTS, EMPTY, POSITIONS, SHAPES, Prompt, all_prompts, parse, validate

HUE_RANGE = (0.0, 1.0)
SATURATION_RANGE = (0.2, 1.0)
ROUNDNESS_RANGE = (0.0, 1.0)
TEXTURE_CLASSES = (0, 1, 2, 3)
OFFSET_RANGE = (-0.25, 0.25)

STRIPE_VALUE = 0.6
FOREGROUND_THRESHOLD = -0.4
POSITION_CENTRE = {"left": 0.3, "center": 0.5, "right": 0.7}
# subject side and inter-copy gap as fractions of the image side, per copy count
SUBJECT_SIDE = {1: 7 / 16, 2: 6 / 16, 3: 4 / 16}
SUBJECT_GAP = {1: 0.0, 2: 2 / 16, 3: 1 / 16}
ROUNDNESS_GRID = np.linspace(0.0, 1.0, 21)
ROUNDNESS_TIE_SPAN = 0.75
# corner radius at roundness 1, as a fraction of the half-side; below 1 so a square never becomes a circle
MAX_CORNER = 0.5
STYLE_TOLERANCE = 0.08


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class StyleParams:
    hue: float
    saturation: float
    roundness: float | None
    texture_freq: int
    offset: float | None

    def validate(self) -> None:
        if not 0.0 <= self.hue < 1.0:
            raise ValueError(f"hue {self.hue} outside [0, 1)")
        if not SATURATION_RANGE[0] <= self.saturation <= SATURATION_RANGE[1]:
            raise ValueError(f"saturation {self.saturation} outside {SATURATION_RANGE}")
        if self.roundness is None or not 0.0 <= self.roundness <= 1.0:
            raise ValueError(f"roundness {self.roundness} outside [0, 1]")
        if self.texture_freq not in TEXTURE_CLASSES:
            raise ValueError(f"texture_freq {self.texture_freq} not in {TEXTURE_CLASSES}")
        if self.offset is None or not OFFSET_RANGE[0] <= self.offset <= OFFSET_RANGE[1]:
            raise ValueError(f"offset {self.offset} outside {OFFSET_RANGE}")

    def components(self, other: "StyleParams") -> dict[str, float]:
        """Per-dimension distances, each normalised to [0, 1]; unavailable dims omitted."""
        dh = abs(self.hue - other.hue) % 1.0
        out = {
            "hue": min(dh, 1.0 - dh) / 0.5,
            "saturation": abs(self.saturation - other.saturation) / (SATURATION_RANGE[1] - SATURATION_RANGE[0]),
            "texture_freq": abs(self.texture_freq - other.texture_freq) / 3.0,
        }
        if self.roundness is not None and other.roundness is not None:
            out["roundness"] = abs(self.roundness - other.roundness)
        if self.offset is not None and other.offset is not None:
            out["offset"] = abs(self.offset - other.offset) / (OFFSET_RANGE[1] - OFFSET_RANGE[0])
        return out

    def distance(self, other: "StyleParams") -> float:
        comps = self.components(other)
        return float(sum(comps.values()) / len(comps))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StyleParams":
        return cls(**d)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    style: StyleParams
    seed: int


@dataclass
class Sample:
    prompt: Prompt
    image: np.ndarray
    user_id: int | None
    seed: int = 0
    style: StyleParams | None = None


@dataclass
class Dataset:
    train_users: list[UserProfile]
    heldout_users: list[UserProfile]
    samples: list[Sample]
    prior_samples: list[Sample] = field(default_factory=list)
    master_seed: int = 0
    image_size: int = 16

    @property
    def users(self) -> list[UserProfile]:
        return self.train_users + self.heldout_users

    def user(self, user_id: int) -> UserProfile:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def samples_of(self, user_id: int) -> list[Sample]:
        return [s for s in self.samples if s.user_id == user_id]

    def train_samples(self) -> list[Sample]:
        ids = {u.user_id for u in self.train_users}
        return [s for s in self.samples if s.user_id in ids]


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def stripe_rows(texture_freq: int, size: int) -> np.ndarray:
    """Boolean per-row mask of the darkened bands."""
    if texture_freq == 0:
        return np.zeros(size, dtype=bool)
    y = (np.arange(size) + 0.5) / size
    return np.sin(2.0 * math.pi * texture_freq * y) < 0.0


def background(style: StyleParams, size: int) -> np.ndarray:
    rows = stripe_rows(style.texture_freq, size)
    bright = hsv_to_rgb(style.hue, style.saturation, 1.0)
    dark = hsv_to_rgb(style.hue, style.saturation, STRIPE_VALUE)
    rgb = np.where(rows[None, :, None], dark[:, None, None], bright[:, None, None])
    rgb = np.broadcast_to(rgb, (3, size, size))
    return 2.0 * rgb - 1.0


def _rounded_box_sdf(px, py, hx, hy, r):
    qx = np.abs(px) - (hx - r)
    qy = np.abs(py) - (hy - r)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    return outside + np.minimum(np.maximum(qx, qy), 0.0) - r


_TRIANGLE = np.array([[0.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _triangle_geometry():
    a, b, c = _TRIANGLE
    la, lb, lc = np.linalg.norm(b - c), np.linalg.norm(c - a), np.linalg.norm(a - b)
    incentre = (la * a + lb * b + lc * c) / (la + lb + lc)
    s = (la + lb + lc) / 2.0
    area = abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])) / 2.0
    return incentre, area / s


_TRI_INCENTRE, _TRI_INRADIUS = _triangle_geometry()


def _polygon_sdf(px, py, verts):
    """Signed distance to a convex polygon (negative inside), vertices in order."""
    d = np.full(px.shape, np.inf)
    inside = np.ones(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        wx, wy = px - ax, py - ay
        t = np.clip((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        dx, dy = wx - t * ex, wy - t * ey
        d = np.minimum(d, np.hypot(dx, dy))
        inside &= (ex * wy - ey * wx) >= 0.0
    return np.where(inside, -d, d)


CROSS_HALF_WIDTH = 1.0 / 3.0


def shape_mask(shape: str, roundness: float, side: int) -> np.ndarray:
    """Boolean ``side x side`` mask of one copy, sampled at pixel centres."""
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    px, py = np.meshgrid(c, c)
    if shape == "circle":
        return px * px + py * py <= 1.0
    if shape == "square":
        r = MAX_CORNER * roundness
        return _rounded_box_sdf(px, py, 1.0, 1.0, r) <= 0.0
    if shape == "cross":
        w = CROSS_HALF_WIDTH
        r = MAX_CORNER * roundness * w
        return (_rounded_box_sdf(px, py, 1.0, w, r) <= 0.0) | (_rounded_box_sdf(px, py, w, 1.0, r) <= 0.0)
    if shape == "triangle":
        r = roundness * _TRI_INRADIUS
        k = 1.0 - r / _TRI_INRADIUS
        if k <= 0.0:
            # fully rounded: the incircle
            return np.hypot(px - _TRI_INCENTRE[0], py - _TRI_INCENTRE[1]) <= _TRI_INRADIUS
        verts = _TRI_INCENTRE + (_TRIANGLE - _TRI_INCENTRE) * k
        return _polygon_sdf(px, py, verts) - r <= 0.0
    raise KeyError(f"unknown shape {shape!r}")


def _layout(count: int, size: int) -> tuple[int, int, list[int]]:
    side = max(2, int(round(SUBJECT_SIDE[count] * size)))
    gap = int(round(SUBJECT_GAP[count] * size))
    total = count * side + (count - 1) * gap
    top = (size - total) // 2
    tops = [top + k * (side + gap) for k in range(count)]
    return side, gap, tops


def subject_left(position: str, offset: float, side: int, size: int) -> int:
    return int(round((POSITION_CENTRE[position] + offset) * size - side / 2.0))


def subject_mask(prompt: Prompt, roundness: float, left: int, jitter: int, size: int) -> np.ndarray:
    """Foreground mask of the full subject column with its left edge at ``left``."""
    n = prompt.n
    side, _, tops = _layout(n, size)
    single = _shape_mask_cached(prompt.shape, float(roundness), side)
    canvas = np.zeros((size, size), dtype=bool)
    for top in tops:
        y0 = top + jitter
        _paste(canvas, single, y0, left)
    return canvas


@functools.lru_cache(maxsize=4096)
def _shape_mask_cached(shape: str, roundness: float, side: int) -> np.ndarray:
    m = shape_mask(shape, roundness, side)
    m.flags.writeable = False
    return m


def _paste(canvas: np.ndarray, patch: np.ndarray, y0: int, x0: int) -> None:
    H, W = canvas.shape
    h, w = patch.shape
    ys, xs = max(0, y0), max(0, x0)
    ye, xe = min(H, y0 + h), min(W, x0 + w)
    if ys >= ye or xs >= xe:
        return
    canvas[ys:ye, xs:xe] |= patch[ys - y0:ye - y0, xs - x0:xe - x0]


def placement_jitter(seed: int) -> int:
    return int(np.random.default_rng(seed).integers(-1, 2))


def render(prompt: Prompt, style: StyleParams, seed: int, size: int = 16) -> np.ndarray:
    """Deterministic ``(3, size, size)`` image of ``prompt`` in ``style``."""
    validate(prompt)
    style.validate()
    img = np.array(background(style, size))
    if prompt.is_empty:
        return img
    side, _, _ = _layout(prompt.n, size)
    jitter = placement_jitter(seed) * max(1, size // 16)
    left = subject_left(prompt.position, style.offset, side, size)
    mask = subject_mask(prompt, style.roundness, left, jitter, size)
    img[:, mask] = -1.0
    return img


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def foreground(image: np.ndarray) -> np.ndarray:
    return np.asarray(image).max(axis=0) < FOREGROUND_THRESHOLD


def count_components(mask: np.ndarray) -> int:
    return int(ndimage.label(mask)[1])


def _rgb_to_hsv(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """pixels (3, n) in [0, 1] -> hue, saturation, value arrays."""
    r, g, b = pixels
    mx = pixels.max(axis=0)
    mn = pixels.min(axis=0)
    chroma = mx - mn
    sat = np.where(mx > 0, chroma / np.maximum(mx, 1e-12), 0.0)
    safe = np.maximum(chroma, 1e-12)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0)) / 6.0
    h = np.where(chroma > 0, h, 0.0)
    return h, sat, mx


def _texture_templates(size: int) -> np.ndarray:
    return np.stack([np.where(stripe_rows(k, size), STRIPE_VALUE, 1.0) for k in TEXTURE_CLASSES])


def estimate_texture(value_profile: np.ndarray) -> int:
    """Banding class by matched filtering of the per-row brightness profile."""
    prof = value_profile - value_profile.mean()
    if np.sqrt(np.mean(prof ** 2)) < 0.05:
        return 0
    best, best_k = -np.inf, 0
    for k, tmpl in enumerate(_texture_templates(len(value_profile))):
        if k == 0:
            continue
        t = tmpl - tmpl.mean()
        corr = float(prof @ t / (np.linalg.norm(prof) * np.linalg.norm(t)))
        if corr > best:
            best, best_k = corr, k
    return best_k if best > 0.5 else 0


def _placement_candidates(prompt: Prompt, size: int):
    side, _, _ = _layout(prompt.n, size)
    lo = subject_left(prompt.position, OFFSET_RANGE[0], side, size)
    hi = subject_left(prompt.position, OFFSET_RANGE[1], side, size)
    step = max(1, size // 16)
    jitters = [-step, 0, step]
    return side, range(lo, hi + 1), jitters


@functools.lru_cache(maxsize=512)
def _template_stack(prompt: Prompt, size: int):
    """All candidate subject masks for a prompt: (n, size*size) plus their parameters."""
    side, lefts, jitters = _placement_candidates(prompt, size)
    masks, params = [], []
    for r in ROUNDNESS_GRID:
        for left in lefts:
            for jit in jitters:
                masks.append(subject_mask(prompt, r, left, jit, size).reshape(-1))
                params.append((float(r), left, jit))
    stack = np.array(masks, dtype=np.float64)
    stack.flags.writeable = False
    return stack, np.array(params), side


def _match_subject(mask: np.ndarray, prompt: Prompt):
    """IoU of ``mask`` against every candidate template of ``prompt``."""
    size = mask.shape[0]
    stack, params, side = _template_stack(prompt, size)
    m = mask.reshape(-1).astype(np.float64)
    inter = stack @ m
    union = stack.sum(axis=1) + m.sum() - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    return iou, params, side


def estimate_style(image: np.ndarray, prompt: Prompt | None = None) -> StyleParams:
    """Recover style parameters from an image.

    Colour and banding need no context. Placement offset and roundness are
    measured relative to the prompt's subject, so they are only estimated
    when ``prompt`` is given and the image has a foreground. Unavailable
    fields are ``None``.
    """
    image = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    C, H, W = image.shape
    fg = foreground(image)
    bg = ~fg
    if bg.sum() == 0:
        bg = np.ones_like(fg)
    pix = (image[:, bg] + 1.0) / 2.0
    h, s, v = _rgb_to_hsv(pix)
    chroma = s * v
    ang = 2.0 * math.pi * h
    wsum = chroma.sum()
    if wsum > 1e-9:
        hue = (math.atan2((chroma * np.sin(ang)).sum(), (chroma * np.cos(ang)).sum()) / (2 * math.pi)) % 1.0
    else:
        hue = 0.0
    if hue >= 1.0:
        hue = 0.0
    saturation = float(np.clip(s.mean(), *SATURATION_RANGE))

    value = (image.max(axis=0) + 1.0) / 2.0
    profile = np.empty(H)
    for y in range(H):
        row = bg[y]
        profile[y] = value[y, row].mean() if row.any() else np.nan
    if np.isnan(profile).any():
        profile = np.where(np.isnan(profile), np.nanmean(profile), profile)
    texture = estimate_texture(profile)

    roundness = offset = None
    if prompt is not None and not prompt.is_empty and fg.any():
        iou, params, side = _match_subject(fg, prompt)
        best = iou.max()
        if best > 0:
            top = np.isclose(iou, best, rtol=0, atol=1e-12)
            rs = params[top, 0]
            if rs.max() - rs.min() <= ROUNDNESS_TIE_SPAN:
                roundness = float((rs.max() + rs.min()) / 2.0)
            lefts = params[top, 1]
            centre = (lefts.mean() + side / 2.0) / W
            offset = float(np.clip(centre - POSITION_CENTRE[prompt.position], *OFFSET_RANGE))
    return StyleParams(float(hue), saturation, roundness, int(texture), offset)


def content_check(image: np.ndarray, prompt: Prompt) -> float:
    """Best normalised cross-correlation of the foreground against the prompt's
    subject templates, times 1 if the component count matches the prompt."""
    validate(prompt)
    if prompt.is_empty:
        raise ValueError("content_check needs a content prompt")
    fg = foreground(np.asarray(image))
    if not fg.any() or fg.all():
        return 0.0
    if count_components(fg) != prompt.n:
        return 0.0
    stack, _, _ = _template_stack(prompt, fg.shape[0])
    m = fg.reshape(-1).astype(np.float64)
    mc = m - m.mean()
    tc = stack - stack.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(tc, axis=1) * np.linalg.norm(mc)
    ncc = np.where(denom > 0, tc @ mc / np.maximum(denom, 1e-12), 0.0)
    return float(np.clip(ncc.max(), 0.0, 1.0))


def _pool(x: np.ndarray, k: int) -> np.ndarray:
    C, H, W = x.shape
    return x.reshape(C, H // k, k, W // k, k).mean(axis=(2, 4))


def perceptual_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference averaged over full, 2x and 4x average-pooled scales."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"perceptual_distance: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean([np.abs(d).mean(), np.abs(_pool(d, 2)).mean(), np.abs(_pool(d, 4)).mean()]))


# --------------------------------------------------------------------------
# dataset generation
# --------------------------------------------------------------------------

def random_style(rng: np.random.Generator) -> StyleParams:
    return StyleParams(
        hue=float(rng.uniform(*HUE_RANGE)) % 1.0,
        saturation=float(rng.uniform(*SATURATION_RANGE)),
        roundness=float(rng.uniform(*ROUNDNESS_RANGE)),
        texture_freq=int(rng.integers(0, len(TEXTURE_CLASSES))),
        offset=float(rng.uniform(*OFFSET_RANGE)),
    )


def _uniform_abs_mean(c: float, lo: float, hi: float) -> float:
    """E|X - c| for X uniform on [lo, hi] and c inside it."""
    return ((c - lo) ** 2 + (hi - c) ** 2) / (2.0 * (hi - lo))


def expected_prior_distance(style: StyleParams, with_roundness: bool = True,
                            with_offset: bool = True) -> float:
    """Closed-form mean ``distance`` between ``style`` and a style drawn from the prior.

    Hue distance is uniform on [0, 1] whatever the reference, so its mean is 1/2.
    """
    terms = [
        0.5,
        _uniform_abs_mean(style.saturation, *SATURATION_RANGE) / (SATURATION_RANGE[1] - SATURATION_RANGE[0]),
        float(np.mean([abs(k - style.texture_freq) for k in TEXTURE_CLASSES])) / 3.0,
    ]
    if with_roundness:
        terms.append(_uniform_abs_mean(style.roundness, *ROUNDNESS_RANGE))
    if with_offset:
        terms.append(_uniform_abs_mean(style.offset, *OFFSET_RANGE) / (OFFSET_RANGE[1] - OFFSET_RANGE[0]))
    return float(np.mean(terms))


def jitter_style(style: StyleParams, amount: float, rng: np.random.Generator) -> StyleParams:
    """Per-sample variation around a user's style; the texture class is kept."""
    if amount <= 0:
        return style
    u = rng.uniform(-1.0, 1.0, size=4)
    return StyleParams(
        hue=float((style.hue + amount * u[0]) % 1.0),
        saturation=float(np.clip(style.saturation + 2 * amount * u[1], *SATURATION_RANGE)),
        roundness=float(np.clip(style.roundness + 3 * amount * u[2], *ROUNDNESS_RANGE)),
        texture_freq=style.texture_freq,
        offset=float(np.clip(style.offset + amount * u[3], *OFFSET_RANGE)),
    )


def derive_seed(*parts: int) -> int:
    h = hashlib.sha256(b"/".join(str(p).encode() for p in parts)).digest()
    return int.from_bytes(h[:8], "little")


def sample_user_styles(n: int, min_distance: float, rng: np.random.Generator,
                       max_attempts: int = 10_000) -> list[StyleParams]:
    styles: list[StyleParams] = []
    attempts = 0
    while len(styles) < n:
        attempts += 1
        if attempts > max_attempts:
            raise DataError(
                f"could not place {n} users at pairwise style distance >= {min_distance} "
                f"after {max_attempts} attempts; use fewer users or a smaller minimum distance")
        cand = random_style(rng)
        if all(cand.distance(s) >= min_distance for s in styles):
            styles.append(cand)
    return styles


def balanced_prompts(n: int, rng: np.random.Generator) -> list[Prompt]:
    """``n`` prompts cycling through shuffled passes over the full prompt set."""
    base = all_prompts()
    out: list[Prompt] = []
    while len(out) < n:
        order = rng.permutation(len(base))
        out.extend(base[i] for i in order)
    return out[:n]


def make_dataset(n_users: int = 8, per_user: int = 64, master_seed: int = 0, *,
                 n_heldout: int = 4, n_prior: int = 1024, size: int = 16,
                 min_distance: float = 0.15, style_jitter: float = 0.03,
                 max_attempts: int = 10_000,
                 prompt_distribution: Sequence[Prompt] | None = None) -> Dataset:
    """Training users, held-out users, their preferred samples, and a prior pool.

    The prior pool holds renders with styles drawn afresh from the style prior;
    it is what the backbone is pretrained on.
    """
    if n_users < 2:
        raise DataError("need at least two training users")
    rng = np.random.default_rng(master_seed)
    styles = sample_user_styles(n_users + n_heldout, min_distance, rng, max_attempts)
    users = [UserProfile(i, st, derive_seed(master_seed, "user", i)) for i, st in enumerate(styles)]
    samples: list[Sample] = []
    for u in users:
        urng = np.random.default_rng(u.seed)
        if prompt_distribution is None:
            prompts = balanced_prompts(per_user, urng)
        else:
            pool = list(prompt_distribution)
            prompts = [pool[i] for i in urng.integers(0, len(pool), size=per_user)]
        for k, p in enumerate(prompts):
            seed = derive_seed(master_seed, "sample", u.user_id, k)
            st = jitter_style(u.style, style_jitter, urng)
            samples.append(Sample(p, render(p, st, seed, size), u.user_id, seed, st))
    prior: list[Sample] = []
    prng = np.random.default_rng(derive_seed(master_seed, "prior"))
    prior_prompts = balanced_prompts(n_prior, prng)
    for k, p in enumerate(prior_prompts):
        st = random_style(prng)
        seed = derive_seed(master_seed, "prior", k)
        prior.append(Sample(p, render(p, st, seed, size), None, seed, st))
    return Dataset(users[:n_users], users[n_users:], samples, prior, master_seed, size)


def dataset_from_config(cfg, master_seed: int) -> Dataset:
    return make_dataset(cfg.n_train_users, cfg.per_user, master_seed,
                        n_heldout=cfg.n_heldout_users, n_prior=cfg.n_prior, size=cfg.image_size,
                        min_distance=cfg.min_style_distance, style_jitter=cfg.style_jitter,
                        max_attempts=cfg.max_rejection_attempts)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

RAW_MAGIC = b"PMF64\x00\x00\x01"


def write_raw(path: str | Path, array: np.ndarray) -> None:
    """Little-endian float64 payload behind a magic + ndim + dims header."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = RAW_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw float64 array file")
    (ndim,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    off = 12 + 8 * ndim
    n = int(np.prod(shape)) if shape else 1
    if len(blob) - off != 8 * n:
        raise DataError(f"{path}: payload size does not match header shape {shape}")
    return np.frombuffer(blob, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def _user_json(u: UserProfile, split: str) -> dict:
    return {"user_id": u.user_id, "style": u.style.to_dict(), "seed": u.seed, "split": split}


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for group, items in (("user", ds.samples), ("prior", ds.prior_samples)):
        for k, s in enumerate(items):
            fname = f"images/{group}_{k:05d}.f64"
            write_raw(d / fname, s.image)
            entries.append({
                "group": group, "file": fname, "prompt": " ".join(s.prompt.tokens),
                "user_id": s.user_id, "seed": s.seed,
                "style": None if s.style is None else s.style.to_dict(),
            })
    manifest = {
        "format": "prefmod-dataset/1",
        "master_seed": ds.master_seed,
        "image_size": ds.image_size,
        "users": [_user_json(u, "train") for u in ds.train_users]
                 + [_user_json(u, "heldout") for u in ds.heldout_users],
        "samples": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "prefmod-dataset/1":
        raise DataError(f"{mpath}: unsupported dataset format {manifest.get('format')!r}")
    train, held = [], []
    for u in manifest["users"]:
        prof = UserProfile(u["user_id"], StyleParams.from_dict(u["style"]), u["seed"])
        (train if u["split"] == "train" else held).append(prof)
    samples, prior = [], []
    for e in manifest["samples"]:
        s = Sample(parse(e["prompt"]), read_raw(d / e["file"]), e["user_id"], e["seed"],
                   None if e["style"] is None else StyleParams.from_dict(e["style"]))
        (samples if e["group"] == "user" else prior).append(s)
    return Dataset(train, held, samples, prior, manifest["master_seed"], manifest["image_size"])


def prompt_histogram(samples: Iterable[Sample]) -> dict[Prompt, int]:
    hist: dict[Prompt, int] = {}
    for s in samples:
        hist[s.prompt] = hist.get(s.prompt, 0) + 1
    return hist


__all__ = [
    "COUNTS", "EMPTY", "POSITIONS", "SHAPES", "Dataset", "DataError", "Prompt", "Sample",
    "StyleParams", "UserProfile", "content_check", "estimate_style", "load_dataset",
    "make_dataset", "perceptual_distance", "render", "save_dataset",
]
