"""Deterministic "blob world" backend.

Abstract interface: a backend exposes ``describe``, ``condition``,
``init_latent``, ``step``, ``decode``, ``segment``, ``embed_image`` and
``embed_text``. The toy implementation here is a tiny latent denoiser whose
scene is a set of colored Gaussian blobs, one per visual concept, plus a
color-distance segmenter and a color-histogram embedder. Everything is a
pure function of (seed, text, configuration), so whole trajectories are
bit-reproducible and cheap enough for exhaustive desk-scale checks.

World model: for a given seed, each concept is hashed to a blob layout
(center, radius, render weight). A deliberate dropout probability renders
some blobs faint, so some seeds are genuinely bad for a prompt and noise
ranking has something to catch. During a denoising step the latent moves a
scheduled fraction toward the scene image; each blob's render weight is
scaled linearly by the cross-attention mass its token span places inside
the blob footprint, which is what makes attention modulation observable in
the output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .grid import Grid2D, ROLE_LOGIT, bilinear_resample
from .prompt import Concept, PromptError, extract_concepts, tokenize

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# Toy world dimensions. Attention resolutions must divide the image size.
LATENT_CHANNELS = 4
LATENT_SIZE = 16
IMAGE_SIZE = 160
ATTENTION_SIZES = ((16, 16), (8, 8))
EMBED_DIM = 32
TOTAL_TIMESTEPS = 50

# Blob layout: probability a concept's blob renders at full strength, and
# the render weights for strong vs dropped (faint) blobs.
STRONG_PROB = 0.7
WEIGHT_STRONG = 2.0
WEIGHT_FAINT = 0.5
RADIUS_RANGE = (0.09, 0.14)  # fraction of image size
CENTER_MARGIN = 0.18

# Denoiser update: z moves eta(t) = ETA0 * (t/T)^3 of the way to the scene
# encoding, so early steps dominate the layout and late steps refine.
ETA0 = 0.5

# Segmenter: logit = SEG_GAIN * (SEG_OFFSET - ||pixel - color||).
SEG_GAIN = 4.0
SEG_OFFSET = 0.42

BACKGROUND = 0.5
_PROJECTION_SEED = 0xA77E57  # attention geometry is fixed across runs

_TEXT_EMBED_SMOOTHING = 1e-3

# sRGB-ish anchors, squashed toward mid-gray below so rendered scenes stay
# inside the decoder's representable range.
_BASE_COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "orange": (1.0, 0.55, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "pink": (1.0, 0.55, 0.75),
    "brown": (0.55, 0.3, 0.1),
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "teal": (0.0, 0.5, 0.5),
    "navy": (0.0, 0.0, 0.5),
    "maroon": (0.5, 0.0, 0.0),
    "olive": (0.5, 0.5, 0.0),
    "lime": (0.6, 1.0, 0.2),
    "aqua": (0.2, 0.9, 0.8),
    "silver": (0.75, 0.75, 0.78),
    "gold": (0.9, 0.75, 0.2),
    "beige": (0.9, 0.85, 0.7),
    "coral": (1.0, 0.5, 0.3),
    "crimson": (0.86, 0.08, 0.24),
    "indigo": (0.3, 0.0, 0.5),
    "ivory": (1.0, 1.0, 0.9),
    "khaki": (0.76, 0.69, 0.4),
    "lavender": (0.8, 0.7, 0.9),
    "plum": (0.56, 0.27, 0.52),
    "salmon": (0.98, 0.5, 0.45),
    "tan": (0.82, 0.7, 0.55),
    "turquoise": (0.25, 0.88, 0.82),
}

COLOR_NAMES: tuple[str, ...] = tuple(_BASE_COLORS)

# Rendered gamut: squash toward mid-gray so decode(encode(scene)) == blur(scene).
COLOR_TABLE: dict[str, np.ndarray] = {
    name: (BACKGROUND + 0.7 * (np.asarray(rgb, dtype=np.float64) - 0.5)).astype(np.float64)
    for name, rgb in _BASE_COLORS.items()
}

_COLOR_MATRIX = np.stack([COLOR_TABLE[name] for name in COLOR_NAMES])  # (32, 3)


class BackendError(RuntimeError):
    """Raised for backend failures: bad referents, exhausted trajectories, wire faults."""


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(master_seed: int, index: int) -> int:
    """Deterministic per-index seed stream; bijective in index, so distinct."""
    return splitmix64((master_seed + index * GOLDEN) & MASK64)


def text_hash(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _rng(*keys: int | str | bytes) -> np.random.Generator:
    h = hashlib.blake2b(digest_size=16)
    for key in keys:
        if isinstance(key, int):
            h.update(key.to_bytes(16, "little", signed=False))
        elif isinstance(key, str):
            h.update(key.encode("utf-8"))
        else:
            h.update(key)
        h.update(b"\x00")
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


@dataclass(frozen=True)
class BackendDescriptor:
    """Static geometry of a backend: resolutions, embedding width, step count."""

    name: str
    latent_channels: int
    latent_size: tuple[int, int]
    image_size: tuple[int, int]
    attention_sizes: tuple[tuple[int, int], ...]
    embed_dim: int
    total_timesteps: int
    control_layers: tuple[int, ...]
    shareable: bool

    def __post_init__(self) -> None:
        for h, w in self.attention_sizes:
            if self.image_size[0] % h or self.image_size[1] % w:
                raise BackendError(
                    f"attention resolution {(h, w)} does not divide image {self.image_size}"
                )


@dataclass(frozen=True)
class LatentState:
    """Backend latent at a timestep; ``seed`` records the noise it grew from."""

    values: np.ndarray  # (C, H, W) float32
    timestep: int
    seed: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise BackendError("latent must be a (C, H, W) array")
        if not np.all(np.isfinite(arr)):
            raise BackendError("latent values must be finite")
        if self.timestep < 0:
            raise BackendError("latent timestep must be >= 0")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class Condition:
    """Conditioning text with per-token embeddings (SOT + tokens + EOT rows)."""

    text: str
    tokens: tuple[str, ...]
    embeddings: np.ndarray  # (p + 2, d) float32
    concepts: tuple[Concept, ...]

    @property
    def p(self) -> int:
        return len(self.tokens)


@dataclass
class AttentionStack:
    """Per-layer cross-attention maps, ordered [SOT, token 1..p, EOT]."""

    layer: int
    timestep: int
    maps: np.ndarray  # (p + 2, h, w) float32, non-negative

    def __post_init__(self) -> None:
        arr = np.asarray(self.maps, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] < 2:
            raise BackendError("attention stack needs at least SOT and EOT maps")
        if arr.min() < 0.0:
            raise BackendError("attention maps must be non-negative")
        self.maps = arr

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[0] - 2


AttentionHook = Callable[[AttentionStack], AttentionStack]


class Backend(Protocol):
    """Contract shared by the toy backend and the wire-protocol client."""

    def describe(self) -> BackendDescriptor: ...

    def condition(self, text: str) -> Condition: ...

    def init_latent(self, seed: int) -> LatentState: ...

    def step(
        self, z: LatentState, condition: Condition, attention_hook: Optional[AttentionHook] = None
    ) -> LatentState: ...

    def decode(self, z: LatentState) -> np.ndarray: ...

    def segment(self, image: np.ndarray, referent: str) -> Grid2D: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class BlobSpec:
    """Per-(seed, concept) blob: where it renders, how big, how strongly."""

    center: tuple[float, float]  # (x, y) in image pixels
    radius: float  # in image pixels
    weight: float
    strong: bool
    color: np.ndarray  # (3,)


def concept_color(concept: Concept) -> np.ndarray | None:
    """First color attribute of the concept, or None."""
    for word in concept.attributes:
        if word in COLOR_TABLE:
            return COLOR_TABLE[word]
    return None


def blob_layout(seed: int, concept: Concept, image_size: int = IMAGE_SIZE) -> BlobSpec:
    """Deterministic blob placement for (seed, concept).

    Concepts without a color attribute get a fallback color hashed from
    their text so the denoiser still renders them; the segmenter remains
    strict and rejects colorless referents.
    """
    rng = _rng(b"layout", seed, text_hash(concept.text))
    strong = bool(rng.random() < STRONG_PROB)
    cx = rng.uniform(CENTER_MARGIN, 1.0 - CENTER_MARGIN) * image_size
    cy = rng.uniform(CENTER_MARGIN, 1.0 - CENTER_MARGIN) * image_size
    radius = rng.uniform(*RADIUS_RANGE) * image_size
    color = concept_color(concept)
    if color is None:
        color = _COLOR_MATRIX[text_hash(concept.text) % len(COLOR_NAMES)]
    return BlobSpec(
        center=(float(cx), float(cy)),
        radius=float(radius),
        weight=WEIGHT_STRONG if strong else WEIGHT_FAINT,
        strong=strong,
        color=color,
    )


def blob_footprint(blob: BlobSpec, height: int, width: int, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Gaussian bump of the blob evaluated on an (height, width) grid."""
    sy = image_size / height
    sx = image_size / width
    ys = (np.arange(height, dtype=np.float64) + 0.5) * sy
    xs = (np.arange(width, dtype=np.float64) + 0.5) * sx
    dy = (ys - blob.center[1])[:, None]
    dx = (xs - blob.center[0])[None, :]
    d2 = dx * dx + dy * dy
    return np.exp(-d2 / (2.0 * blob.radius**2))


def _token_embedding(token: str, dim: int) -> np.ndarray:
    return _rng(b"token", token).standard_normal(dim)


class ToyBackend:
    """Fully deterministic blob-world backend; safe to share across workers."""

    def __init__(
        self,
        lexicon: frozenset[str] | None = None,
        total_timesteps: int = TOTAL_TIMESTEPS,
    ) -> None:
        self._lexicon = lexicon
        self._descriptor = BackendDescriptor(
            name="toy-blob-world",
            latent_channels=LATENT_CHANNELS,
            latent_size=(LATENT_SIZE, LATENT_SIZE),
            image_size=(IMAGE_SIZE, IMAGE_SIZE),
            attention_sizes=ATTENTION_SIZES,
            embed_dim=EMBED_DIM,
            total_timesteps=total_timesteps,
            control_layers=tuple(range(len(ATTENTION_SIZES))),
            shareable=True,
        )
        rng = _rng(b"projections", _PROJECTION_SEED)
        # Query/key projections per attention layer; fixed so attention
        # geometry is stable across runs and seeds.
        self._w_q = [
            (rng.standard_normal((LATENT_CHANNELS, EMBED_DIM)) * 0.5).astype(np.float32)
            for _ in ATTENTION_SIZES
        ]
        self._w_k = [
            (rng.standard_normal((EMBED_DIM, EMBED_DIM)) / np.sqrt(EMBED_DIM)).astype(np.float32)
            for _ in ATTENTION_SIZES
        ]
        # Orthonormal RGB -> latent lift; decode uses its transpose.
        basis = _rng(b"colorspace", _PROJECTION_SEED).standard_normal((LATENT_CHANNELS, 3))
        q, _ = np.linalg.qr(basis)
        self._lift = q[:, :3].astype(np.float64)  # (C, 3), columns orthonormal

    # -- descriptor and conditioning ------------------------------------

    def describe(self) -> BackendDescriptor:
        return self._descriptor

    def condition(self, text: str) -> Condition:
        tp = tokenize(text)
        try:
            concepts = tuple(extract_concepts(tp, self._lexicon))
        except PromptError:
            concepts = ()
        rows = [_token_embedding("<sot>", EMBED_DIM)]
        rows += [_token_embedding(tok, EMBED_DIM) for tok in tp.tokens]
        rows.append(_token_embedding("<eot>", EMBED_DIM))
        return Condition(
            text=text,
            tokens=tp.tokens,
            embeddings=np.stack(rows).astype(np.float32),
            concepts=concepts,
        )

    # -- latent lifecycle ------------------------------------------------

    def init_latent(self, seed: int) -> LatentState:
        noise = _rng(b"latent", seed).standard_normal(
            (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE)
        )
        return LatentState(
            values=noise.astype(np.float32),
            timestep=self._descriptor.total_timesteps,
            seed=seed,
        )

    def step(
        self,
        z: LatentState,
        condition: Condition,
        attention_hook: Optional[AttentionHook] = None,
    ) -> LatentState:
        if z.timestep < 1:
            raise BackendError("trajectory exhausted")
        stacks = self.attention_stacks(z, condition)
        if attention_hook is not None:
            stacks = [attention_hook(stack) for stack in stacks]
        target = self._scene(z.seed, condition, stacks)
        encoded = self.encode(target)
        t = z.timestep
        eta = np.float32(ETA0 * (t / self._descriptor.total_timesteps) ** 3)
        values = z.values + eta * (encoded - z.values)
        return LatentState(values=values.astype(np.float32), timestep=t - 1, seed=z.seed)

    def decode(self, z: LatentState) -> np.ndarray:
        """Upsample the latent into a (3, H, W) float32 RGB image."""
        rgb_small = np.tensordot(self._lift.T, z.values.astype(np.float64), axes=1)
        h, w = self._descriptor.image_size
        planes = [bilinear_resample(plane, h, w) for plane in rgb_small]
        image = BACKGROUND + np.stack(planes)
        return np.clip(image, 0.05, 0.95).astype(np.float32)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Average-pool an RGB image and lift it into latent space."""
        arr = np.asarray(image, dtype=np.float64)
        c, h, w = arr.shape
        fy = h // LATENT_SIZE
        fx = w // LATENT_SIZE
        pooled = arr.reshape(c, LATENT_SIZE, fy, LATENT_SIZE, fx).mean(axis=(2, 4))
        lifted = np.tensordot(self._lift, pooled - BACKGROUND, axes=1)
        return lifted.astype(np.float32)

    # -- attention --------------------------------------------------------

    def attention_stacks(self, z: LatentState, condition: Condition) -> list[AttentionStack]:
        """Row-stochastic cross-attention per layer: softmax(Q K^T / sqrt(d))."""
        stacks = []
        for layer, (h, w) in enumerate(self._descriptor.attention_sizes):
            feats = self._layer_features(z, h, w)  # (h*w, C)
            q = feats @ self._w_q[layer]
            k = condition.embeddings @ self._w_k[layer]
            logits = (q @ k.T) / np.float32(np.sqrt(EMBED_DIM))
            logits -= logits.max(axis=1, keepdims=True)
            weights = np.exp(logits)
            weights /= weights.sum(axis=1, keepdims=True)
            maps = weights.T.reshape(condition.p + 2, h, w)
            stacks.append(AttentionStack(layer=layer, timestep=z.timestep, maps=maps))
        return stacks

    def _layer_features(self, z: LatentState, h: int, w: int) -> np.ndarray:
        values = z.values
        ch, lh, lw = values.shape
        if (lh, lw) != (h, w):
            fy = lh // h
            fx = lw // w
            values = values.reshape(ch, h, fy, w, fx).mean(axis=(2, 4), dtype=np.float32)
        return values.reshape(ch, h * w).T.astype(np.float32)

    # -- scene synthesis ---------------------------------------------------

    def _scene(
        self, seed: int, condition: Condition, stacks: Sequence[AttentionStack]
    ) -> np.ndarray:
        """Compose the step target: blobs weighted by in-footprint attention mass."""
        h, w = self._descriptor.image_size
        image = np.full((3, h, w), BACKGROUND, dtype=np.float64)
        n_rows = condition.p + 2
        for concept in condition.concepts:
            blob = blob_layout(seed, concept)
            a, b = concept.span
            mass = 0.0
            uniform_mass = 0.0
            for stack in stacks:
                footprint = blob_footprint(blob, *stack.maps.shape[1:])
                span_maps = stack.maps[a : b + 1].astype(np.float64)
                mass += float((span_maps * footprint).sum())
                uniform_mass += (b - a + 1) * float(footprint.sum()) / n_rows
            w_eff = blob.weight * (mass / uniform_mass if uniform_mass > 0 else 0.0)
            bump = blob_footprint(blob, h, w)
            alpha = 1.0 - np.exp(-w_eff * bump)
            image = image * (1.0 - alpha) + blob.color[:, None, None] * alpha
        return image.astype(np.float32)

    # -- segmentation and embeddings ---------------------------------------

    def segment(self, image: np.ndarray, referent: str) -> Grid2D:
        """Color-match logits: high where the image matches the referent's color."""
        concepts = extract_concepts(tokenize(referent), self._lexicon)
        color = concept_color(concepts[0])
        if color is None:
            raise BackendError(f"unknown referent {referent!r}: no lexicon color")
        arr = np.asarray(image, dtype=np.float64)
        dist = np.sqrt(((arr - color[:, None, None]) ** 2).sum(axis=0))
        return Grid2D(SEG_GAIN * (SEG_OFFSET - dist), ROLE_LOGIT)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        """Unit-norm histogram of nearest table colors over all pixels."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.size == 0:
            raise BackendError("degenerate embedding: empty image")
        c, h, w = arr.shape
        flat = arr.reshape(c, h * w).T  # (n, 3)
        d2 = ((flat[:, None, :] - _COLOR_MATRIX[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        hist = np.bincount(nearest, minlength=len(COLOR_NAMES)).astype(np.float64)
        norm = np.linalg.norm(hist)
        if norm == 0.0:
            raise BackendError("degenerate embedding: empty histogram")
        return hist / norm

    def embed_text(self, text: str) -> np.ndarray:
        """Unit-norm bag of color words, lightly smoothed so it is never zero."""
        tp = tokenize(text)
        counts = np.full(len(COLOR_NAMES), _TEXT_EMBED_SMOOTHING, dtype=np.float64)
        index = {name: i for i, name in enumerate(COLOR_NAMES)}
        for token in tp.tokens:
            if token in index:
                counts[index[token]] += 1.0
        return counts / np.linalg.norm(counts)
