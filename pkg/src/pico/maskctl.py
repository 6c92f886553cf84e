"""Referring mask control.

Raw segmentations of the intermediate image are rectified into reliable
masks (low-confidence, spatially dispersed ones are discarded), overlapping
claims between concepts are resolved per pixel, the survivors are
amplified/suppressed into gain fields, and the gains modulate the
cross-attention maps of each concept's token span during the early part of
denoising. Non-concept tokens are damped wherever any concept mask claims
the pixel, and each concept is damped wherever the others claim it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backend import AttentionHook, AttentionStack, Backend, LatentState
from .grid import (
    Grid2D,
    ROLE_LOGIT,
    ROLE_PROBABILITY,
    bilinear_resample,
    coord_dispersion,
    percentile,
    sigmoid,
    write_pgrd,
)
from .prompt import Concept


class ConfigError(ValueError):
    """Raised for hyperparameter combinations that violate the config contract."""


@dataclass(frozen=True)
class ControlConfig:
    """All pipeline hyperparameters, with the stock defaults baked in."""

    total_steps: int = 50  # T
    fast_steps: int = 5  # T_s
    control_steps: int = 25  # T_c: control runs for the first T_c steps
    candidate_ratio: int = 10  # r_s
    percentile: float = 90.0  # q
    delta: float = 2.0  # weight on the peak term of the concept score
    alpha_low: float = 0.7  # mask validity: confidence floor
    alpha_high: float = 1500.0  # mask validity: dispersion ceiling
    beta_low: float = 0.5  # augmentation: suppress at or below
    beta_high: float = 0.7  # augmentation: amplify at or above
    gamma: float = 15.0  # augmentation strength
    conflict_threshold: float = 0.5
    parallelism: int = 5

    def validate(self) -> "ControlConfig":
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.control_steps <= self.total_steps:
            raise ConfigError("control_steps must lie in [0, total_steps]")
        if not 1 <= self.fast_steps <= self.total_steps:
            raise ConfigError("fast_steps must lie in [1, total_steps]")
        if self.candidate_ratio < 1:
            raise ConfigError("candidate_ratio must be >= 1")
        if not 0.0 < self.percentile <= 100.0:
            raise ConfigError("percentile must lie in (0, 100]")
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        if self.beta_low > self.beta_high:
            raise ConfigError("beta_low must not exceed beta_high")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        return self


# External <-> field names used by config files and the ablation interface.
EXTERNAL_KEYS: dict[str, str] = {
    "T": "total_steps",
    "T_s": "fast_steps",
    "T_c": "control_steps",
    "r_s": "candidate_ratio",
    "q": "percentile",
    "delta": "delta",
    "alpha_l": "alpha_low",
    "alpha_h": "alpha_high",
    "beta_l": "beta_low",
    "beta_h": "beta_high",
    "gamma": "gamma",
    "conflict_threshold": "conflict_threshold",
    "parallelism": "parallelism",
}

_INT_FIELDS = {"total_steps", "fast_steps", "control_steps", "candidate_ratio", "parallelism"}


def config_from_external(values: dict[str, float], base: ControlConfig | None = None) -> ControlConfig:
    """Build a config from external-key overrides like {"T_c": 25}."""
    base = base if base is not None else ControlConfig()
    updates = {}
    for key, value in values.items():
        if key not in EXTERNAL_KEYS:
            raise ConfigError(
                f"unknown parameter {key!r}; valid: {', '.join(sorted(EXTERNAL_KEYS))}"
            )
        name = EXTERNAL_KEYS[key]
        updates[name] = int(value) if name in _INT_FIELDS else float(value)
    return replace(base, **updates).validate()


def config_to_external(config: ControlConfig) -> dict[str, float]:
    return {key: getattr(config, name) for key, name in EXTERNAL_KEYS.items()}


@dataclass(frozen=True)
class RawConceptMask:
    """Segmenter output for one concept, logits at image resolution."""

    concept_index: int
    logits: Grid2D


@dataclass(frozen=True)
class ValidatedMask:
    """A rectified mask: discarded (probabilities None) or active."""

    concept_index: int
    probabilities: Optional[Grid2D]

    @property
    def active(self) -> bool:
        return self.probabilities is not None


def validate_mask(
    raw: RawConceptMask, alpha_low: float, alpha_high: float, q: float
) -> ValidatedMask:
    """Discard masks that are both low-confidence and spatially dispersed.

    The dispersion threshold is the q-th percentile of the logits; a mask
    is unreliable only when max(logits) < alpha_low AND the spread of
    above-threshold cells exceeds alpha_high. Discarded concepts are left
    untouched downstream.
    """
    logits = raw.logits
    rho = percentile(logits, q)
    _, _, spread = coord_dispersion(logits, rho)
    if float(logits.values.max()) < alpha_low and spread > alpha_high:
        return ValidatedMask(concept_index=raw.concept_index, probabilities=None)
    return ValidatedMask(concept_index=raw.concept_index, probabilities=sigmoid(logits))


def eliminate_conflicts(
    masks: Sequence[ValidatedMask], conflict_threshold: float
) -> list[ValidatedMask]:
    """Winner-takes-all on pixels claimed by two or more active masks.

    A pixel is conflicted when at least two active masks exceed the
    threshold there; every active mask that does not hold the maximum
    (ties to the lowest concept index) is zeroed at that pixel. Values
    never increase and unconflicted pixels are untouched.
    """
    active = [m for m in masks if m.active]
    if len(active) < 2:
        return list(masks)
    stacked = np.stack([m.probabilities.values for m in active])
    above = stacked > conflict_threshold
    conflict = above.sum(axis=0) >= 2
    if not conflict.any():
        return list(masks)
    winner = stacked.argmax(axis=0)  # argmax ties break to the lowest index
    resolved = {}
    for i, mask in enumerate(active):
        values = stacked[i].copy()
        values[conflict & (winner != i)] = 0.0
        resolved[mask.concept_index] = ValidatedMask(
            concept_index=mask.concept_index,
            probabilities=Grid2D(values, ROLE_PROBABILITY),
        )
    return [resolved.get(m.concept_index, m) for m in masks]


def augment_mask(probabilities: Grid2D, beta_low: float, beta_high: float, gamma: float) -> Grid2D:
    """Amplify confident cells, suppress weak ones, leave the middle band alone.

    Cells >= beta_high are multiplied by gamma, cells <= beta_low divided
    by it. No clamping: the result is a gain field, not a probability.
    """
    v = probabilities.values
    out = v.copy()
    out[v >= beta_high] = v[v >= beta_high] * gamma
    out[v <= beta_low] = v[v <= beta_low] / gamma
    return Grid2D(out, ROLE_LOGIT)


def _resampled(mask: Grid2D, h: int, w: int) -> np.ndarray:
    return bilinear_resample(mask.values, h, w)


def apply_concept_mask(stack: AttentionStack, span: tuple[int, int], gain: Grid2D) -> AttentionStack:
    """Multiply the token maps of ``span`` by the gain field, resampled to fit."""
    a, b = span
    p = stack.n_tokens
    if not 1 <= a <= b <= p:
        raise ValueError(f"span {span} out of range for {p} tokens")
    h, w = stack.maps.shape[1:]
    factor = _resampled(gain, h, w)
    maps = stack.maps.copy()
    maps[a : b + 1] = (maps[a : b + 1] * factor).astype(np.float32)
    return AttentionStack(layer=stack.layer, timestep=stack.timestep, maps=maps)


def apply_exclusive_masks(
    stack: AttentionStack,
    concept_masks: Sequence[tuple[tuple[int, int], ValidatedMask]],
) -> AttentionStack:
    """Damp cross-talk with inverted masks.

    Each active concept's span is multiplied by the product of (1 - mask)
    over the *other* active concepts; tokens belonging to no span are
    multiplied by the product over all active concepts. SOT and EOT are
    never modified, and discarded masks contribute a factor of one.
    """
    p = stack.n_tokens
    claimed = set()
    for (a, b), _ in concept_masks:
        if not 1 <= a <= b <= p:
            raise ValueError(f"span {(a, b)} out of range for {p} tokens")
        positions = set(range(a, b + 1))
        if positions & claimed:
            raise ValueError("concept spans overlap")
        claimed |= positions
    h, w = stack.maps.shape[1:]
    inverted = [
        (span, 1.0 - _resampled(mask.probabilities, h, w))
        for span, mask in concept_masks
        if mask.active
    ]
    maps = stack.maps.copy()
    for span, _ in ((s, m) for s, m in concept_masks if m.active):
        factor = np.ones((h, w), dtype=np.float64)
        for other_span, inv in inverted:
            if other_span != span:
                factor *= inv
        a, b = span
        maps[a : b + 1] = (maps[a : b + 1] * factor).astype(np.float32)
    if inverted:
        outside = np.ones((h, w), dtype=np.float64)
        for _, inv in inverted:
            outside *= inv
        for q in range(1, p + 1):
            if q not in claimed:
                maps[q] = (maps[q] * outside).astype(np.float32)
    return AttentionStack(layer=stack.layer, timestep=stack.timestep, maps=maps)


def control_active(timestep: int, config: ControlConfig) -> bool:
    """Control runs during the first ``control_steps`` steps of denoising."""
    return timestep > config.total_steps - config.control_steps


def segment_intermediate(
    z: LatentState, concepts: Sequence[Concept], backend: Backend
) -> list[RawConceptMask]:
    """Decode the latent and query the segmenter once per concept."""
    if not concepts:
        return []
    try:
        image = backend.decode(z)
        return [
            RawConceptMask(concept_index=r, logits=backend.segment(image, concept.text))
            for r, concept in enumerate(concepts)
        ]
    except Exception as exc:
        raise type(exc)(f"at timestep {z.timestep}: {exc}") from exc


@dataclass
class ControlEvent:
    """One control-active timestep: per-concept mask states and conflict size."""

    timestep: int
    mask_states: tuple[str, ...]
    conflict_pixels: int


@dataclass
class PreparedMasks:
    validated: list[ValidatedMask]
    gains: dict[int, Grid2D]  # concept index -> augmented gain field
    event: ControlEvent


class MaskController:
    """Owns mask preparation and attention modulation for one denoising run.

    Masks are computed once per timestep from the decoded intermediate
    image and shared across all attention layers at that timestep.
    """

    def __init__(
        self,
        backend: Backend,
        concepts: Sequence[Concept],
        config: ControlConfig,
        dump_dir: Path | None = None,
    ) -> None:
        self.backend = backend
        self.concepts = list(concepts)
        self.config = config.validate()
        self.dump_dir = dump_dir
        self.events: list[ControlEvent] = []
        layers = backend.describe().control_layers
        self._control_layers = set(layers)

    def prepare(self, z: LatentState) -> PreparedMasks:
        cfg = self.config
        raws = segment_intermediate(z, self.concepts, self.backend)
        validated = [
            validate_mask(raw, cfg.alpha_low, cfg.alpha_high, cfg.percentile) for raw in raws
        ]
        resolved = eliminate_conflicts(validated, cfg.conflict_threshold)
        conflict_pixels = 0
        if sum(m.active for m in validated) >= 2:
            stacked = np.stack([m.probabilities.values for m in validated if m.active])
            conflict_pixels = int(
                ((stacked > cfg.conflict_threshold).sum(axis=0) >= 2).sum()
            )
        gains = {
            m.concept_index: augment_mask(m.probabilities, cfg.beta_low, cfg.beta_high, cfg.gamma)
            for m in resolved
            if m.active
        }
        event = ControlEvent(
            timestep=z.timestep,
            mask_states=tuple("active" if m.active else "discarded" for m in resolved),
            conflict_pixels=conflict_pixels,
        )
        if self.dump_dir is not None:
            mask_dir = self.dump_dir / f"t{z.timestep:03d}"
            mask_dir.mkdir(parents=True, exist_ok=True)
            for m in resolved:
                if m.active:
                    write_pgrd(m.probabilities, mask_dir / f"mask{m.concept_index}_validated.pgrd")
                    write_pgrd(gains[m.concept_index], mask_dir / f"mask{m.concept_index}_augmented.pgrd")
        return PreparedMasks(validated=resolved, gains=gains, event=event)

    def apply(self, stack: AttentionStack, prepared: PreparedMasks) -> AttentionStack:
        if stack.layer not in self._control_layers:
            return stack
        out = stack
        for r, concept in enumerate(self.concepts):
            if r in prepared.gains:
                out = apply_concept_mask(out, concept.span, prepared.gains[r])
        concept_masks = [
            (concept.span, prepared.validated[r]) for r, concept in enumerate(self.concepts)
        ]
        return apply_exclusive_masks(out, concept_masks)

    def step_hook(self, z: LatentState) -> Optional[AttentionHook]:
        """Hook for the step consuming latent ``z``, or None outside the window."""
        if not self.concepts or not control_active(z.timestep, self.config):
            return None
        prepared = self.prepare(z)
        self.events.append(prepared.event)
        return lambda stack: self.apply(stack, prepared)


def control_step(
    stack: AttentionStack,
    z: LatentState,
    concepts: Sequence[Concept],
    config: ControlConfig,
    backend: Backend,
) -> AttentionStack:
    """One-shot mask control of a single stack (identity outside the window)."""
    controller = MaskController(backend, concepts, config)
    hook = controller.step_hook(z)
    return stack if hook is None else hook(stack)
