"""Prompt-aware noise ranking and referring-mask attention control.

Two-stage inference control for text-to-image diffusion: rank candidate
initial noises by how well fast-sampled previews match the prompt, then
steer cross-attention during early denoising with pixel-level referring
masks. Ships with a deterministic toy backend so every kernel is testable
without pretrained models, plus a wire protocol for driving real ones.
"""

from .grid import Grid2D, GridError
from .prompt import Concept, PromptError, TokenizedPrompt, extract_concepts, tokenize
from .backend import Backend, BackendDescriptor, BackendError, LatentState, ToyBackend
from .maskctl import ControlConfig, ConfigError

__all__ = [
    "Backend",
    "BackendDescriptor",
    "BackendError",
    "Concept",
    "ConfigError",
    "ControlConfig",
    "Grid2D",
    "GridError",
    "LatentState",
    "PromptError",
    "TokenizedPrompt",
    "ToyBackend",
    "extract_concepts",
    "tokenize",
]

__version__ = "0.1.0"
