"""Tensor arithmetic, reverse-mode autodiff, seeded RNG and AdamW."""

from . import ops
from .gradcheck import finite_diff_check
from .optim import AdamWState, adamw_step
from .rng import SeededRng, make_rng
from .tensor import (
    MemoryTracker,
    Tape,
    Tensor,
    active_tape,
    backward,
    current_tracker,
    no_tape,
    track_memory,
)

__all__ = [
    "AdamWState",
    "MemoryTracker",
    "SeededRng",
    "Tape",
    "Tensor",
    "active_tape",
    "adamw_step",
    "backward",
    "current_tracker",
    "finite_diff_check",
    "make_rng",
    "no_tape",
    "ops",
    "track_memory",
]
