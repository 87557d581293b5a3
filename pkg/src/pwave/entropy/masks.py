import numpy as np
import torch

PHASES = 4
# (row parity, column parity) coded in each phase
PHASE_PARITY = ((0, 0), (0, 1), (1, 0), (1, 1))


def step_mask(phase: int, height: int, width: int) -> np.ndarray:
    """Boolean grid of positions coded in ``phase``."""
    if phase not in range(PHASES):
        raise ValueError(f"phase must be in 0..3, got {phase}")
    pr, pc = PHASE_PARITY[phase]
    rows = (np.arange(height) % 2 == pr)[:, None]
    cols = (np.arange(width) % 2 == pc)[None, :]
    return rows & cols


def coded_before(phase: int, height: int, width: int) -> np.ndarray:
    """Positions already decoded when ``phase`` starts."""
    m = np.zeros((height, width), dtype=bool)
    for k in range(phase):
        m |= step_mask(k, height, width)
    return m


def phase_index(height: int, width: int) -> np.ndarray:
    """Phase number of every position."""
    r = np.arange(height)[:, None] % 2
    c = np.arange(width)[None, :] % 2
    return 2 * r + c


def torch_mask(mask: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(mask).to(dtype=like.dtype, device=like.device)
