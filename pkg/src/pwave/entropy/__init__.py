from .context import SYMBOL_SCALE, ARFusionNet, FourStepFusionNet, LongContext, VisibilityError
from .laplace import ALPHABET, SIGMA_FLOOR, laplace_pmf, laplace_pmf_np, laplace_pmf_torch, log_pmf_torch, rate_bits_torch, sigma_from_raw
from .masks import PHASES, coded_before, phase_index, step_mask
