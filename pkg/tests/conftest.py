import numpy as np
import pytest
import torch

from pwave.model import ModelConfig, PWaveModel


def small_config(**kw) -> ModelConfig:
    base = dict(context_width=8, long_context_width=4, lifting_width=4, lifting_blocks=1, post_width=4)
    base.update(kw)
    return ModelConfig(**base)


def small_model(**kw) -> PWaveModel:
    return PWaveModel(small_config(**kw))


def perturb_all(model: PWaveModel, scale: float = 0.05, seed: int = 0):
    """Give every parameter (including zero-initialised heads) random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def fd_check(f, params: list[torch.Tensor], h: float = 1e-6, seed: int = 0, tol: float = 1e-4,
             atol: float = 0.0):
    """Directional finite-difference check of autograd gradients of scalar ``f()``.

    For each tensor a random direction v is drawn; the analytic value
    <grad, v> is compared with the central difference (f(p+hv) - f(p-hv)) / 2h.
    A tensor passes when the relative error is below ``tol`` or the absolute
    error is below ``atol`` (the finite-difference noise floor for large losses).
    Returns the list of relative errors.
    """
    for p in params:
        p.grad = None
    out = f()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    errors = []
    for p, gr in zip(params, grads):
        v = torch.randn(p.shape, generator=g, dtype=p.dtype)
        analytic = 0.0 if gr is None else float((gr * v).sum())
        with torch.no_grad():
            p.add_(h * v)
            fp = float(f())
            p.sub_(2 * h * v)
            fm = float(f())
            p.add_(h * v)
        numeric = (fp - fm) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        diff = abs(analytic - numeric)
        errors.append(0.0 if diff <= atol else diff / scale)
    assert max(errors) < tol, errors
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def natural_planes():
    """Grayscale test images bundled with scikit-image, as uint8 arrays."""
    from skimage import color, data, util

    names = ["camera", "astronaut", "coins", "moon", "text", "page", "brick", "grass",
             "gravel", "chelsea", "coffee", "rocket", "clock", "horse"]
    out = []
    for n in names:
        im = getattr(data, n)()
        if im.ndim == 3:
            im = util.img_as_ubyte(color.rgb2gray(im[..., :3]))
        elif im.dtype != np.uint8:
            im = util.img_as_ubyte(im)
        out.append(np.ascontiguousarray(im))
    return out


def random_crops(planes, count: int, size: int, seed: int) -> np.ndarray:
    r = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        p = planes[r.integers(len(planes))]
        y = r.integers(0, p.shape[0] - size + 1)
        x = r.integers(0, p.shape[1] - size + 1)
        out.append(p[y:y + size, x:x + size] / 255.0)
    return np.stack(out)[:, None]


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str):
    ACCEPTANCE.append((criterion, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
