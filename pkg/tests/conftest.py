import numpy as np
import pytest
import torch

from qualia.synth import write_clip


def grad_check(params, loss_fn, eps=1e-6, rtol=1e-4):
    """Central-difference check of autograd gradients, elementwise.

    Modules must be in double precision. Tolerance is relative with a
    tiny absolute floor for genuinely zero entries.
    """
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    checked = 0
    for param, grad in zip(params, grads):
        flat = param.detach().reshape(-1)
        grad_flat = grad.detach().reshape(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            ad = grad_flat[idx].item()
            tol = rtol * max(abs(fd), abs(ad)) + 1e-8
            assert abs(ad - fd) <= tol, (
                f"gradient mismatch at element {idx}: autograd={ad!r} fd={fd!r}")
            checked += 1
    return checked


@pytest.fixture
def frame_dir_factory(tmp_path):
    """Write a [T, H, W, 3] float array as a numbered-PNG clip directory."""

    counter = {"n": 0}

    def make(frames: np.ndarray, name: str | None = None):
        counter["n"] += 1
        directory = tmp_path / (name or f"clip_{counter['n']:02d}")
        write_clip(np.asarray(frames, dtype=np.float32), directory)
        return directory

    return make


def gradient_clip(t: int, h: int, w: int, seed: int = 0) -> np.ndarray:
    """Deterministic non-constant frames for decode/fragment tests."""
    rng = np.random.Generator(np.random.PCG64(seed))
    base = rng.uniform(0.2, 0.8, size=(h, w, 3)).astype(np.float32)
    clip = np.empty((t, h, w, 3), dtype=np.float32)
    for i in range(t):
        clip[i] = np.clip(base + 0.01 * i, 0.0, 1.0)
    return clip
