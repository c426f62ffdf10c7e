"""Training step, optimiser and finite-difference gradient check.

Reverse-mode gradients come from PyTorch autograd; the only hand-written
backward pass is the kernel phase (``layers.KernelPhase``).
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..errors import TrainingError
from ..objectives import upit_si_snr_loss

LEARNING_RATE = 1e-3
CLIP_NORM = 5.0


def set_determinism(seed: int) -> None:
    """Seed torch and pin it to one deterministic thread."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def make_optimizer(model: nn.Module, lr: float = LEARNING_RATE) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))


def first_non_finite(model: nn.Module, run) -> str | None:
    """Name of the first module whose output is non-finite while ``run()`` executes."""
    found = []

    def hook(module, _inp, out, name=None):
        outs = out if isinstance(out, (tuple, list)) else (out,)
        if not found and any(torch.is_tensor(o) and not torch.all(torch.isfinite(o)) for o in outs):
            found.append(name)

    handles = [m.register_forward_hook(lambda mod, i, o, n=n: hook(mod, i, o, n)) for n, m in model.named_modules() if n]
    try:
        with torch.no_grad():
            try:
                run()
            except TrainingError:
                pass
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else None


def default_loss(model, mix, refs):
    return upit_si_snr_loss(model(mix), refs)[0]


def train_step(model, optimizer, mix, refs, loss_fn=default_loss, clip: float = CLIP_NORM) -> float:
    """One forward/backward/update; returns the loss.

    Raises ``TrainingError`` naming the first tensor that went non-finite
    (a module output or a parameter gradient); parameters are untouched
    in that case.
    """
    model.train()
    for name, p in model.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise TrainingError(f"parameter {name} is non-finite", culprit=name)
    try:
        loss = loss_fn(model, mix, refs)
    except TrainingError as exc:
        culprit = first_non_finite(model, lambda: loss_fn(model, mix, refs))
        raise TrainingError(f"{exc}; first non-finite output: {culprit}", culprit=culprit or exc.culprit) from exc
    if not torch.isfinite(loss):
        culprit = first_non_finite(model, lambda: loss_fn(model, mix, refs)) or "loss"
        raise TrainingError(f"non-finite loss; first non-finite output: {culprit}", culprit=culprit)
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            optimizer.zero_grad()
            raise TrainingError(f"non-finite gradient for {name}", culprit=name)
    if clip:
        nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()
    return float(loss.detach())


def grad_check(model: nn.Module, loss_fn, epsilon: float = 1e-6, num_probes: int = 40, seed: int = 0,
               params=None) -> float:
    """Max relative error of autograd gradients against central differences.

    ``loss_fn(model)`` returns a scalar tensor; it is evaluated in the
    model's current mode (use float64 and ``eval()`` or a fixed batch).
    Probes are drawn uniformly over all entries of ``params`` (default: every
    parameter that requires grad).  Entries whose gradients are both below
    ``1e-9`` in magnitude count as exact.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if params is not None:
        named = [(n, p) for n, p in named if n in set(params)]
    model.zero_grad(set_to_none=True)
    loss_fn(model).backward()
    grads = {n: p.grad.detach().clone() for n, p in named}
    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_probes):
        k = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, p = named[k]
        idx = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + epsilon
            fp = float(loss_fn(model))
            flat[idx] = orig - epsilon
            fm = float(loss_fn(model))
            flat[idx] = orig
        numeric = (fp - fm) / (2 * epsilon)
        analytic = float(grads[name].view(-1)[idx])
        scale = max(abs(numeric), abs(analytic))
        if scale < 1e-9:
            continue
        err = abs(numeric - analytic) / scale
        if not math.isfinite(err):
            return float("inf")
        worst = max(worst, err)
    return worst
