"""AdamW with decoupled weight decay and non-finite gradient skipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

log = logging.getLogger(__name__)


@dataclass
class AdamWHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
               state: OptimizerState, hp: AdamWHyper) -> list[str]:
    """Update ``params`` in place.  Returns the names skipped for non-finite gradients."""
    skipped = []
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)} for {name}")
            if not torch.isfinite(g).all():
                skipped.append(name)
                continue
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
                state.steps[name] = 0
            v = state.exp_avg_sq[name]
            t = state.steps[name] = state.steps[name] + 1
            m.mul_(hp.beta1).add_(g, alpha=1 - hp.beta1)
            v.mul_(hp.beta2).addcmul_(g, g, value=1 - hp.beta2)
            m_hat = m / (1 - hp.beta1 ** t)
            v_hat = v / (1 - hp.beta2 ** t)
            if hp.weight_decay:
                p.mul_(1 - hp.lr * hp.weight_decay)
            p.sub_(hp.lr * m_hat / (v_hat.sqrt() + hp.eps))
    if skipped:
        log.warning("skipped update for %d parameter(s) with non-finite gradients: %s",
                    len(skipped), ", ".join(skipped[:5]))
    return skipped


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a module's named parameters."""

    def __init__(self, named_params, hp: AdamWHyper | None = None):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.hp = hp or AdamWHyper()
        self.state = OptimizerState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> list[str]:
        grads = {n: p.grad for n, p in self.params.items()}
        return adamw_step(self.params, grads, self.state, self.hp)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n in self.state.exp_avg:
            out[f"adamw.m.{n}"] = self.state.exp_avg[n]
            out[f"adamw.v.{n}"] = self.state.exp_avg_sq[n]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], steps: dict[str, int]):
        self.state = OptimizerState()
        for n, p in self.params.items():
            if f"adamw.m.{n}" in tensors:
                self.state.exp_avg[n] = tensors[f"adamw.m.{n}"].to(p.dtype).clone()
                self.state.exp_avg_sq[n] = tensors[f"adamw.v.{n}"].to(p.dtype).clone()
                self.state.steps[n] = int(steps[n])
