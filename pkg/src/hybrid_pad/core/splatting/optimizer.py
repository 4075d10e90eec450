"""Per-attribute Adam with bias correction, quaternion renormalization and state remapping."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import torch

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class _Moments:
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0


@dataclass
class AdamState:
    moments: Dict[str, _Moments] = field(default_factory=dict)
    skipped_steps: int = 0

    def remap(self, source_index: torch.Tensor) -> None:
        """Carry moments over after densify/prune; rows with source -1 start from zero."""
        fresh = source_index < 0
        safe = torch.where(fresh, torch.zeros_like(source_index), source_index)
        for m in self.moments.values():
            for attr in ("exp_avg", "exp_avg_sq"):
                old = getattr(m, attr)
                new = old[safe].clone()
                new[fresh] = 0.0
                setattr(m, attr, new)


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, Optional[torch.Tensor]],
    state: AdamState,
    lrs: Mapping[str, float],
) -> Dict[str, torch.Tensor]:
    """One Adam update per named tensor; returns the new tensors (inputs are not modified).

    A parameter whose gradient contains a non-finite value is left unchanged for this step.
    Tensors named "quats" are renormalized to unit rows after a step.
    """
    updated: Dict[str, torch.Tensor] = {}
    for name, param in params.items():
        grad = grads.get(name)
        value = param.detach()
        if grad is None:
            updated[name] = value.clone()
            continue
        grad = grad.detach()
        if not torch.isfinite(grad).all():
            state.skipped_steps += 1
            logger.warning(f"Skipping Adam step for '{name}': non-finite gradient ({state.skipped_steps} skipped)")
            updated[name] = value.clone()
            continue

        m = state.moments.get(name)
        if m is None or m.exp_avg.shape != value.shape:
            m = _Moments(torch.zeros_like(value), torch.zeros_like(value))
            state.moments[name] = m
        m.step += 1
        m.exp_avg = BETA1 * m.exp_avg + (1.0 - BETA1) * grad
        m.exp_avg_sq = BETA2 * m.exp_avg_sq + (1.0 - BETA2) * grad * grad
        m_hat = m.exp_avg / (1.0 - BETA1**m.step)
        v_hat = m.exp_avg_sq / (1.0 - BETA2**m.step)
        new = value - lrs[name] * m_hat / (torch.sqrt(v_hat) + EPS)
        if name == "quats":
            new = new / torch.linalg.norm(new, dim=-1, keepdim=True)
        updated[name] = new
    return updated
