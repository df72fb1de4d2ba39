"""Adam on named tensor groups with externally supplied gradients.

Written in-house rather than wrapping ``torch.optim`` because training needs
row surgery on optimizer state: pruning Gaussians slices moment buffers,
and reseeding dead codebook entries resets theirs.
"""

from __future__ import annotations

import torch


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite."""

    def __init__(self, step: int, losses: dict):
        super().__init__(f"non-finite loss at step {step}: {losses}")
        self.step = step
        self.losses = losses


class Adam:
    def __init__(self, params: dict[str, torch.Tensor], lrs: dict[str, float] | float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        if not isinstance(lrs, dict):
            lrs = {name: float(lrs) for name in params}
        missing = set(params) - set(lrs)
        if missing:
            raise ValueError(f"no learning rate for parameter groups {sorted(missing)}")
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for name, g in grads.items():
            if g is None:
                continue
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lrs[name])

    @torch.no_grad()
    def select_rows(self, keep: torch.Tensor, names: list[str]) -> None:
        """Keep only the given rows of the listed parameters and their moments."""
        for name in names:
            self.params[name] = self.params[name][keep]
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    @torch.no_grad()
    def reset_rows(self, name: str, rows: torch.Tensor) -> None:
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0
