"""Dynamic vector-based low-rank adapters for frozen projection weights.

An adapter adds a residual ``diag(V) @ B @ diag(U) @ A`` to one frozen weight
matrix. Training runs in two phases: during warm-up only the low-rank matrices
A and B receive gradients; afterwards they freeze and the diagonal vectors
U and V take over. The residual is exactly zero at construction, so a freshly
attached adapter never perturbs the frozen model.
"""

from __future__ import annotations

import enum

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError


class TrainPhase(enum.Enum):
    WARMUP = "warmup"
    VECTOR = "vector"


class DVLoRAAdapter(nn.Module):
    """Four trainable factors (A, B, U, V) attached to one frozen d x k weight.

    A: (rank, in_dim) Gaussian init, B: (out_dim, rank) zero init,
    U: (rank,) ones, V: (out_dim,) ones. B = 0 forces a zero residual at init.
    """

    def __init__(self, out_dim: int, in_dim: int, rank: int, seed: int = 0):
        super().__init__()
        if rank < 1 or rank > min(out_dim, in_dim):
            raise ConfigError(
                f"rank must satisfy 1 <= rank <= min(out_dim, in_dim); "
                f"got rank={rank} for a {out_dim}x{in_dim} weight"
            )
        gen = torch.Generator().manual_seed(seed)
        self.out_dim = out_dim
        self.in_dim = in_dim
        self.rank = rank
        self.A = nn.Parameter(torch.randn(rank, in_dim, generator=gen) / rank)
        self.B = nn.Parameter(torch.zeros(out_dim, rank))
        self.U = nn.Parameter(torch.ones(rank))
        self.V = nn.Parameter(torch.ones(out_dim))
        self._phase = TrainPhase.WARMUP
        self._apply_phase_flags()

    @property
    def phase(self) -> TrainPhase:
        return self._phase

    def _apply_phase_flags(self) -> None:
        warmup = self._phase is TrainPhase.WARMUP
        self.A.requires_grad_(warmup)
        self.B.requires_grad_(warmup)
        self.U.requires_grad_(not warmup)
        self.V.requires_grad_(not warmup)

    def set_phase(self, global_step: int, warmup_steps: int) -> TrainPhase:
        """Warm-up iff global_step < warmup_steps; flips trainability flags to match."""
        if global_step < 0 or warmup_steps < 0:
            raise ConfigError("global_step and warmup_steps must be non-negative")
        self._phase = TrainPhase.WARMUP if global_step < warmup_steps else TrainPhase.VECTOR
        self._apply_phase_flags()
        return self._phase

    def force_phase(self, phase: TrainPhase) -> None:
        """Directly restore a phase (checkpoint loading)."""
        self._phase = phase
        self._apply_phase_flags()

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        # diag(V) B diag(U) A x, evaluated as elementwise scalings
        return F.linear(F.linear(x, self.A) * self.U, self.B) * self.V

    def forward(self, x: torch.Tensor, base_weight: torch.Tensor) -> torch.Tensor:
        """Adapted projection: base_weight @ x + diag(V) B diag(U) A x.

        x may be a vector of length in_dim or any batch (..., in_dim).
        """
        if base_weight.shape != (self.out_dim, self.in_dim):
            raise DimensionError(
                f"base weight is {tuple(base_weight.shape)}, adapter expects "
                f"({self.out_dim}, {self.in_dim})"
            )
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"input has trailing dim {x.shape[-1]}, adapter expects {self.in_dim}"
            )
        return F.linear(x, base_weight) + self.residual(x)

    def merge(self, base_weight: torch.Tensor) -> torch.Tensor:
        """Fold the residual into the frozen weight: W + diag(V) B diag(U) A."""
        if base_weight.shape != (self.out_dim, self.in_dim):
            raise DimensionError(
                f"base weight is {tuple(base_weight.shape)}, adapter expects "
                f"({self.out_dim}, {self.in_dim})"
            )
        delta = (self.V.unsqueeze(1) * self.B) @ (self.U.unsqueeze(1) * self.A)
        return base_weight + delta

    def trainable_parameter_count(self) -> int:
        """Parameters receiving gradients in the current phase."""
        return sum(p.numel() for p in (self.A, self.B, self.U, self.V) if p.requires_grad)

    def extra_repr(self) -> str:
        return f"out_dim={self.out_dim}, in_dim={self.in_dim}, rank={self.rank}, phase={self._phase.value}"


def init_dvlora(base_out_dim: int, base_in_dim: int, rank: int, seed: int = 0) -> DVLoRAAdapter:
    return DVLoRAAdapter(base_out_dim, base_in_dim, rank, seed=seed)
