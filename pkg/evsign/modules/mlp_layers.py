import torch
import torch.nn as nn

from evsign import tensor_core as tc


class FeedForward(nn.Module):
    """Token-wise two-layer ReLU network, ``dim -> dim * mlp_ratio -> dim``."""

    def __init__(self, dim: int, mlp_ratio: int = 4, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        if mlp_ratio < 1:
            raise ValueError(f"mlp_ratio must be >= 1, got {mlp_ratio}")
        self.fc1 = nn.Linear(dim, dim * mlp_ratio, **factory_kwargs)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim, **factory_kwargs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(tc.relu(self.fc1(x)))
