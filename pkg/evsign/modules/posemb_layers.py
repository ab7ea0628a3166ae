import torch
from typing import Optional


def sinusoidal_pe(n: int, dim: int, positions: Optional[torch.Tensor] = None, dtype=None, device=None) -> torch.Tensor:
    """
    Fixed sine/cosine temporal encodings.

    ``PE[pos, 2i] = sin(pos / 10000^(2i/dim))`` and ``PE[pos, 2i+1] = cos(...)``.

    Args:
        n (int): Number of positions.
        dim (int): Encoding width, must be even.
        positions (torch.Tensor, optional): [n] real positions; defaults to 0..n-1. Fractional
            positions are used for pseudo-timestamps of fused tokens.

    Returns:
        torch.Tensor: [n, dim]
    """
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal encoding needs an even dim, got {dim}")
    dtype = dtype or torch.get_default_dtype()
    if positions is None:
        positions = torch.arange(n, dtype=torch.float64, device=device)
    positions = torch.as_tensor(positions, dtype=torch.float64, device=device).reshape(-1)
    assert positions.numel() == n, f"got {positions.numel()} positions for n={n}"
    freqs = 10000.0 ** (torch.arange(0, dim, 2, dtype=torch.float64, device=device) / dim)
    angles = positions.unsqueeze(1) / freqs.unsqueeze(0)
    pe = torch.zeros(n, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe.to(dtype)


def visual_pseudo_timestamps(n: int, dtype=torch.float64) -> torch.Tensor:
    """Visual token j sits at time j."""
    return torch.arange(n, dtype=dtype)


def fused_pseudo_timestamps(n: int, gamma: int, dtype=torch.float64) -> torch.Tensor:
    """Fused token i sits at the mean of its gamma source indices, i*gamma + (gamma-1)/2."""
    return torch.arange(n, dtype=dtype) * gamma + (gamma - 1) / 2.0
