import torch
import torch.nn as nn
import torch.nn.functional as F


class SiteNorm(nn.Module):
    def __init__(
        self,
        num_features: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        device=None,
        dtype=None,
    ):
        """
        Batch normalization restricted to the active sites of a sparse tensor.

        Statistics are taken per channel over every active row of the batch; the
        running estimates are used in eval mode, and in training mode when fewer
        than two sites are active.

        Args:
            num_features (int): Channel count.
            eps (float, optional): Added to the variance. Default is 1e-5.
            momentum (float, optional): Running-statistics update factor. Default is 0.1.
        """
        factory_kwargs = {"device": device, "dtype": dtype}
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features, **factory_kwargs))
        self.bias = nn.Parameter(torch.zeros(num_features, **factory_kwargs))
        self.register_buffer("running_mean", torch.zeros(num_features, **factory_kwargs))
        self.register_buffer("running_var", torch.ones(num_features, **factory_kwargs))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """
        Args:
            features (torch.Tensor): (n_active, num_features) site features.
        """
        if features.shape[0] == 0:
            return features
        use_batch = self.training and features.shape[0] > 1
        if use_batch:
            self.num_batches_tracked.add_(1)
        return F.batch_norm(
            features,
            self.running_mean,
            self.running_var,
            self.weight,
            self.bias,
            training=use_batch,
            momentum=self.momentum,
            eps=self.eps,
        )


def get_norm_layer(norm_layer):
    """
    Get the normalization layer.

    Args:
        norm_layer (str): The type of normalization layer.

    Returns:
        norm_layer (nn.Module): The normalization layer.
    """
    if norm_layer == "layer":
        return nn.LayerNorm
    elif norm_layer == "site":
        return SiteNorm
    else:
        raise NotImplementedError(f"Norm layer {norm_layer} is not implemented")
