from typing import List

import torch
from torch import nn

from core.exceptions import DegenerateBatchError, RoutingError, ShapeError


class SeparateBatchNorm2d(nn.Module):
    """
    Batch normalization layer holding several independent branches. Each branch owns its
    affine parameters (gamma, beta) and running statistics (mean, variance); the branch is
    chosen explicitly on every forward call and only that branch is read or updated.

    The output is gamma_b * (x - mu) / sqrt(sigma^2 + eps) + beta_b, with the biased batch
    statistics of x in train mode and branch b's running statistics in eval mode.
    """

    def __init__(
        self, num_features: int, num_branches: int, eps: float = 1e-5, momentum: float = 0.1
    ) -> None:
        """
        Constructor

        Args:
            num_features (int): number of channels C
            num_branches (int): number of routing keys served by the layer
            eps (float): stabilizer added to the variance
            momentum (float): weight of the current batch in the running-statistic EMA
        """
        super().__init__()
        if num_branches < 1:
            raise ValueError("A separate BN layer needs at least one branch")
        self.num_features: int = num_features
        self.num_branches: int = num_branches
        self.eps: float = eps
        self.momentum: float = momentum

        # one Parameter per branch; off-route branches never receive a gradient
        self.weight = nn.ParameterList(
            [nn.Parameter(torch.ones(num_features)) for _ in range(num_branches)]
        )
        self.bias = nn.ParameterList(
            [nn.Parameter(torch.zeros(num_features)) for _ in range(num_branches)]
        )
        self.register_buffer("running_mean", torch.zeros(num_branches, num_features))
        self.register_buffer("running_var", torch.ones(num_branches, num_features))

    def forward(self, x: torch.Tensor, branch: int) -> torch.Tensor:
        branch = self._check_branch(branch)
        if x.dim() != 4 or x.size(1) != self.num_features:
            raise ShapeError(
                f"Expected [batch, {self.num_features}, h, w] input, got {list(x.shape)}"
            )

        if self.training:
            if x.size(0) < 2:
                raise DegenerateBatchError("Train-mode batch normalization needs a batch of at least 2")
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            n = x.numel() / x.size(1)
            with torch.no_grad():
                self.running_mean[branch].mul_(1 - self.momentum).add_(self.momentum * mean)
                # running variance tracks the unbiased estimate
                self.running_var[branch].mul_(1 - self.momentum).add_(
                    self.momentum * var * n / max(n - 1, 1)
                )
        else:
            mean = self.running_mean[branch]
            var = self.running_var[branch]

        x_hat = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)
        return self.weight[branch][None, :, None, None] * x_hat + self.bias[branch][None, :, None, None]

    def branch_parameters(self, branch: int) -> List[nn.Parameter]:
        branch = self._check_branch(branch)
        return [self.weight[branch], self.bias[branch]]

    def _check_branch(self, branch: int) -> int:
        if not isinstance(branch, int) or isinstance(branch, bool) or not 0 <= branch < self.num_branches:
            raise RoutingError(f"Unknown BN branch {branch!r} (layer has {self.num_branches} branches)")
        return int(branch)

    def extra_repr(self) -> str:
        return (
            f"{self.num_features}, branches={self.num_branches}, eps={self.eps}, "
            f"momentum={self.momentum}"
        )
