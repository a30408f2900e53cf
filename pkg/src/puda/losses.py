"""Training objectives for the two-step PU domain adaptation pipeline.

Every loss is a plain function of torch tensors returning a scalar tensor,
differentiable wherever its inputs are. Probabilities are clamped to
[eps, 1 - eps] before any log so all losses stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

BASE_LOSSES = ("logistic", "sigmoid")


class LossError(ValueError):
    """Raised on invalid loss inputs (empty batches, bad prior, ...)."""


@dataclass
class LossConfig:
    """Hyperparameters of the step-1 objective.

    alpha weights the source cross-entropy, beta the alignment sum, delta is
    the per-step feature-norm enlargement target, pi the target class prior.
    """

    pi: float
    alpha: float = 1.0
    beta: float = 0.1
    delta: float = 1.0
    base_loss: str = "logistic"
    eps: float = 1e-7
    nnpu_gradient_ascent: bool = False

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise LossError(f"class prior must lie strictly in (0, 1), got {self.pi}")
        if self.alpha < 0 or self.beta < 0 or self.delta < 0:
            raise LossError("alpha, beta and delta must be nonnegative")
        if not 0.0 < self.eps <= 1e-6:
            raise LossError(f"eps must lie in (0, 1e-6], got {self.eps}")
        if self.base_loss not in BASE_LOSSES:
            raise LossError(f"unknown base loss {self.base_loss!r}, expected one of {BASE_LOSSES}")


def _clamp(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def source_ce_loss(p: torch.Tensor, y: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross entropy -[y log p + (1-y) log(1-p)] on a labeled batch."""
    if p.numel() == 0:
        raise LossError("source_ce_loss: empty batch")
    p = _clamp(p, eps)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def kl_prior_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL of the diagonal-Gaussian embedding against N(0, I).

    Per-example 0.5 * sum_j (exp(logvar_j) + mu_j^2 - 1 - logvar_j),
    averaged over the batch. Nonnegative by construction.
    """
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise LossError("kl_prior_loss: non-finite inputs")
    per_example = 0.5 * (logvar.exp() + mu.pow(2) - 1.0 - logvar).sum(dim=-1)
    return per_example.mean()


def target_reconstruction_loss(decoded_embeddings: torch.Tensor,
                               decoded_prior: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between decoded target embeddings and decoded prior draws.

    Each target example is paired index-wise with one fresh prior sample;
    the per-example L1 sums over all feature coordinates.
    """
    if decoded_embeddings.shape != decoded_prior.shape:
        raise LossError(
            f"target_reconstruction_loss: shape mismatch "
            f"{tuple(decoded_embeddings.shape)} vs {tuple(decoded_prior.shape)}")
    n = decoded_embeddings.shape[0]
    diff = (decoded_embeddings - decoded_prior).reshape(n, -1)
    return diff.abs().sum(dim=1).mean()


def safn_loss(h_prev: torch.Tensor, h_curr: torch.Tensor, delta: float) -> torch.Tensor:
    """Stepwise feature-norm enlargement penalty.

    Root mean square over the batch of (h_prev + delta - h_curr); h_prev comes
    from a frozen parameter snapshot and is detached here so no gradient ever
    reaches the previous parameters.
    """
    if h_prev.shape != h_curr.shape:
        raise LossError("safn_loss: mismatched batches")
    dev = h_prev.detach() + delta - h_curr
    return torch.sqrt(dev.pow(2).mean())


def _pointwise_loss(p: torch.Tensor, target: int, kind: str, eps: float) -> torch.Tensor:
    """Base loss l(x, target) evaluated on positive-class probabilities.

    logistic: l(x,1) = -log p, l(x,0) = -log(1-p).
    sigmoid:  l(x,1) = 1 - p,  l(x,0) = p  (the classic sigmoid loss expressed
    on the softmax probability; p = sigmoid of the logit margin).
    """
    p = _clamp(p, eps)
    if kind == "logistic":
        return -torch.log(p) if target == 1 else -torch.log(1.0 - p)
    if kind == "sigmoid":
        return 1.0 - p if target == 1 else p
    raise LossError(f"unknown base loss {kind!r}")


def nnpu_loss(p_pos: torch.Tensor, p_unl: torch.Tensor, pi: float,
              base_loss: str = "logistic", eps: float = 1e-7,
              gradient_ascent: bool = False, gamma: float = 1.0) -> torch.Tensor:
    """Non-negative PU risk on positive-labeled and unlabeled probability batches.

    pi * mean l(pos, 1) + max(0, mean l(unl, 0) - pi * mean l(pos, 0)).
    With the default policy the clamped bracket contributes neither value nor
    gradient. With gradient_ascent=True the returned value is unchanged when
    the bracket is negative, but its gradient becomes -gamma * grad(bracket),
    pushing the estimate back toward nonnegative territory.
    """
    if p_pos.numel() == 0:
        raise LossError("nnpu_loss: empty positive batch")
    if p_unl.numel() == 0:
        raise LossError("nnpu_loss: empty unlabeled batch")
    if not 0.0 < pi < 1.0:
        raise LossError(f"nnpu_loss: class prior must lie strictly in (0, 1), got {pi}")
    positive_risk = pi * _pointwise_loss(p_pos, 1, base_loss, eps).mean()
    bracket = (_pointwise_loss(p_unl, 0, base_loss, eps).mean()
               - pi * _pointwise_loss(p_pos, 0, base_loss, eps).mean())
    if bracket.detach() < 0 and gradient_ascent:
        # value = positive_risk, gradient = grad(positive_risk) - gamma * grad(bracket)
        return positive_risk - gamma * bracket + (gamma * bracket).detach()
    return positive_risk + torch.clamp(bracket, min=0.0)


def alignment_loss(l_source: torch.Tensor, l_target: torch.Tensor,
                   l_safn: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the three distribution-alignment components."""
    return l_source + l_target + l_safn


def total_step1_loss(l_pu: torch.Tensor, l_cls: torch.Tensor, l_align: torch.Tensor,
                     alpha: float, beta: float) -> torch.Tensor:
    """Step-1 objective: l_pu + alpha * l_cls + beta * l_align."""
    return l_pu + alpha * l_cls + beta * l_align


def pseudo_label_ce_loss(p: torch.Tensor, y_pseudo: torch.Tensor,
                         eps: float = 1e-7, hard: bool = False) -> torch.Tensor:
    """Cross entropy of the step-2 classifier against stored mean confidences.

    Soft mode (default) uses the mean harvested probability as target; hard
    mode thresholds it at 0.5 first, reducing to plain binary cross entropy.
    """
    if p.numel() == 0:
        raise LossError("pseudo_label_ce_loss: empty pseudo-labeled batch")
    y = y_pseudo.to(p.dtype)
    if hard:
        y = (y > 0.5).to(p.dtype)
    return source_ce_loss(p, y, eps=eps)
