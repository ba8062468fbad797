"""Square-cosine DDPM noise schedule and the forward/reverse transitions.

Tables are indexed by diffusion step k in 1..K with the boundary value
alpha_bar[0] = 1.  betas come from the squared-cosine cumulative curve
f(k) = cos^2(((k/K + s) / (1 + s)) * pi/2), s = 0.008, via
beta_k = 1 - f(k)/f(k-1), clipped at 0.999; alpha_bar is then rebuilt as the
running product of (1 - beta) so both tables are exactly consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DEFAULT_K = 50
COSINE_S = 0.008
BETA_MAX = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    betas: torch.Tensor          # (K+1,), betas[0] unused
    alphas: torch.Tensor         # 1 - betas
    alpha_bar: torch.Tensor      # (K+1,), alpha_bar[0] = 1
    posterior_var: torch.Tensor  # (K+1,), beta~_k; posterior_var[1] = 0


def make_square_cosine(K: int = DEFAULT_K, s: float = COSINE_S) -> NoiseSchedule:
    if K < 1:
        raise ScheduleError(f"need at least one diffusion step, got K={K}")
    k = torch.arange(K + 1, dtype=torch.float64)
    f = torch.cos(((k / K + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
    betas = torch.zeros(K + 1, dtype=torch.float64)
    betas[1:] = torch.clip(1.0 - f[1:] / f[:-1], 0.0, BETA_MAX)
    alphas = 1.0 - betas
    alpha_bar = torch.ones(K + 1, dtype=torch.float64)
    alpha_bar[1:] = torch.cumprod(alphas[1:], dim=0)
    posterior_var = torch.zeros(K + 1, dtype=torch.float64)
    if K > 1:
        posterior_var[2:] = (1.0 - alpha_bar[1:-1]) / (1.0 - alpha_bar[2:]) * betas[2:]
    return NoiseSchedule(K=K, betas=betas, alphas=alphas,
                         alpha_bar=alpha_bar, posterior_var=posterior_var)


def _check_k(schedule: NoiseSchedule, k: int) -> None:
    if not (1 <= k <= schedule.K):
        raise ScheduleError(f"diffusion step k={k} outside 1..{schedule.K}")


def forward_noise(schedule: NoiseSchedule, x0: torch.Tensor, k, eps: torch.Tensor) -> torch.Tensor:
    """Noised sample x^k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.

    `k` may be an int or a (batch,) long tensor for per-sample steps.
    """
    if torch.is_tensor(k):
        if (k < 1).any() or (k > schedule.K).any():
            raise ScheduleError("diffusion step outside 1..K")
        ab = schedule.alpha_bar.to(x0.dtype)[k]
        shape = (-1,) + (1,) * (x0.dim() - 1)
        return ab.sqrt().view(shape) * x0 + (1.0 - ab).sqrt().view(shape) * eps
    _check_k(schedule, int(k))
    ab = float(schedule.alpha_bar[int(k)])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def invert_to_x0(schedule: NoiseSchedule, xk: torch.Tensor, k: int, eps: torch.Tensor) -> torch.Tensor:
    """Exact inverse of forward_noise given the same eps."""
    _check_k(schedule, k)
    ab = float(schedule.alpha_bar[k])
    return (xk - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def reverse_step(
    schedule: NoiseSchedule, xk: torch.Tensor, k: int, eps_hat: torch.Tensor, noise: torch.Tensor
) -> torch.Tensor:
    """One DDPM posterior step:

        x^{k-1} = 1/sqrt(1 - beta_k) * (x^k - beta_k / sqrt(1 - abar_k) * eps_hat)
                  + sqrt(beta~_k) * noise

    with beta~_k the posterior variance; the k = 1 step is noiseless.
    """
    _check_k(schedule, k)
    beta = float(schedule.betas[k])
    ab = float(schedule.alpha_bar[k])
    alpha_coef = 1.0 / math.sqrt(1.0 - beta)
    gamma = beta / math.sqrt(1.0 - ab)
    sigma = 0.0 if k == 1 else math.sqrt(float(schedule.posterior_var[k]))
    return alpha_coef * (xk - gamma * eps_hat) + sigma * noise


def schedule_table(schedule: NoiseSchedule) -> list[dict]:
    """Rows for the CLI dump: k, beta, alpha_bar, posterior sigma."""
    rows = []
    for k in range(1, schedule.K + 1):
        rows.append({
            "k": k,
            "beta": float(schedule.betas[k]),
            "alpha_bar": float(schedule.alpha_bar[k]),
            "sigma": 0.0 if k == 1 else math.sqrt(float(schedule.posterior_var[k])),
        })
    return rows
