"""Return-conditioned action diffusion policy.

The denoiser is a small transformer over a fixed token sequence:

    [diffusion-step, rtg x T_o, observation x T_o, noisy-action x T_a]

Observation tokens concatenate conv/keypoint image features with a projected
gripper pose. The network predicts the noise added to a normalized action
chunk; sampling runs the full reverse chain and execution clips afterward,
never during diffusion.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import datagen, schedule as sched
from .nets import ConvEncoder, TokenTransformer, sinusoidal_embedding
from .sim import IMG_SIZE, MAX_DPITCH, MAX_DXZ

# Per-channel action limits (dx, dz, dpitch, grip); actions train in
# limit-normalized space so every channel is roughly unit scale.
ACTION_LIMITS = (MAX_DXZ, MAX_DXZ, MAX_DPITCH, 1.0)


def normalize_actions(actions: torch.Tensor) -> torch.Tensor:
    lim = torch.as_tensor(ACTION_LIMITS, dtype=actions.dtype, device=actions.device)
    return actions / lim


def denormalize_actions(actions: torch.Tensor) -> torch.Tensor:
    lim = torch.as_tensor(ACTION_LIMITS, dtype=actions.dtype, device=actions.device)
    return actions * lim


class ObsTokenizer(nn.Module):
    """Image conv features concatenated with a gripper-pose projection."""

    def __init__(self, width: int, pose_dim: int = 4, img_size: int = IMG_SIZE):
        super().__init__()
        img_feat = width // 2
        self.encoder = ConvEncoder(out_dim=img_feat, img_size=img_size)
        self.pose_proj = nn.Linear(pose_dim, width - img_feat)

    def forward(self, images: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        """(B, F, 3, H, W) images + (B, F, P) poses -> (B, F, width)."""
        b, f = images.shape[:2]
        feats = self.encoder(images.reshape(b * f, *images.shape[2:]))
        feats = feats.reshape(b, f, -1)
        return torch.cat([feats, self.pose_proj(poses)], dim=-1)


class ActionDenoiser(nn.Module):
    def __init__(self, obs_frames: int = 2, action_frames: int = 2,
                 action_dim: int = 4, width: int = 128, heads: int = 4,
                 layers: int = 4, img_size: int = IMG_SIZE, use_rtg: bool = True):
        super().__init__()
        self.obs_frames = obs_frames
        self.action_frames = action_frames
        self.action_dim = action_dim
        self.width = width
        self.heads = heads
        self.layers = layers
        self.img_size = img_size
        self.use_rtg = use_rtg

        self.obs_tokenizer = ObsTokenizer(width, img_size=img_size)
        if use_rtg:
            self.rtg_proj = nn.Linear(1, width)
        self.step_mlp = nn.Sequential(
            nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width)
        )
        self.action_in = nn.Linear(action_dim, width)
        n_tokens = 1 + (obs_frames if use_rtg else 0) + obs_frames + action_frames
        self.pos_embed = nn.Parameter(torch.randn(1, n_tokens, width) * 0.02)
        self.transformer = TokenTransformer(width=width, heads=heads, layers=layers)
        self.out_norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, action_dim)

    @property
    def token_count(self) -> int:
        return self.pos_embed.shape[1]

    def hyperparams(self) -> dict:
        return {
            "obs_frames": self.obs_frames,
            "action_frames": self.action_frames,
            "action_dim": self.action_dim,
            "width": self.width,
            "heads": self.heads,
            "layers": self.layers,
            "img_size": self.img_size,
            "use_rtg": self.use_rtg,
        }

    def condition_tokens(self, images: torch.Tensor, poses: torch.Tensor,
                         rtg: torch.Tensor | None, k: torch.Tensor) -> torch.Tensor:
        """Token sequence [step, rtg..., obs...]; (B, n_cond, width)."""
        dtype = self.out_proj.weight.dtype
        if images.shape[1] != self.obs_frames:
            raise ValueError(
                f"expected {self.obs_frames} observation frames, got {images.shape[1]}"
            )
        step = self.step_mlp(sinusoidal_embedding(k, self.width, dtype=dtype))
        parts = [step[:, None, :]]
        if self.use_rtg:
            if rtg is None:
                raise ValueError("model conditions on returns but rtg is None")
            parts.append(self.rtg_proj(rtg.to(dtype)[..., None]))
        parts.append(self.obs_tokenizer(images.to(dtype), poses.to(dtype)))
        return torch.cat(parts, dim=1)

    def forward(self, images: torch.Tensor, poses: torch.Tensor,
                rtg: torch.Tensor | None, noisy_actions: torch.Tensor,
                k: torch.Tensor, schedule: sched.NoiseSchedule) -> torch.Tensor:
        """Predict the noise inside a normalized action chunk.

        The clean-chunk estimate is sqrt(a_bar) * x_k plus a learned
        correction; the returned noise estimate comes from the exact
        forward-noising identity eps = (x_k - sqrt(a_bar) x0) / sqrt(1 - a_bar).
        The analytic term is the unconditional least-squares denoiser for
        unit-scale chunks, so at low k (where it is already near-optimal) the
        correction trains toward zero instead of relearning a copy of its
        input, and the optimizer budget goes to the observation-conditioned
        steps. Keeping the learned quantity in clean-chunk units also stops
        the reverse chain from amplifying prediction error at the
        near-pure-noise steps, where 1/sqrt(1 - beta_k) is large.
        """
        if noisy_actions.shape[1:] != (self.action_frames, self.action_dim):
            raise ValueError(
                f"action chunk shape {tuple(noisy_actions.shape[1:])} does not "
                f"match ({self.action_frames}, {self.action_dim})"
            )
        cond = self.condition_tokens(images, poses, rtg, k)
        noisy = noisy_actions.to(cond.dtype)
        act = self.action_in(noisy)
        tokens = torch.cat([cond, act], dim=1) + self.pos_embed
        out = self.transformer(tokens)
        tail = out[:, -self.action_frames:, :]
        ab = schedule.alpha_bar.to(cond.dtype)[k].reshape(-1, 1, 1)
        x0_hat = torch.sqrt(ab) * noisy + self.out_proj(self.out_norm(tail))
        return (noisy - torch.sqrt(ab) * x0_hat) / torch.sqrt(1.0 - ab)


def build_denoiser(seed: int, **hyper) -> ActionDenoiser:
    """Construct with a reproducible initialization."""
    torch.manual_seed(seed)
    return ActionDenoiser(**hyper)


# ---------------------------------------------------------------------------
# training windows


def build_window_index(episodes: list[datagen.Episode]) -> list[tuple[int, int]]:
    """One training window per (episode, timestep)."""
    return [(i, t) for i, ep in enumerate(episodes) for t in range(ep.T)]


def _episode_norms(episodes: list[datagen.Episode], manifest: dict) -> list[float]:
    return [
        datagen.bucket_rtg_norm(manifest, ep.scenario, ep.plan) for ep in episodes
    ]


def assemble_windows(
    episodes: list[datagen.Episode],
    manifest: dict,
    picks: list[tuple[int, int]],
    obs_frames: int = 2,
    action_frames: int = 2,
    dtype=torch.float32,
) -> dict[str, torch.Tensor]:
    """Gather padded observation/action windows for the given (ep, t) picks.

    The first window repeats the initial observation; action windows repeat
    the final action past the episode end. RTG values are normalized by the
    episode's bucket constant.
    """
    norms = _episode_norms(episodes, manifest)
    images, poses, rtgs, actions = [], [], [], []
    for ei, t in picks:
        ep = episodes[ei]
        obs_idx = [max(0, t - obs_frames + 1 + j) for j in range(obs_frames)]
        act_idx = [min(ep.T - 1, t + j) for j in range(action_frames)]
        images.append(ep.images[obs_idx])
        poses.append(ep.pose_vecs[obs_idx])
        rtgs.append(ep.rtg[obs_idx] / norms[ei])
        actions.append(ep.actions[act_idx])
    img = torch.as_tensor(
        np.stack(images), dtype=dtype
    ).permute(0, 1, 4, 2, 3) / 255.0
    acts = torch.as_tensor(np.stack(actions), dtype=dtype)
    return {
        "images": img.contiguous(),
        "poses": torch.as_tensor(np.stack(poses), dtype=dtype),
        "rtg": torch.as_tensor(np.stack(rtgs), dtype=dtype),
        "actions": normalize_actions(acts),
    }


# ---------------------------------------------------------------------------
# loss, training, sampling


def loss(
    model: ActionDenoiser,
    schedule: sched.NoiseSchedule,
    batch: dict[str, torch.Tensor],
    k: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE on forward-noised ground-truth chunks."""
    actions = batch["actions"]
    if actions.shape[0] == 0:
        raise ValueError("empty batch")
    if k is None:
        k = torch.randint(1, schedule.K + 1, (actions.shape[0],), generator=generator)
    if eps is None:
        eps = torch.randn(actions.shape, dtype=actions.dtype, generator=generator)
    noisy = sched.forward_noise(schedule, actions, k, eps)
    eps_hat = model(batch["images"], batch["poses"], batch.get("rtg"), noisy, k,
                    schedule)
    return torch.mean((eps_hat - eps) ** 2)


def train(
    model: ActionDenoiser,
    episodes: list[datagen.Episode],
    manifest: dict,
    schedule: sched.NoiseSchedule,
    epochs: int,
    batch_size: int = 64,
    lr: float = 1e-4,
    seed: int = 0,
    csv_path: str | Path | None = None,
) -> list[tuple[int, float]]:
    """Seed-deterministic Adam training; returns (step, loss) records."""
    if not episodes:
        raise ValueError("empty dataset")
    torch.set_num_threads(1)
    gen = torch.Generator().manual_seed(seed)
    index = build_window_index(episodes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    records: list[tuple[int, float]] = []
    step = 0
    for _ in range(epochs):
        order = torch.randperm(len(index), generator=gen).tolist()
        for lo in range(0, len(order), batch_size):
            picks = [index[i] for i in order[lo:lo + batch_size]]
            batch = assemble_windows(
                episodes, manifest, picks,
                obs_frames=model.obs_frames, action_frames=model.action_frames,
                dtype=model.out_proj.weight.dtype,
            )
            value = loss(model, schedule, batch, generator=gen)
            opt.zero_grad()
            value.backward()
            opt.step()
            records.append((step, float(value.detach())))
            step += 1
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(records)
    return records


def sample_actions(
    model: ActionDenoiser,
    schedule: sched.NoiseSchedule,
    images: torch.Tensor,
    poses: torch.Tensor,
    rtg: torch.Tensor | None,
    generator: torch.Generator | None = None,
    init: torch.Tensor | None = None,
    noise_fn=None,
) -> torch.Tensor:
    """Run the full reverse chain; returns a normalized action chunk.

    `init` overrides the A^K draw and `noise_fn(k, shape)` the per-step
    noise, used when callers manage their own per-episode streams.
    """
    b = images.shape[0]
    shape = (b, model.action_frames, model.action_dim)
    dtype = model.out_proj.weight.dtype
    with torch.no_grad():
        x = init if init is not None else torch.randn(
            shape, dtype=dtype, generator=generator
        )
        for k in range(schedule.K, 0, -1):
            kk = torch.full((b,), k, dtype=torch.long)
            eps_hat = model(images, poses, rtg, x, kk, schedule)
            if noise_fn is not None:
                noise = noise_fn(k, shape).to(dtype)
            else:
                noise = torch.randn(shape, dtype=dtype, generator=generator)
            x = sched.reverse_step(schedule, x, k, eps_hat, noise)
    return x
