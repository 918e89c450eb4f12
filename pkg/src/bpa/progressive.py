"""Bulk production phase: a progressive-growing GAN over base lesion images.

The generator grows from 4x4 by doubling; each new stage is faded in by
blending the nearest-upsampled output of the previous stage with the new
stage's output. Training uses the Wasserstein loss with gradient penalty,
equalized learning rate, pixelwise feature normalization and a minibatch
standard-deviation layer.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .checkpoint import config_hash, load_archive, read_header, save_archive
from .imaging import GENERATOR_RANGE, check_images, content_id, save_png, to_uint8
from .manifest import ManifestRecord
from .torch_utils import deterministic_mode, to_nchw, to_nhwc, torch_generator

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "alpha", "loss_g", "loss_d", "grad_penalty")


def stage_schedule(target_resolution: int) -> list[int]:
    """Side lengths per stage: 4, 8, ... up to ``target_resolution``."""
    if target_resolution < 4 or target_resolution & (target_resolution - 1):
        raise ValueError(f"target resolution must be a power of two >= 4, got {target_resolution}")
    return [4 * 2**s for s in range(int(math.log2(target_resolution)) - 1)]


@dataclass(frozen=True)
class ProgressiveStage:
    stage_index: int
    alpha: float = 1.0

    def __post_init__(self):
        if self.stage_index < 0:
            raise ValueError("stage_index must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    @property
    def resolution(self) -> int:
        return 4 * 2**self.stage_index


def sample_latent(n: int, latent_dim: int, seed: int) -> np.ndarray:
    """``n`` standard-normal latent vectors as an ``(n, latent_dim)`` array."""
    if latent_dim <= 0:
        raise ValueError(f"latent_dim must be positive, got {latent_dim}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, latent_dim)).astype(np.float32)


def upsample_nearest(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)


def fade_in(low: torch.Tensor, high: torch.Tensor, alpha: float) -> torch.Tensor:
    """Blend the upsampled previous-stage output with the new stage's output."""
    factor = high.shape[-1] // low.shape[-1]
    return (1.0 - alpha) * upsample_nearest(low, factor) + alpha * high


class EqualizedConv2d(nn.Module):
    """Convolution whose weights are rescaled by He's constant at runtime."""

    def __init__(self, in_ch, out_ch, kernel_size, padding=0, gain=math.sqrt(2), equalized=True):
        super().__init__()
        self.padding = padding
        self.equalized = equalized
        fan_in = in_ch * kernel_size * kernel_size
        std = gain / math.sqrt(fan_in)
        self.scale = std if equalized else 1.0
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size) * (1.0 if equalized else std))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqualizedLinear(nn.Module):
    def __init__(self, in_f, out_f, gain=math.sqrt(2), equalized=True):
        super().__init__()
        std = gain / math.sqrt(in_f)
        self.scale = std if equalized else 1.0
        self.weight = nn.Parameter(torch.randn(out_f, in_f) * (1.0 if equalized else std))
        self.bias = nn.Parameter(torch.zeros(out_f))

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(torch.mean(x * x, dim=1, keepdim=True) + 1e-8)


class MinibatchStd(nn.Module):
    def __init__(self, group_size=4):
        super().__init__()
        self.group_size = group_size

    def forward(self, x):
        n, c, h, w = x.shape
        g = min(self.group_size, n)
        if n % g:
            g = 1
        y = x.reshape(g, -1, c, h, w)
        y = torch.sqrt(y.var(dim=0, unbiased=False) + 1e-8)
        y = y.mean(dim=(1, 2, 3)).reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
        return torch.cat([x, y], dim=1)


def _channels(stage, fmap_base, fmap_max):
    return min(fmap_base // 2**stage, fmap_max)


class ProgressiveGenerator(nn.Module):
    def __init__(self, latent_dim=512, target_resolution=256, fmap_base=8192, fmap_max=512, equalized_lr=True, pixelnorm=True):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_stages = len(stage_schedule(target_resolution))
        ch = [_channels(s, fmap_base, fmap_max) for s in range(self.n_stages)]
        norm = PixelNorm() if pixelnorm else nn.Identity()
        act = nn.LeakyReLU(0.2)
        eq = equalized_lr
        self.input_norm = norm
        self.dense = EqualizedLinear(latent_dim, ch[0] * 16, gain=math.sqrt(2) / 4, equalized=eq)
        self.blocks = nn.ModuleList([nn.Sequential(act, norm, EqualizedConv2d(ch[0], ch[0], 3, 1, equalized=eq), act, norm)])
        for s in range(1, self.n_stages):
            self.blocks.append(
                nn.Sequential(
                    EqualizedConv2d(ch[s - 1], ch[s], 3, 1, equalized=eq), act, norm,
                    EqualizedConv2d(ch[s], ch[s], 3, 1, equalized=eq), act, norm,
                )
            )
        self.to_rgb = nn.ModuleList([EqualizedConv2d(c, 3, 1, gain=1.0, equalized=eq) for c in ch])
        self._ch0 = ch[0]

    def features(self, z, upto):
        x = self.dense(self.input_norm(z)).view(-1, self._ch0, 4, 4)
        x = self.blocks[0](x)
        for s in range(1, upto + 1):
            x = self.blocks[s](upsample_nearest(x))
        return x

    def forward(self, z, stage, alpha=1.0):
        if not 0 <= stage < self.n_stages:
            raise ValueError(f"stage {stage} outside schedule of {self.n_stages} stages")
        if stage == 0 or alpha >= 1.0:
            return torch.tanh(self.to_rgb[stage](self.features(z, stage)))
        x = self.features(z, stage - 1)
        low = self.to_rgb[stage - 1](x)
        high = self.to_rgb[stage](self.blocks[stage](upsample_nearest(x)))
        return torch.tanh(fade_in(low, high, alpha))


class ProgressiveDiscriminator(nn.Module):
    def __init__(self, target_resolution=256, fmap_base=8192, fmap_max=512, equalized_lr=True, mbstd_group=4):
        super().__init__()
        self.n_stages = len(stage_schedule(target_resolution))
        ch = [_channels(s, fmap_base, fmap_max) for s in range(self.n_stages)]
        act = nn.LeakyReLU(0.2)
        eq = equalized_lr
        self.from_rgb = nn.ModuleList([nn.Sequential(EqualizedConv2d(3, c, 1, equalized=eq), act) for c in ch])
        self.blocks = nn.ModuleList([nn.Identity()])
        for s in range(1, self.n_stages):
            self.blocks.append(
                nn.Sequential(
                    EqualizedConv2d(ch[s], ch[s], 3, 1, equalized=eq), act,
                    EqualizedConv2d(ch[s], ch[s - 1], 3, 1, equalized=eq), act,
                    nn.AvgPool2d(2),
                )
            )
        self.final = nn.Sequential(
            MinibatchStd(mbstd_group),
            EqualizedConv2d(ch[0] + 1, ch[0], 3, 1, equalized=eq), act,
            nn.Flatten(),
            EqualizedLinear(ch[0] * 16, ch[0], equalized=eq), act,
            EqualizedLinear(ch[0], 1, gain=1.0, equalized=eq),
        )

    def forward(self, x, stage, alpha=1.0):
        h = self.from_rgb[stage](x)
        if stage > 0:
            h = self.blocks[stage](h)
            if alpha < 1.0:
                h = (1.0 - alpha) * self.from_rgb[stage - 1](F.avg_pool2d(x, 2)) + alpha * h
            for s in range(stage - 1, 0, -1):
                h = self.blocks[s](h)
        return self.final(h).view(-1)


def generator_adversarial_loss(G, D, z, stage, alpha=1.0):
    return -D(G(z, stage, alpha), stage, alpha).mean()


def gradient_penalty(D, real, fake, stage, alpha, eps):
    x_hat = (eps * real + (1.0 - eps) * fake).requires_grad_(True)
    out = D(x_hat, stage, alpha)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    return ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()


def discriminator_loss(D, real, fake, stage, alpha, eps, gp_weight=10.0, drift_weight=1e-3):
    """WGAN-GP critic loss; returns ``(total, gradient_penalty)``."""
    d_real = D(real, stage, alpha)
    d_fake = D(fake, stage, alpha)
    gp = gradient_penalty(D, real, fake, stage, alpha, eps)
    total = d_fake.mean() - d_real.mean() + gp_weight * gp + drift_weight * (d_real**2).mean()
    return total, gp


def downscale(x: torch.Tensor, resolution: int) -> torch.Tensor:
    factor = x.shape[-1] // resolution
    return F.avg_pool2d(x, factor) if factor > 1 else x


class ProgressiveGAN(BaseEstimator):
    """Unconditional progressive-growing image generator.

    ``fit`` takes an ``(n, R, R, 3)`` array in ``[-1, 1]`` where ``R`` is
    ``target_resolution``. Each stage shows ``images_per_stage`` real images;
    every stage after the first spends half of them fading in.
    """

    def __init__(
        self,
        latent_dim=512,
        target_resolution=32,
        fmap_base=1024,
        fmap_max=128,
        images_per_stage=2000,
        batch_size=16,
        learning_rate=1e-3,
        beta1=0.0,
        beta2=0.99,
        gp_weight=10.0,
        drift_weight=1e-3,
        mbstd_group=4,
        equalized_lr=True,
        pixelnorm=True,
        seed=0,
        deterministic=True,
        warm_start=False,
    ):
        self.latent_dim = latent_dim
        self.target_resolution = target_resolution
        self.fmap_base = fmap_base
        self.fmap_max = fmap_max
        self.images_per_stage = images_per_stage
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.gp_weight = gp_weight
        self.drift_weight = drift_weight
        self.mbstd_group = mbstd_group
        self.equalized_lr = equalized_lr
        self.pixelnorm = pixelnorm
        self.seed = seed
        self.deterministic = deterministic
        self.warm_start = warm_start

    # construction -----------------------------------------------------

    def _build(self):
        torch.manual_seed(self.seed)
        self.generator_ = ProgressiveGenerator(
            self.latent_dim, self.target_resolution, self.fmap_base, self.fmap_max, self.equalized_lr, self.pixelnorm
        )
        self.discriminator_ = ProgressiveDiscriminator(
            self.target_resolution, self.fmap_base, self.fmap_max, self.equalized_lr, self.mbstd_group
        )
        betas = (self.beta1, self.beta2)
        self.opt_g_ = torch.optim.Adam(self.generator_.parameters(), lr=self.learning_rate, betas=betas, eps=1e-8)
        self.opt_d_ = torch.optim.Adam(self.discriminator_.parameters(), lr=self.learning_rate, betas=betas, eps=1e-8)
        self.torch_rng_ = torch_generator(self.seed)
        self.np_rng_ = np.random.default_rng(self.seed)
        self.schedule_ = stage_schedule(self.target_resolution)
        self.stage_ = 0
        self.images_in_stage_ = 0
        self.step_ = 0
        self.stage_iterations_ = {}
        self.log_ = []
        self.done_ = False

    @property
    def config_hash(self) -> str:
        return config_hash({"kind": "progressive_gan", **self.get_params()})

    @property
    def alpha_(self) -> float:
        if self.stage_ == 0:
            return 1.0
        return min(1.0, self.images_in_stage_ / (self.images_per_stage / 2))

    def _check_fitted(self):
        if not hasattr(self, "generator_"):
            raise NotFittedError("ProgressiveGAN is not fitted")

    # training ---------------------------------------------------------

    def fit(self, X, max_steps=None):
        """Train through the whole stage schedule (or ``max_steps`` more steps)."""
        X = check_images(X, value_range=GENERATOR_RANGE)
        if len(X) == 0:
            raise ValueError("cannot train on an empty pool")
        if X.shape[1] != self.target_resolution:
            raise ValueError(
                f"pool images are {X.shape[1]}x{X.shape[2]}, expected {self.target_resolution}x{self.target_resolution}"
            )
        if not (self.warm_start and hasattr(self, "generator_")):
            self._build()
        data = to_nchw(X)
        steps = 0
        with deterministic_mode(self.deterministic):
            while not self.done_ and (max_steps is None or steps < max_steps):
                self._step(data)
                steps += 1
        return self

    def _step(self, data):
        stage, alpha = self.stage_, self.alpha_
        res = self.schedule_[stage]
        b = min(self.batch_size, len(data))
        idx = self.np_rng_.choice(len(data), size=b, replace=False)
        real = downscale(data[torch.from_numpy(idx)], res)
        if stage > 0 and alpha < 1.0:
            real = fade_in(F.avg_pool2d(real, 2), real, alpha)
        G, D = self.generator_, self.discriminator_
        g = self.torch_rng_

        z = torch.randn(b, self.latent_dim, generator=g)
        with torch.no_grad():
            fake = G(z, stage, alpha)
        eps = torch.rand(b, 1, 1, 1, generator=g)
        loss_d, gp = discriminator_loss(D, real, fake, stage, alpha, eps, self.gp_weight, self.drift_weight)
        self.opt_d_.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d_.step()

        z = torch.randn(b, self.latent_dim, generator=g)
        loss_g = generator_adversarial_loss(G, D, z, stage, alpha)
        self.opt_g_.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g_.step()

        self.step_ += 1
        self.log_.append(
            {
                "step": self.step_,
                "stage": stage,
                "alpha": round(alpha, 6),
                "loss_g": loss_g.item(),
                "loss_d": loss_d.item(),
                "grad_penalty": gp.item(),
            }
        )
        key = str(stage)
        self.stage_iterations_[key] = self.stage_iterations_.get(key, 0) + 1
        self.images_in_stage_ += b
        if self.images_in_stage_ >= self.images_per_stage:
            if self.stage_ + 1 < len(self.schedule_):
                self.stage_ += 1
                self.images_in_stage_ = 0
            else:
                self.done_ = True

    # generation -------------------------------------------------------

    def generator_forward(self, z, stage: ProgressiveStage | None = None) -> np.ndarray:
        """Images for latent rows ``z`` at ``stage`` (default: final stage), NHWC in [-1, 1]."""
        self._check_fitted()
        if stage is None:
            stage = ProgressiveStage(len(self.schedule_) - 1)
        if stage.stage_index >= len(self.schedule_):
            raise ValueError(f"stage {stage.stage_index} beyond the {len(self.schedule_)}-stage schedule")
        z = torch.as_tensor(np.atleast_2d(np.asarray(z, dtype=np.float32)))
        with torch.no_grad(), deterministic_mode(self.deterministic):
            out = self.generator_(z, stage.stage_index, stage.alpha)
        return to_nhwc(out)

    def sample(self, n, seed, batch_size=256) -> np.ndarray:
        z = sample_latent(n, self.latent_dim, seed)
        chunks = [self.generator_forward(z[i : i + batch_size]) for i in range(0, n, batch_size)]
        if not chunks:
            r = self.target_resolution
            return np.zeros((0, r, r, 3), dtype=np.float32)
        return np.concatenate(chunks)

    # persistence ------------------------------------------------------

    def save(self, path):
        self._check_fitted()
        header = {
            "kind": "progressive_gan",
            "params": self.get_params(),
            "config_hash": self.config_hash,
            "stage": self.stage_,
            "alpha": self.alpha_,
            "images_in_stage": self.images_in_stage_,
            "step": self.step_,
            "done": self.done_,
            "stage_iterations": self.stage_iterations_,
            "np_rng": self.np_rng_.bit_generator.state,
        }
        state = {
            "opt_g": self.opt_g_.state_dict(),
            "opt_d": self.opt_d_.state_dict(),
            "torch_rng": self.torch_rng_.get_state(),
            "log": self.log_,
        }
        save_archive(path, header, {"generator": self.generator_, "discriminator": self.discriminator_}, state)

    @classmethod
    def load(cls, path):
        header = read_header(path)
        if header.get("kind") != "progressive_gan":
            raise ValueError(f"{path} is not a progressive GAN checkpoint")
        params = header["params"]
        model = cls(**params)
        model._build()
        _, state = load_archive(path, {"generator": model.generator_, "discriminator": model.discriminator_})
        model.opt_g_.load_state_dict(state["opt_g"])
        model.opt_d_.load_state_dict(state["opt_d"])
        model.torch_rng_.set_state(state["torch_rng"])
        model.log_ = state["log"]
        model.np_rng_.bit_generator.state = header["np_rng"]
        model.stage_ = header["stage"]
        model.images_in_stage_ = header["images_in_stage"]
        model.step_ = header["step"]
        model.done_ = header["done"]
        model.stage_iterations_ = header["stage_iterations"]
        return model

    def write_log(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.log_)


def generate_bulk(model: ProgressiveGAN, count: int, seed: int, out_dir, pool: str = "nevusG", batch_size: int = 256):
    """Write ``count`` distinct generated images as PNGs; return their manifest.

    Exact duplicate outputs are discarded and replaced by further draws, so
    the manifest always holds ``count`` unique ids.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    probe.write_bytes(b"")
    probe.unlink()
    rng = np.random.default_rng(seed)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    draws = 0
    while len(records) < count:
        n = min(batch_size, count - len(records))
        z = rng.standard_normal((n, model.latent_dim)).astype(np.float32)
        draws += n
        for img in model.generator_forward(z):
            pixels = to_uint8(img, GENERATOR_RANGE)
            rid = content_id(pixels, "generated_phase1")
            if rid in seen:
                logger.warning("duplicate generated image discarded")
                continue
            seen.add(rid)
            path = out_dir / f"{rid}.png"
            save_png(pixels, path)
            records.append(
                ManifestRecord(id=rid, path=str(path), label_structure=False, provenance="generated_phase1", pool=pool)
            )
    meta = {"count": count, "seed": seed, "latent_draws": draws, "latent_dim": model.latent_dim, "config_hash": model.config_hash}
    (out_dir / "generation.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return records
