"""Feature transition phase: unpaired two-domain translation with cycle
consistency.

Domain A holds base images (nevi), domain B the structure-positive images.
``G_ab`` stamps the structure onto a base; ``G_ba`` removes it. Adversarial
terms use least squares; reconstruction and identity terms are L1.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .checkpoint import config_hash, load_archive, read_header, save_archive
from .imaging import GENERATOR_RANGE, check_images, content_id, from_uint8, load_png, save_png, to_uint8
from .manifest import ManifestRecord
from .torch_utils import deterministic_mode, lsgan_fake, lsgan_real, to_nchw, to_nhwc, torch_generator

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_g_ab", "loss_g_ba", "loss_d_a", "loss_d_b", "loss_cyc", "loss_id")
DIRECTIONS = ("a_to_b", "b_to_a")


def cycle_loss(x, reconstructed):
    """Mean absolute elementwise difference."""
    if isinstance(x, torch.Tensor):
        if x.shape != reconstructed.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(reconstructed.shape)}")
        return torch.mean(torch.abs(x - reconstructed))
    x = np.asarray(x, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if x.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {reconstructed.shape}")
    return float(np.mean(np.abs(x - reconstructed)))


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Encoder / residual blocks / decoder; shape preserving.

    With ``residual_output`` the network predicts an additive change to the
    input instead of a tanh image; ``identity_init`` then zeroes that change
    so the untrained map is exactly the identity on ``[-1, 1]``.
    """

    def __init__(self, ngf=64, n_blocks=9, n_down=2, residual_output=False, identity_init=False):
        super().__init__()
        if identity_init and not residual_output:
            raise ValueError("identity_init requires residual_output")
        self.residual_output = residual_output
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True)]
        ch = ngf
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        self.head = nn.Conv2d(ch, 3, 7)
        layers += [nn.ReflectionPad2d(3), self.head]
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)
        if identity_init:
            nn.init.zeros_(self.head.weight)

    def forward(self, x):
        out = self.net(x)
        if self.residual_output:
            return torch.clamp(x + out, -1.0, 1.0)
        return torch.tanh(out)


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic scoring overlapping patches (70x70 at n_layers=3)."""

    def __init__(self, ndf=64, n_layers=3):
        super().__init__()
        layers = [nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [
                nn.Conv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ndf * mult),
                nn.LeakyReLU(0.2, True),
            ]
        prev, mult = mult, min(2**n_layers, 8)
        layers += [
            nn.Conv2d(ndf * prev, ndf * mult, 4, stride=1, padding=1),
            nn.InstanceNorm2d(ndf * mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.net(x)


class ReplayBuffer:
    """History of generated images shown to the discriminators."""

    def __init__(self, size=50):
        self.size = size
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif rng.random() < 0.5:
                i = int(rng.integers(self.size))
                out.append(self.images[i].clone())
                self.images[i] = img.clone()
            else:
                out.append(img)
        return torch.cat(out)


class DomainSampler:
    """Independent shuffled passes over each domain.

    Every step takes a uniform draw from each domain; an epoch lasts as long
    as the larger domain, and the smaller domain is re-shuffled whenever its
    pass ends, so both are seen every epoch.
    """

    def __init__(self, n_a: int, n_b: int, rng: np.random.Generator):
        self.n = (n_a, n_b)
        self.rng = rng
        self.order = [rng.permutation(n_a), rng.permutation(n_b)]
        self.pos = [0, 0]

    @property
    def epoch_length(self) -> int:
        return max(self.n)

    def _take(self, d: int, k: int) -> np.ndarray:
        out = []
        for _ in range(k):
            if self.pos[d] == self.n[d]:
                self.order[d] = self.rng.permutation(self.n[d])
                self.pos[d] = 0
            out.append(self.order[d][self.pos[d]])
            self.pos[d] += 1
        return np.asarray(out)

    def next_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        return self._take(0, min(batch_size, self.n[0])), self._take(1, min(batch_size, self.n[1]))

    def state(self) -> dict:
        return {"order": [o.tolist() for o in self.order], "pos": list(self.pos)}

    def set_state(self, state: dict) -> None:
        self.order = [np.asarray(o) for o in state["order"]]
        self.pos = list(state["pos"])


def generator_objective(D_a, D_b, real_a, real_b, fake_a, fake_b, rec_a, rec_b, idt_a=None, idt_b=None,
                        lambda_cyc=10.0, lambda_id=5.0) -> dict:
    """Loss terms for both generators plus their weighted total.

    ``idt_a = G_ba(real_a)`` and ``idt_b = G_ab(real_b)``; identity terms are
    skipped when these are None.
    """
    terms = {
        "adv_ab": lsgan_real(D_b(fake_b)),
        "adv_ba": lsgan_real(D_a(fake_a)),
        "cyc_a": cycle_loss(real_a, rec_a),
        "cyc_b": cycle_loss(real_b, rec_b),
    }
    zero = torch.zeros((), dtype=real_a.dtype)
    terms["id_a"] = cycle_loss(real_a, idt_a) if idt_a is not None else zero
    terms["id_b"] = cycle_loss(real_b, idt_b) if idt_b is not None else zero
    terms["total"] = (
        terms["adv_ab"] + terms["adv_ba"]
        + lambda_cyc * (terms["cyc_a"] + terms["cyc_b"])
        + lambda_id * (terms["id_a"] + terms["id_b"])
    )
    return terms


class CycleTranslator(BaseEstimator):
    """Unpaired translator between a base domain A and a structure domain B.

    ``fit(X_a, X_b)`` takes two ``[-1, 1]`` image arrays of equal resolution;
    ``transform(X)`` maps A to B, ``inverse_transform(X)`` maps B to A.
    ``lambda_id=None`` means half of ``lambda_cyc``.
    """

    def __init__(
        self,
        ngf=64,
        ndf=64,
        n_blocks=9,
        n_layers_d=3,
        lambda_cyc=10.0,
        lambda_id=None,
        pool_size=50,
        learning_rate=2e-4,
        beta1=0.5,
        n_steps=1000,
        batch_size=1,
        residual_output=False,
        identity_init=False,
        seed=0,
        deterministic=True,
        warm_start=False,
    ):
        self.ngf = ngf
        self.ndf = ndf
        self.n_blocks = n_blocks
        self.n_layers_d = n_layers_d
        self.lambda_cyc = lambda_cyc
        self.lambda_id = lambda_id
        self.pool_size = pool_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.residual_output = residual_output
        self.identity_init = identity_init
        self.seed = seed
        self.deterministic = deterministic
        self.warm_start = warm_start

    @property
    def lambda_id_(self) -> float:
        return 0.5 * self.lambda_cyc if self.lambda_id is None else self.lambda_id

    @property
    def config_hash(self) -> str:
        return config_hash({"kind": "cycle_translator", **self.get_params()})

    def _build(self, n_a, n_b, resolution):
        torch.manual_seed(self.seed)
        gen = dict(ngf=self.ngf, n_blocks=self.n_blocks, residual_output=self.residual_output, identity_init=self.identity_init)
        self.g_ab_ = ResnetGenerator(**gen)
        self.g_ba_ = ResnetGenerator(**gen)
        self.d_a_ = PatchDiscriminator(self.ndf, self.n_layers_d)
        self.d_b_ = PatchDiscriminator(self.ndf, self.n_layers_d)
        betas = (self.beta1, 0.999)
        self.opt_g_ = torch.optim.Adam(list(self.g_ab_.parameters()) + list(self.g_ba_.parameters()), lr=self.learning_rate, betas=betas)
        self.opt_d_ = torch.optim.Adam(list(self.d_a_.parameters()) + list(self.d_b_.parameters()), lr=self.learning_rate, betas=betas)
        self.np_rng_ = np.random.default_rng(self.seed)
        self.torch_rng_ = torch_generator(self.seed)
        self.sampler_ = DomainSampler(n_a, n_b, self.np_rng_)
        self.pool_a_ = ReplayBuffer(self.pool_size)
        self.pool_b_ = ReplayBuffer(self.pool_size)
        self.resolution_ = resolution
        self.step_ = 0
        self.log_ = []

    def _check_fitted(self):
        if not hasattr(self, "g_ab_"):
            raise NotFittedError("CycleTranslator is not fitted")

    def fit(self, X_a, X_b, max_steps=None):
        X_a = check_images(X_a, value_range=GENERATOR_RANGE)
        X_b = check_images(X_b, value_range=GENERATOR_RANGE)
        if len(X_a) == 0 or len(X_b) == 0:
            raise ValueError("both domains must be nonempty")
        if X_a.shape[1:] != X_b.shape[1:]:
            raise ValueError(f"domain resolutions differ: {X_a.shape[1]} vs {X_b.shape[1]}")
        # n_layers_d halvings, then a 4x4 stride-1 conv that must leave > 1 pixel for InstanceNorm
        if X_a.shape[1] // 2**self.n_layers_d - 1 < 2:
            raise ValueError(
                f"{X_a.shape[1]}px images are too small for a {self.n_layers_d}-layer patch discriminator"
            )
        if not (self.warm_start and hasattr(self, "g_ab_")):
            self._build(len(X_a), len(X_b), X_a.shape[1])
        a, b = to_nchw(X_a), to_nchw(X_b)
        todo = self.n_steps - self.step_
        if max_steps is not None:
            todo = min(todo, max_steps)
        with deterministic_mode(self.deterministic):
            for _ in range(todo):
                self._step(a, b)
        return self

    def losses(self, real_a, real_b) -> dict:
        fake_b = self.g_ab_(real_a)
        fake_a = self.g_ba_(real_b)
        rec_a = self.g_ba_(fake_b)
        rec_b = self.g_ab_(fake_a)
        idt_a = idt_b = None
        if self.lambda_id_ > 0:
            idt_a = self.g_ba_(real_a)
            idt_b = self.g_ab_(real_b)
        terms = generator_objective(self.d_a_, self.d_b_, real_a, real_b, fake_a, fake_b, rec_a, rec_b,
                                    idt_a, idt_b, self.lambda_cyc, self.lambda_id_)
        terms["fake_a"], terms["fake_b"] = fake_a, fake_b
        return terms

    def _step(self, a, b):
        ia, ib = self.sampler_.next_batch(self.batch_size)
        real_a, real_b = a[torch.from_numpy(ia)], b[torch.from_numpy(ib)]

        for p in list(self.d_a_.parameters()) + list(self.d_b_.parameters()):
            p.requires_grad_(False)
        terms = self.losses(real_a, real_b)
        self.opt_g_.zero_grad(set_to_none=True)
        terms["total"].backward()
        self.opt_g_.step()
        for p in list(self.d_a_.parameters()) + list(self.d_b_.parameters()):
            p.requires_grad_(True)

        fake_a = self.pool_a_.query(terms["fake_a"], self.np_rng_)
        fake_b = self.pool_b_.query(terms["fake_b"], self.np_rng_)
        loss_d_a = 0.5 * (lsgan_real(self.d_a_(real_a)) + lsgan_fake(self.d_a_(fake_a)))
        loss_d_b = 0.5 * (lsgan_real(self.d_b_(real_b)) + lsgan_fake(self.d_b_(fake_b)))
        self.opt_d_.zero_grad(set_to_none=True)
        (loss_d_a + loss_d_b).backward()
        self.opt_d_.step()

        self.step_ += 1
        self.log_.append(
            {
                "step": self.step_,
                "loss_g_ab": terms["adv_ab"].item(),
                "loss_g_ba": terms["adv_ba"].item(),
                "loss_d_a": loss_d_a.item(),
                "loss_d_b": loss_d_b.item(),
                "loss_cyc": (terms["cyc_a"] + terms["cyc_b"]).item(),
                "loss_id": (terms["id_a"] + terms["id_b"]).item(),
            }
        )

    def transform(self, X, direction="a_to_b", batch_size=64) -> np.ndarray:
        self._check_fitted()
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        X = check_images(X, value_range=GENERATOR_RANGE)
        if len(X) and X.shape[1] != self.resolution_:
            raise ValueError(f"images are {X.shape[1]}px, translator trained at {self.resolution_}px")
        g = self.g_ab_ if direction == "a_to_b" else self.g_ba_
        out = []
        with torch.no_grad(), deterministic_mode(self.deterministic):
            for i in range(0, len(X), batch_size):
                out.append(to_nhwc(g(to_nchw(X[i : i + batch_size]))))
        return np.concatenate(out) if out else X.copy()

    def inverse_transform(self, X, batch_size=64) -> np.ndarray:
        return self.transform(X, "b_to_a", batch_size)

    def save(self, path):
        self._check_fitted()
        header = {
            "kind": "cycle_translator",
            "params": self.get_params(),
            "config_hash": self.config_hash,
            "step": self.step_,
            "resolution": self.resolution_,
            "domain_sizes": list(self.sampler_.n),
            "np_rng": self.np_rng_.bit_generator.state,
            "sampler": self.sampler_.state(),
        }
        state = {
            "opt_g": self.opt_g_.state_dict(),
            "opt_d": self.opt_d_.state_dict(),
            "torch_rng": self.torch_rng_.get_state(),
            "pool_a": self.pool_a_.images,
            "pool_b": self.pool_b_.images,
            "log": self.log_,
        }
        modules = {"g_ab": self.g_ab_, "g_ba": self.g_ba_, "d_a": self.d_a_, "d_b": self.d_b_}
        save_archive(path, header, modules, state)

    @classmethod
    def load(cls, path):
        header = read_header(path)
        if header.get("kind") != "cycle_translator":
            raise ValueError(f"{path} is not a translator checkpoint")
        model = cls(**header["params"])
        model._build(*header["domain_sizes"], header["resolution"])
        modules = {"g_ab": model.g_ab_, "g_ba": model.g_ba_, "d_a": model.d_a_, "d_b": model.d_b_}
        _, state = load_archive(path, modules)
        model.opt_g_.load_state_dict(state["opt_g"])
        model.opt_d_.load_state_dict(state["opt_d"])
        model.torch_rng_.set_state(state["torch_rng"])
        model.pool_a_.images = state["pool_a"]
        model.pool_b_.images = state["pool_b"]
        model.log_ = state["log"]
        model.np_rng_.bit_generator.state = header["np_rng"]
        model.sampler_.set_state(header["sampler"])
        model.step_ = header["step"]
        return model

    def write_log(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.log_)


PHASE2_POOL = {"real": "APN_nevus", "generated_phase1": "APN_nevusG"}


def translate(model: CycleTranslator, records: list[ManifestRecord], direction: str, out_dir, batch_size: int = 64):
    """Translate every record's image and write one phase-2 PNG per input.

    Outputs from real sources land in pool ``APN_nevus``; outputs from
    generated bases in ``APN_nevusG``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out: list[ManifestRecord] = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        X = np.stack([from_uint8(load_png(r.path), GENERATOR_RANGE) for r in chunk])
        Y = model.transform(X, direction)
        for rec, y in zip(chunk, Y):
            pixels = to_uint8(y, GENERATOR_RANGE)
            rid = content_id(pixels, f"generated_phase2:{rec.id}")
            path = out_dir / f"{rid}.png"
            save_png(pixels, path)
            out.append(
                ManifestRecord(
                    id=rid,
                    path=str(path),
                    label_structure=direction == "a_to_b",
                    provenance="generated_phase2",
                    source_id=rec.id,
                    pool=PHASE2_POOL.get(rec.provenance, "APN_nevusG") if direction == "a_to_b" else None,
                )
            )
    return out
