"""Differentiable objectives: pixel MSE, two perceptual losses, adversarial pair.

Two deliberately different feature extractors back the perceptual losses:
"percA" (3x3 kernels, rotation pretext) and "percB" (5x5 kernels,
rotation-and-flip pretext).  Step I of the removal attack and the E-aware
Step II use percA; the E-agnostic Step II uses percB so the two steps never
share a perceptual model.  Both are trained briefly on the attacking
dataset, then frozen.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, TrainingFailureError
from .util import seeded_generator

DISC_EPS = 1e-6  # probability clamp keeping the adversarial logs finite


def mse(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.mean((x - y) ** 2)


# ---------------------------------------------------------------------------
# Perceptual feature extractors
# ---------------------------------------------------------------------------

class PerceptualExtractor(nn.Module):
    """Frozen conv classifier whose tap-layer activations define a distance.

    variant "percA": 3x3 kernels, widths (16,32,64), taps after every block.
    variant "percB": 5x5 kernels, widths (24,40,64), taps after blocks 2,3.
    """

    ARCH_NAME = "losses.perceptual"

    VARIANTS = {
        "percA": {"kernel": 3, "widths": (16, 32, 64), "taps": (0, 1, 2), "classes": 4},
        "percB": {"kernel": 5, "widths": (24, 40, 64), "taps": (1, 2), "classes": 8},
    }

    def __init__(self, variant: str):
        super().__init__()
        if variant not in self.VARIANTS:
            raise InvalidArgumentError(f"unknown perceptual variant {variant!r}")
        spec = self.VARIANTS[variant]
        self.variant = variant
        self.taps = spec["taps"]
        self.tap_weights = tuple(1.0 for _ in spec["taps"])
        k = spec["kernel"]
        pad = k // 2
        blocks = []
        c_in = 3
        for w in spec["widths"]:
            blocks.append(nn.Sequential(nn.Conv2d(c_in, w, k, stride=2, padding=pad), nn.SiLU()))
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(c_in, spec["classes"])
        self.feature_dim = c_in

    def descriptor(self):
        return {"name": self.ARCH_NAME, "variant": self.variant}

    @classmethod
    def from_descriptor(cls, desc):
        return cls(variant=desc["variant"])

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def features(self, x: torch.Tensor) -> list:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InvalidArgumentError(f"expected [B,3,H,W], got {tuple(x.shape)}")
        out = []
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in self.taps:
                out.append(h)
        return out

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled top-block features, [B, feature_dim]; used by the FID metric."""
        h = x
        for block in self.blocks:
            h = block(h)
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.penultimate(x))


def perceptual(extractor: PerceptualExtractor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Weighted sum of per-tap feature MSEs; 0 iff the features agree."""
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    fx = extractor.features(x)
    fy = extractor.features(y)
    total = x.new_zeros(())
    for w, a, b in zip(extractor.tap_weights, fx, fy):
        total = total + w * torch.mean((a - b) ** 2)
    return total


def _pretext_batch(xb: torch.Tensor, classes: int, g: torch.Generator):
    """Rotation (4-way) or rotation-and-flip (8-way) self-supervised labels."""
    labels = torch.randint(0, classes, (xb.shape[0],), generator=g)
    out = []
    for img, lab in zip(xb, labels):
        t = torch.rot90(img, int(lab) % 4, dims=(1, 2))
        if classes == 8 and int(lab) >= 4:
            t = torch.flip(t, dims=(2,))
        out.append(t)
    return torch.stack(out), labels


def train_feature_extractor(images: torch.Tensor, variant: str, seed: int,
                            epochs: int = 2, batch_size: int = 64,
                            lr: float = 1e-3, log_every: int = 200) -> PerceptualExtractor:
    """Short self-supervised pretext training, then freeze."""
    if images.dim() != 4 or images.shape[1] != 3:
        raise InvalidArgumentError(f"expected [N,3,H,W] images, got {tuple(images.shape)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = PerceptualExtractor(variant)
    if epochs > 0:
        classes = PerceptualExtractor.VARIANTS[variant]["classes"]
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        g = seeded_generator(seed + 1)
        step = 0
        for _ in range(epochs):
            perm = torch.randperm(images.shape[0], generator=g)
            for i in range(0, images.shape[0], batch_size):
                xb, labels = _pretext_batch(images[perm[i : i + batch_size]], classes, g)
                logits = model(xb)
                loss = F.cross_entropy(logits, labels)
                if not torch.isfinite(loss):
                    raise TrainingFailureError(f"{variant} pretext loss non-finite at step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if step % log_every == 0:
                    acc = float((logits.argmax(1) == labels).float().mean())
                    print(f"[{variant}] step {step} loss {float(loss):.4f} acc {acc:.3f}")
                step += 1
    return model.freeze()


# ---------------------------------------------------------------------------
# Adversarial pair
# ---------------------------------------------------------------------------

class Discriminator(nn.Module):
    """Conv binary classifier; probability-of-real clamped inside (0,1)."""

    ARCH_NAME = "losses.discriminator"

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(2 * w, 1)

    def descriptor(self):
        return {"name": self.ARCH_NAME, "width": self.width}

    @classmethod
    def from_descriptor(cls, desc):
        return cls(width=desc["width"])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B,3,H,W] -> [B] probability of being a real image."""
        h = self.net(x).mean(dim=(2, 3))
        p = torch.sigmoid(self.head(h)).squeeze(1)
        return torch.clamp(p, DISC_EPS, 1.0 - DISC_EPS)


def init_discriminator(seed: int, width: int = 32) -> Discriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Discriminator(width=width)


def adv_generator_loss(disc: Discriminator, images: torch.Tensor) -> torch.Tensor:
    """mean log(1 - disc(images)); the decoder minimizes this to fool disc."""
    return torch.mean(torch.log(1.0 - disc(images)))


def disc_loss(disc: Discriminator, fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Negated discriminator objective, so minimizing trains the discriminator."""
    return -(torch.mean(torch.log(1.0 - disc(fake))) + torch.mean(torch.log(disc(real))))
