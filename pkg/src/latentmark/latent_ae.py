"""Desk-scale convolutional autoencoder standing in for the latent model.

The encoder maps [B,3,H,W] images (canonical [-1,1]) to [B,c_lat,H/f,W/f]
latents with f=4; the decoder maps back through a tanh so outputs stay in
range.  Encoder and decoder serialize independently: attacks replace only
the decoder.  A Gaussian latent prior fitted to encoder outputs supplies
evaluation latents in place of any generative sampling machinery.
"""

import copy
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, TrainingFailureError
from .util import seeded_generator


class Encoder(nn.Module):
    """[B,3,S,S] -> [B,c_lat,S/4,S/4]."""

    ARCH_NAME = "latent_ae.encoder"

    def __init__(self, c_lat: int = 4, width: int = 48):
        super().__init__()
        self.c_lat = c_lat
        self.width = width
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),      # S/2
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),  # S/4
            nn.Conv2d(2 * w, c_lat, 3, padding=1),
        )

    def descriptor(self):
        return {"name": self.ARCH_NAME, "c_lat": self.c_lat, "width": self.width}

    @classmethod
    def from_descriptor(cls, desc):
        return cls(c_lat=desc["c_lat"], width=desc["width"])

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise InvalidArgumentError(f"encoder expects [B,3,H,W], got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise InvalidArgumentError("image sides must be divisible by the factor 4")
        return self.net(x)


class Decoder(nn.Module):
    """[B,c_lat,s,s] -> [B,3,4s,4s], tanh-bounded output."""

    ARCH_NAME = "latent_ae.decoder"

    def __init__(self, c_lat: int = 4, width: int = 48):
        super().__init__()
        self.c_lat = c_lat
        self.width = width
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(c_lat, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
            nn.Tanh(),
        )

    def descriptor(self):
        return {"name": self.ARCH_NAME, "c_lat": self.c_lat, "width": self.width}

    @classmethod
    def from_descriptor(cls, desc):
        return cls(c_lat=desc["c_lat"], width=desc["width"])

    def forward(self, z):
        if z.dim() != 4 or z.shape[1] != self.c_lat:
            raise InvalidArgumentError(
                f"decoder expects [B,{self.c_lat},h,w], got {tuple(z.shape)}"
            )
        return self.net(z)


@dataclass
class AutoencoderModel:
    encoder: Encoder
    decoder: Decoder
    image_size: int = 64
    factor: int = 4
    seed: int = 0

    @property
    def c_lat(self) -> int:
        return self.encoder.c_lat

    def latent_shape(self) -> tuple:
        s = self.image_size // self.factor
        return (self.c_lat, s, s)


def init_autoencoder(image_size: int = 64, c_lat: int = 4, width: int = 48,
                     seed: int = 0) -> AutoencoderModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = Encoder(c_lat=c_lat, width=width)
        dec = Decoder(c_lat=c_lat, width=width)
    return AutoencoderModel(encoder=enc, decoder=dec, image_size=image_size, seed=seed)


def encode(model: AutoencoderModel, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model.encoder(x.unsqueeze(0) if x.dim() == 3 else x)


def decode(model: AutoencoderModel, z: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model.decoder(z.unsqueeze(0) if z.dim() == 3 else z)


def psnr_db(a: torch.Tensor, b: torch.Tensor) -> float:
    # 8-bit-space PSNR; the metrics module owns the public contract, this
    # mirror avoids a circular import inside training loops.
    mse = float(torch.mean(((a - b) * 127.5) ** 2))
    if mse == 0:
        return 100.0
    return min(100.0, 10.0 * math.log10(255.0 ** 2 / mse))


def train_autoencoder(images: torch.Tensor, epochs: int, seed: int,
                      image_size: int = 64, c_lat: int = 4, width: int = 48,
                      batch_size: int = 64, lr: float = 2e-3,
                      latent_reg: float = 1e-3,
                      perceptual=None, perceptual_weight: float = 0.05,
                      holdout_fraction: float = 0.1,
                      min_images: int = 1000,
                      log_every: int = 100) -> tuple[AutoencoderModel, dict]:
    """Train encoder+decoder on pixel MSE (+ optional perceptual term).

    ``latent_reg`` softly pulls encoder outputs toward unit scale so the
    Gaussian prior and N(0,1) inversion initialization live in the same
    region as real latents.  Returns (model, report) with the held-out PSNR.
    """
    if images.dim() != 4 or images.shape[1] != 3:
        raise InvalidArgumentError(f"expected [N,3,H,W] images, got {tuple(images.shape)}")
    n = images.shape[0]
    if epochs > 0 and n < min_images:
        raise InvalidArgumentError(f"need at least {min_images} training images, got {n}")
    if images.shape[2] != image_size or images.shape[3] != image_size:
        raise InvalidArgumentError(
            f"images are {tuple(images.shape[2:])}, configured size is {image_size}"
        )

    model = init_autoencoder(image_size=image_size, c_lat=c_lat, width=width, seed=seed)
    n_hold = max(1, int(n * holdout_fraction)) if n else 0
    train_x, hold_x = images[: n - n_hold], images[n - n_hold :]

    report = {"seed": seed, "epochs": epochs, "n_train": int(train_x.shape[0]),
              "n_holdout": int(hold_x.shape[0]), "holdout_psnr": None, "losses": []}
    if epochs == 0:
        return model, report

    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    g = seeded_generator(seed)
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(train_x.shape[0], generator=g)
        for i in range(0, train_x.shape[0], batch_size):
            xb = train_x[perm[i : i + batch_size]]
            z = model.encoder(xb)
            rec = model.decoder(z)
            loss = F.mse_loss(rec, xb) + latent_reg * torch.mean(z ** 2)
            if perceptual is not None and perceptual_weight > 0:
                from .losses import perceptual as perc_fn
                loss = loss + perceptual_weight * perc_fn(perceptual, rec, xb)
            if not torch.isfinite(loss):
                raise TrainingFailureError(
                    f"autoencoder loss non-finite at epoch {epoch} step {step}",
                    diagnostics={"epoch": epoch, "step": step},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if step % log_every == 0:
                report["losses"].append((step, float(loss)))
            step += 1

    model.encoder.eval()
    model.decoder.eval()
    with torch.no_grad():
        psnrs = []
        for i in range(0, hold_x.shape[0], batch_size):
            xb = hold_x[i : i + batch_size]
            rec = model.decoder(model.encoder(xb))
            psnrs.extend(psnr_db(rec[j], xb[j]) for j in range(xb.shape[0]))
    report["holdout_psnr"] = float(np.mean(psnrs)) if psnrs else None
    return model, report


# ---------------------------------------------------------------------------
# Latent prior
# ---------------------------------------------------------------------------

@dataclass
class LatentPrior:
    """Gaussian fitted per latent channel over spatial positions."""

    mean: np.ndarray      # (c_lat,)
    cov: np.ndarray       # (c_lat, c_lat), symmetric PSD
    chol: np.ndarray      # lower Cholesky factor of cov (+ jitter if needed)
    latent_shape: tuple   # (c_lat, h, w)
    jitter: float = 0.0


def fit_prior(model: AutoencoderModel, images: torch.Tensor,
              batch_size: int = 64, min_images: int = 100) -> LatentPrior:
    if images.shape[0] < min_images:
        raise InvalidArgumentError(f"need at least {min_images} images to fit the prior")
    feats = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            z = model.encoder(images[i : i + batch_size])
            # treat every spatial position as one c_lat-dim sample
            feats.append(z.permute(0, 2, 3, 1).reshape(-1, z.shape[1]).numpy())
    samples = np.concatenate(feats, axis=0).astype(np.float64)
    mean = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    jitter = 0.0
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = 1e-6 * float(np.trace(cov)) / cov.shape[0] + 1e-12
        warnings.warn(f"latent covariance not positive definite; adding jitter {jitter:.3e}")
        chol = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    return LatentPrior(mean=mean, cov=cov, chol=chol,
                       latent_shape=model.latent_shape(), jitter=jitter)


def sample_latents(prior: LatentPrior, count: int, seed: int) -> torch.Tensor:
    """[count, c_lat, h, w] draws from the fitted Gaussian; seeded."""
    if count < 0:
        raise InvalidArgumentError("count must be >= 0")
    c, h, w = prior.latent_shape
    if count == 0:
        return torch.zeros((0, c, h, w))
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(size=(count * h * w, c))
    colored = white @ prior.chol.T + prior.mean
    z = colored.reshape(count, h, w, c).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))


def clone_decoder(decoder: Decoder) -> Decoder:
    return copy.deepcopy(decoder)
