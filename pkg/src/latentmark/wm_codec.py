"""Bitstring watermarks, the extractor network, and binomial detection.

The detector works on integer matched-bit counts: an image is flagged when
the count m satisfies m >= k_star (double-tail mode additionally flags
m <= n - k_star).  k_star is the smallest count whose null false-positive
rate, under independent fair bits, stays within the configured bound.
tau = k_star / n_bits is reported alongside for comparability with
threshold-style write-ups.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InfeasibleThresholdError, InvalidArgumentError
from .util import as_batch


# ---------------------------------------------------------------------------
# Watermark bitstrings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Watermark:
    """Fixed-length sequence of {0,1} bits."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) == 0:
            raise InvalidArgumentError("watermark must have at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise InvalidArgumentError("watermark bits must be exactly 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    @classmethod
    def random(cls, n_bits: int, seed: int) -> "Watermark":
        if n_bits <= 0:
            raise InvalidArgumentError("n_bits must be positive")
        rng = np.random.default_rng(seed)
        return cls(tuple(int(b) for b in rng.integers(0, 2, size=n_bits)))

    @classmethod
    def from_string(cls, s: str) -> "Watermark":
        if not s or any(c not in "01" for c in s):
            raise InvalidArgumentError(f"watermark string must be nonempty 0/1, got {s!r}")
        return cls(tuple(int(c) for c in s))

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    def complement(self) -> "Watermark":
        return Watermark(tuple(1 - b for b in self.bits))

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)


def bitwise_accuracy(w1: Watermark, w2: Watermark) -> float:
    """Fraction of positions where the two watermarks agree."""
    if len(w1) != len(w2):
        raise InvalidArgumentError(
            f"watermark length mismatch: {len(w1)} vs {len(w2)}"
        )
    matches = sum(a == b for a, b in zip(w1.bits, w2.bits))
    return matches / len(w1)


# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------

MODE_SINGLE = "single-tail"
MODE_DOUBLE = "double-tail"


@dataclass(frozen=True)
class DetectorConfig:
    fpr_bound: float = 1e-4
    n_bits: int = 48
    mode: str = MODE_DOUBLE

    def __post_init__(self):
        if not (0.0 < self.fpr_bound < 1.0):
            raise InvalidArgumentError("fpr_bound must lie in the open interval (0,1)")
        if self.n_bits <= 0:
            raise InvalidArgumentError("n_bits must be positive")
        if self.mode not in (MODE_SINGLE, MODE_DOUBLE):
            raise InvalidArgumentError(f"unknown detector mode {self.mode!r}")


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_upper_tail(n: int, k: int) -> float:
    """log P(X >= k) for X ~ Binomial(n, 1/2), exact summation in log space."""
    if k <= 0:
        return 0.0
    if k > n:
        return -math.inf
    terms = [_log_binom(n, j) for j in range(k, n + 1)]
    m = max(terms)
    s = sum(math.exp(t - m) for t in terms)
    return m + math.log(s) - n * math.log(2.0)


def detector_fpr(cfg: DetectorConfig, k: int) -> float:
    """Exact null FPR of the rule "m >= k (or m <= n-k)" under fair bits."""
    n = cfg.n_bits
    if k < 0 or k > n:
        raise InvalidArgumentError(f"k must lie in [0, {n}]")
    upper = math.exp(_log_upper_tail(n, k))
    if cfg.mode == MODE_SINGLE:
        return min(1.0, upper)
    if k <= n - k:
        return 1.0  # the two tails cover every count
    return min(1.0, 2.0 * upper)


def solve_threshold(cfg: DetectorConfig) -> tuple[int, float]:
    """Smallest k whose null FPR stays within cfg.fpr_bound, plus tau = k/n."""
    n = cfg.n_bits
    for k in range(n + 1):
        if detector_fpr(cfg, k) <= cfg.fpr_bound:
            return k, k / n
    raise InfeasibleThresholdError(
        f"no threshold achieves FPR <= {cfg.fpr_bound} at n_bits={n} "
        f"(even k={n} has FPR {detector_fpr(cfg, n):.3e})"
    )


def detect(w_decoded: Watermark, w_g: Watermark, cfg: DetectorConfig) -> tuple[bool, float]:
    """Returns (watermarked?, bitwise accuracy) for one decoded message."""
    if len(w_decoded) != cfg.n_bits or len(w_g) != cfg.n_bits:
        raise InvalidArgumentError(
            f"watermark lengths ({len(w_decoded)}, {len(w_g)}) must equal cfg.n_bits={cfg.n_bits}"
        )
    ba = bitwise_accuracy(w_decoded, w_g)
    m = round(ba * cfg.n_bits)
    k_star, _ = solve_threshold(cfg)
    flagged = m >= k_star
    if cfg.mode == MODE_DOUBLE:
        flagged = flagged or m <= cfg.n_bits - k_star
    return flagged, ba


def null_fpr_monte_carlo(cfg: DetectorConfig, trials: int, seed: int) -> float:
    """Empirical FPR under the iid fair-bit null, for validating solve_threshold."""
    if trials <= 0:
        raise InvalidArgumentError("trials must be positive")
    k_star, _ = solve_threshold(cfg)
    rng = np.random.default_rng(seed)
    m = rng.binomial(cfg.n_bits, 0.5, size=trials)
    hits = m >= k_star
    if cfg.mode == MODE_DOUBLE:
        hits |= m <= cfg.n_bits - k_star
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# Extractor network (the watermarking decoder side of detection)
# ---------------------------------------------------------------------------

class ExtractorModel(nn.Module):
    """Small conv net mapping an image [B,3,H,W] to n_bits logits.

    Stride-2 blocks then global average pooling, so any input of at least
    ``min_size`` pixels per side is supported.
    """

    ARCH_NAME = "wm_codec.extractor"

    def __init__(self, n_bits: int = 48, widths=(32, 64, 128)):
        super().__init__()
        if n_bits <= 0:
            raise InvalidArgumentError("n_bits must be positive")
        self.n_bits = n_bits
        self.widths = tuple(int(w) for w in widths)
        layers = []
        c_in = 3
        for w in self.widths:
            layers += [nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.SiLU()]
            c_in = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, n_bits)
        self.min_size = 2 ** len(self.widths)

    def descriptor(self) -> dict:
        return {"name": self.ARCH_NAME, "n_bits": self.n_bits, "widths": list(self.widths)}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "ExtractorModel":
        return cls(n_bits=desc["n_bits"], widths=tuple(desc["widths"]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InvalidArgumentError(f"expected [B,3,H,W] input, got {tuple(x.shape)}")
        if x.shape[2] < self.min_size or x.shape[3] < self.min_size:
            raise InvalidArgumentError(
                f"input {tuple(x.shape[2:])} below minimum supported size {self.min_size}"
            )
        h = self.features(x)
        h = h.mean(dim=(2, 3))  # global average pool
        return self.head(h)


def extract_logits(model: ExtractorModel, images: torch.Tensor) -> torch.Tensor:
    batch, _ = as_batch(images)
    with torch.no_grad():
        return model(batch)


def extract(model: ExtractorModel, image: torch.Tensor) -> Watermark:
    """Decode one image to a watermark: bit i = 1 iff logit i > 0."""
    batch, single = as_batch(image)
    if not single:
        raise InvalidArgumentError("extract takes a single (C,H,W) image; see extract_batch")
    logits = extract_logits(model, batch)[0]
    return Watermark(tuple(int(v > 0) for v in logits.tolist()))


def extract_batch(model: ExtractorModel, images: torch.Tensor, batch_size: int = 64):
    """Decode a batch [N,3,H,W]; returns a list of Watermarks."""
    batch, _ = as_batch(images)
    out = []
    for i in range(0, batch.shape[0], batch_size):
        logits = extract_logits(model, batch[i : i + batch_size])
        out.extend(Watermark(tuple(int(v > 0) for v in row.tolist())) for row in logits)
    return out


def empirical_fpr(model: ExtractorModel, clean_images: torch.Tensor,
                  w_g: Watermark, cfg: DetectorConfig) -> float:
    """Fraction of clean (non-watermarked) images the detector flags."""
    batch, _ = as_batch(clean_images)
    if batch.shape[0] == 0:
        raise InvalidArgumentError("empirical_fpr needs at least one image")
    solve_threshold(cfg)  # surface infeasibility before any work
    decoded = extract_batch(model, batch)
    hits = sum(1 for w in decoded if detect(w, w_g, cfg)[0])
    return hits / batch.shape[0]


def random_extractor(n_bits: int, seed: int, widths=(32, 64, 128)) -> ExtractorModel:
    """Freshly initialized extractor with seeded parameters."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ExtractorModel(n_bits=n_bits, widths=widths)
