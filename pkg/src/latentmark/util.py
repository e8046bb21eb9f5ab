"""Seeding, hashing, canonical-range conversion, and atomic file helpers."""

import hashlib
import json
import os
import tempfile

import numpy as np
import torch

from .errors import InvalidArgumentError

# Canonical image range is [-1, 1]; 8-bit files map linearly onto it.
CANON_MIN = -1.0
CANON_MAX = 1.0


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from arbitrary parts (ints, str, bytes)."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bytes):
            h.update(p)
        else:
            h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def content_seed(seed: int, x: torch.Tensor) -> int:
    """Per-image seed keyed on pixel content, so results do not depend on
    where an image sits in a batch or dataset."""
    arr = np.ascontiguousarray(x.detach().cpu().numpy(), dtype=np.float32)
    return derive_seed(seed, arr.tobytes())


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    """Deterministic digest over a module's full state (params + buffers)."""
    h = hashlib.sha256()
    sd = module.state_dict()
    for name in sorted(sd):
        t = sd[name]
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_uint8(x) -> np.ndarray:
    """Canonical [-1,1] floats -> 8-bit levels, round half away from zero."""
    arr = np.asarray(x.detach().cpu().numpy() if torch.is_tensor(x) else x, dtype=np.float64)
    v = (arr + 1.0) * 127.5
    v = np.clip(v, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8)  # half-up == half-away for v >= 0


def from_uint8(u) -> torch.Tensor:
    arr = np.asarray(u, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0)


def check_canonical(x: torch.Tensor, name: str = "image") -> None:
    if not torch.isfinite(x).all():
        raise InvalidArgumentError(f"{name} contains non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if lo < CANON_MIN - 1e-4 or hi > CANON_MAX + 1e-4:
        raise InvalidArgumentError(
            f"{name} outside canonical range [-1,1]: min={lo:.4f} max={hi:.4f}"
        )


def as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Promote (C,H,W) to (1,C,H,W); returns (batch, was_single)."""
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise InvalidArgumentError(f"expected 3D or 4D tensor, got {tuple(x.shape)}")
