"""Dual-branch residual network with central intensity pooling.

Each branch is ConvBlock -> pool -> ResBlock1 cluster -> pool -> ResBlock2
cluster -> global average pooling. The multi-view branch sees three adjacent
slices, the multi-scale branch sees three rescaled concentric crops. Branch
features and central intensity features are concatenated into one shared
two-way softmax classifier.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEPTH_REPEATS = {32: (4, 6), 83: (4, 23), 134: (8, 36)}
CONV_CHANNELS = 36
RES1_BOTTLENECK = (128, 128, 512)
RES2_BOTTLENECK = (256, 256, 1024)
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = 0.9 * running + 0.1 * batch
PRELU_INIT = 0.25


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 32
    cip_placement: int = 1
    cip_kernels: tuple[int, ...] = (1, 3)
    channel_divisor: int = 1
    view_size: int = 35
    n_scales: int = 3
    pooling: str = "max"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cip_kernels", tuple(int(k) for k in self.cip_kernels))
        if self.depth not in DEPTH_REPEATS:
            raise ValueError(f"depth must be one of {sorted(DEPTH_REPEATS)}, got {self.depth}")
        if not 0 <= self.cip_placement <= 4:
            raise ValueError("CIP placement must be in 0..4")
        if not self.cip_kernels or any(k < 1 or k % 2 == 0 for k in self.cip_kernels):
            raise ValueError("CIP kernel sizes must be odd and positive")
        if self.channel_divisor < 1:
            raise ValueError("channel divisor must be >= 1")
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.view_size % 2 == 0 or self.view_size < 5:
            raise ValueError("view size must be odd and >= 5")
        if self.n_scales < 1:
            raise ValueError("need at least one scale channel")

    @property
    def repeats(self) -> tuple[int, int]:
        return DEPTH_REPEATS[self.depth]

    def _div(self, c: int) -> int:
        return max(1, c // self.channel_divisor)

    @property
    def conv_channels(self) -> int:
        return self._div(CONV_CHANNELS)

    @property
    def res1(self) -> tuple[int, int, int]:
        return tuple(self._div(c) for c in RES1_BOTTLENECK)

    @property
    def res2(self) -> tuple[int, int, int]:
        return tuple(self._div(c) for c in RES2_BOTTLENECK)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cip_kernels"] = list(self.cip_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "cip_kernels": tuple(d.get("cip_kernels", (1, 3)))})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# central intensity pooling


def _window(size: int, k: int) -> slice:
    c = size // 2
    return slice(c - k // 2, c + k // 2 + 1)


class _CentralIntensityPool(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, kernels):
        h, w = x.shape[-2:]
        outs = [x[..., _window(h, k), _window(w, k)].mean(dim=(-2, -1)) for k in kernels]
        ctx.kernels = kernels
        ctx.in_shape = x.shape
        return torch.cat(outs, dim=-1)

    @staticmethod
    def backward(ctx, grad_out):
        shape = ctx.in_shape
        h, w = shape[-2:]
        n_ch = shape[-3]
        grad = grad_out.new_zeros(shape)
        for i, k in enumerate(ctx.kernels):
            g = grad_out[..., i * n_ch : (i + 1) * n_ch] / (k * k)
            grad[..., _window(h, k), _window(w, k)] += g[..., None, None]
        return grad, None


def cip(x, kernels: Sequence[int] = (1, 3)):
    """Mean of the centred k x k window per channel, for every kernel size k.

    ``x`` is ``(..., C, H, W)`` with odd H and W; the result is
    ``(..., len(kernels) * C)`` ordered kernel-major. NumPy input gives NumPy
    output.
    """
    as_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x)) if as_numpy else x
    if t.dim() < 3:
        raise ValueError("expected (..., C, H, W)")
    h, w = t.shape[-2:]
    if h % 2 == 0 or w % 2 == 0:
        raise ValueError(f"central pooling needs odd spatial size, got {h}x{w}")
    kernels = tuple(int(k) for k in kernels)
    if any(k % 2 == 0 or k < 1 or k > min(h, w) for k in kernels):
        raise ValueError(f"kernel sizes {kernels} must be odd and fit in {h}x{w}")
    out = _CentralIntensityPool.apply(t, kernels)
    return out.numpy() if as_numpy else out


def _odd_crop(x: torch.Tensor) -> torch.Tensor:
    """Drop the leading row/column of an even-sized map.

    After two stride-2 poolings the target voxel of a 35-pixel patch lands at
    index 4 of the 8 x 8 map, which is the centre of the trailing 7 x 7 crop.
    """
    h, w = x.shape[-2:]
    return x[..., h % 2 == 0 :, w % 2 == 0 :]


def central_pool(x: torch.Tensor, mode: str = "max") -> torch.Tensor:
    """2 x 2, stride-2 pooling without padding: side n -> floor(n / 2)."""
    if mode == "max":
        return F.max_pool2d(x, 2, 2)
    return F.avg_pool2d(x, 2, 2)


# ---------------------------------------------------------------------------
# building blocks


class ConvBNAct(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, k, padding=k // 2, bias=False),
            nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=1 - BN_MOMENTUM),
            nn.PReLU(c_out, init=PRELU_INIT),
        )


class ResBlock(nn.Module):
    """Bottleneck block: PReLU(shortcut(x) + [1x1 -> 3x3 -> 1x1](x))."""

    def __init__(self, c_in: int, bottleneck: tuple[int, int, int]):
        super().__init__()
        m1, m2, c_out = bottleneck
        self.residual = nn.Sequential(
            ConvBNAct(c_in, m1, 1),
            ConvBNAct(m1, m2, 3),
            nn.Conv2d(m2, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=1 - BN_MOMENTUM),
        )
        self.project = c_in != c_out
        if self.project:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, bias=False),
                nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=1 - BN_MOMENTUM),
            )
        else:
            self.shortcut = nn.Identity()
        self.act = nn.PReLU(c_out, init=PRELU_INIT)

    def forward(self, x):
        return self.act(self.shortcut(x) + self.residual(x))


def res_block(x: torch.Tensor, block: ResBlock) -> torch.Tensor:
    return block(x)


class Branch(nn.Module):
    def __init__(self, c_in: int, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.conv_channels
        n1, n2 = cfg.repeats
        self.conv_block = nn.Sequential(ConvBNAct(c_in, c, 3), ConvBNAct(c, c, 3))
        self.res1 = nn.Sequential(*[ResBlock(c if i == 0 else cfg.res1[2], cfg.res1) for i in range(n1)])
        self.res2 = nn.Sequential(*[ResBlock(cfg.res1[2] if i == 0 else cfg.res2[2], cfg.res2) for i in range(n2)])
        self.tap_channels = (c_in, c, cfg.res1[2], cfg.res2[2])

    def stages(self, x) -> list[torch.Tensor]:
        """Input plus the outputs of ConvBlock, ResBlock1 and ResBlock2 clusters."""
        s1 = self.conv_block(x)
        s2 = self.res1(central_pool(s1, self.cfg.pooling))
        s3 = self.res2(central_pool(s2, self.cfg.pooling))
        return [x, s1, s2, s3]

    def forward(self, x):
        maps = self.stages(x)
        feats = [maps[-1].mean(dim=(-2, -1))]
        for m in maps[: self.cfg.cip_placement]:
            feats.append(cip(_odd_crop(m), self.cfg.cip_kernels))
        return torch.cat(feats, dim=1)

    @property
    def feature_dim(self) -> int:
        k = len(self.cfg.cip_kernels)
        return self.cfg.res2[2] + k * sum(self.tap_channels[: self.cfg.cip_placement])


class DBResNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.multiview = Branch(3, cfg)
        self.multiscale = Branch(cfg.n_scales, cfg)
        self.head = nn.Linear(self.feature_dim, 2)
        self.is_trained = False
        _init_weights(self, cfg.seed)

    @property
    def feature_dim(self) -> int:
        return self.multiview.feature_dim + self.multiscale.feature_dim

    def features(self, mv, ms) -> torch.Tensor:
        return torch.cat([self.multiview(mv), self.multiscale(ms)], dim=1)

    def logits(self, mv, ms) -> torch.Tensor:
        s = self.cfg.view_size
        if mv.shape[1:] != (3, s, s) or ms.shape[1:] != (self.cfg.n_scales, s, s):
            raise ValueError(
                f"expected patches (N, 3, {s}, {s}) and (N, {self.cfg.n_scales}, {s}, {s}), "
                f"got {tuple(mv.shape)} and {tuple(ms.shape)}"
            )
        return self.head(self.features(mv, ms))

    def forward(self, mv, ms) -> torch.Tensor:
        """Class probabilities (background, nodule) per sample."""
        return torch.softmax(self.logits(mv, ms), dim=1)

    @torch.no_grad()
    def predict(self, mv, ms, batch_size: int = 256) -> np.ndarray:
        """Nodule probability for NumPy patch batches, in inference mode."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        out = []
        for i in range(0, len(mv), batch_size):
            a = torch.as_tensor(mv[i : i + batch_size], dtype=dtype)
            b = torch.as_tensor(ms[i : i + batch_size], dtype=dtype)
            out.append(self(a, b)[:, 1].numpy())
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros(0)


def _init_weights(net: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(int(seed))
    for mod in net.modules():
        if isinstance(mod, nn.Conv2d):
            nn.init.kaiming_normal_(mod.weight, a=PRELU_INIT, nonlinearity="leaky_relu", generator=g)
        elif isinstance(mod, nn.Linear):
            nn.init.normal_(mod.weight, std=mod.in_features ** -0.5, generator=g)
            nn.init.zeros_(mod.bias)


def build(cfg: NetworkConfig = NetworkConfig()) -> DBResNet:
    return DBResNet(cfg)


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def stage_shapes(net: DBResNet) -> dict[str, list[tuple[int, int, int]]]:
    """(channels, height, width) of each stage output per branch, for one patch."""
    s = net.cfg.view_size
    out = {}
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for name, branch, c_in in (("multiview", net.multiview, 3), ("multiscale", net.multiscale, net.cfg.n_scales)):
            maps = branch.stages(torch.zeros(1, c_in, s, s))
            out[name] = [tuple(m.shape[1:]) for m in maps[1:]]
    net.train(was_training)
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# <stem>.ckpt.json holds the config, its sha256 digest, training metadata and
# an ordered tensor table (name, dtype, shape, byte offset, byte count);
# <stem>.ckpt.bin is the little-endian concatenation of those tensors in table
# order, i.e. the network state_dict order.


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    state: dict
    epoch: int = 0
    val_loss: float = float("nan")
    seed: int = 0
    history: list = field(default_factory=list)

    def restore(self) -> DBResNet:
        net = build(self.config)
        net.load_state_dict(self.state)
        net.is_trained = True
        net.eval()
        return net


_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def _ckpt_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".ckpt.json", ".ckpt.bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(name + ".ckpt.json"), path.with_name(name + ".ckpt.bin")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    meta_path, bin_path = _ckpt_paths(path)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, t in ckpt.state.items():
        t = t.detach().cpu()
        code = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy(), dtype=code).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    bin_path.write_bytes(b"".join(chunks))
    meta = {
        "format": "dbresnet-checkpoint",
        "version": 1,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.digest(),
        "epoch": ckpt.epoch,
        "validation": {"metric": "cross_entropy", "value": ckpt.val_loss},
        "seed": ckpt.seed,
        "history": ckpt.history,
        "tensors": table,
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return meta_path


def load_checkpoint(path) -> Checkpoint:
    meta_path, bin_path = _ckpt_paths(path)
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "dbresnet-checkpoint":
        raise CheckpointError(f"{meta_path}: not a checkpoint")
    cfg = NetworkConfig.from_dict(meta["config"])
    if cfg.digest() != meta.get("config_hash"):
        raise CheckpointError(f"{meta_path}: config hash mismatch")
    payload = bin_path.read_bytes()
    expected = build(cfg).state_dict()
    state = {}
    for entry in meta["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointError(f"{meta_path}: unexpected tensor {name}")
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{bin_path}: truncated at tensor {name}")
        arr = np.frombuffer(payload[start : start + n], dtype=entry["dtype"]).reshape(entry["shape"])
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{meta_path}: shape mismatch for {name}")
        state[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{meta_path}: missing tensors {sorted(missing)[:3]}")
    return Checkpoint(
        config=cfg,
        state=state,
        epoch=int(meta.get("epoch", 0)),
        val_loss=float(meta.get("validation", {}).get("value", float("nan"))),
        seed=int(meta.get("seed", 0)),
        history=list(meta.get("history", [])),
    )
