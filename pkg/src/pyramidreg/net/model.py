"""Network configuration, parameter initialisation and the coarse-to-fine forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, ParamStore
from ..warp import _integrate, _upsample
from . import attention, decoder, encoder, fusion


@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    fused: int = 8
    radius: int = 1
    window: tuple[int, int, int] = (2, 2, 2)
    mlp_ratio: int = 2
    idm_hidden: int = 16
    cwam_width: int = 16
    se_ratio: int = 4
    steps: int = 7
    alpha: float = 2.0
    ln_eps: float = 1e-5

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for key in ("channels", "window"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: NetConfig | None = None, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Seeded parameters; every flow-prediction head starts at exactly zero."""
    cfg = cfg or NetConfig()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    encoder.build(store, rng, cfg.channels, dtype=dtype)
    fusion.build(store, rng, cfg.channels, cfg.fused, dtype=dtype)
    attention.build_lgam(store, rng, cfg.channels[-1], cfg.fused, cfg.radius, cfg.mlp_ratio, dtype=dtype)
    for level in range(len(cfg.channels) - 1, 0, -1):
        decoder.build_fifm(store, rng, level, cfg.channels[level - 1], cfg.fused, cfg.radius,
                           cfg.idm_hidden, cfg.cwam_width, cfg.se_ratio, dtype=dtype)
    return store


def flow_heads(store: ParamStore) -> list[str]:
    return [p for p in store.paths() if p.rsplit(".", 1)[0].endswith(("flow", "field"))]


@dataclass
class ForwardResult:
    phi: Node
    levels: list[Node] = field(default_factory=list)
    raw: Node | None = None


def forward(p: ParamStore, fixed, moving, cfg: NetConfig | None = None) -> ForwardResult:
    """Full-resolution field plus the per-level fields ``[phi_4, phi_3, phi_2, phi_1]``."""
    cfg = cfg or NetConfig()
    fixed, moving = ad.as_node(fixed), ad.as_node(moving)
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed {fixed.shape} and moving {moving.shape} differ")
    nlev = len(cfg.channels)
    F = encoder.encode(p, fixed, nlev)
    M = encoder.encode(p, moving, nlev)
    C = [fusion.msfm(p, F, M, i) for i in range(1, nlev + 1)]

    raw = attention.lgam(p, F[-1], M[-1], C[-1], cfg.radius, cfg.window, cfg.ln_eps)
    phi = _integrate(raw, cfg.steps)
    levels = [phi]
    for i in range(nlev - 1, 0, -1):
        phi = decoder.fifm(p, i, F[i - 1], M[i - 1], C[i - 1], phi, cfg.radius, cfg.steps, cfg.alpha)
        levels.append(phi)
    full = _upsample(phi, cfg.alpha, fixed.shape[1:])
    return ForwardResult(full, levels, raw)
