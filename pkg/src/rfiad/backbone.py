"""A frozen, seeded toy vision transformer and its prompt-adapted forward pass.

Token layout for the plain pass is ``[cls, patch_1 .. patch_Np]``. The
prompted pass prepends ``L_p`` prompt tokens in front of that sequence; their
outputs are dropped. The class-token output is the image-level feature and
the patch outputs are the pixel-level features, all rows L2-normalized.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    normalize_rows,
    softmax,
)


class ConfigError(ValueError):
    pass



@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "dim", "depth", "heads", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"backbone.patch_size={self.patch_size} does not divide image_size={self.image_size}")
        if self.dim % self.heads:
            raise ConfigError(f"backbone.dim={self.dim} is not divisible by heads={self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureBundle:
    image: np.ndarray   # (1, d)
    patches: np.ndarray  # (N_p, d)


@dataclass
class _Block:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class Backbone:
    """Frozen weights plus the forward passes. Never mutated after init."""

    def __init__(self, cfg: BackboneConfig, patch_proj: Tensor, patch_bias: Tensor,
                 cls_token: Tensor, pos_embed: Tensor, blocks: list[_Block], final_bias: Tensor):
        self.cfg = cfg
        self.patch_proj = patch_proj
        self.patch_bias = patch_bias
        self.cls_token = cls_token
        self.pos_embed = pos_embed
        self.blocks = blocks
        self.final_bias = final_bias

    def weights(self) -> list[Tensor]:
        out = [self.patch_proj, self.patch_bias, self.cls_token, self.pos_embed]
        for b in self.blocks:
            out += [b.wq, b.wk, b.wv, b.wo, b.w1, b.b1, b.w2, b.b2]
        out.append(self.final_bias)
        return out

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for w in self.weights():
            h.update(np.ascontiguousarray(w.data).tobytes())
        return h.hexdigest()

    def encode(self, image) -> FeatureBundle:
        return _bundle(self.forward(image))

    def encode_with_prompt(self, image, prompt) -> FeatureBundle:
        return _bundle(self.forward(image, prompt))

    def forward(self, image, prompt=None) -> tuple[Tensor, Tensor]:
        """Differentiable forward pass returning (k_I (1, d), k_P (N_p, d))."""
        cfg = self.cfg
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"image shape {img.shape} does not match ({cfg.image_size}, {cfg.image_size})")
        patches = Tensor(patchify(img, cfg.patch_size))
        tokens = patches @ self.patch_proj + self.patch_bias
        x = concat([self.cls_token, tokens], axis=0) + self.pos_embed
        n_prompt = 0
        if prompt is not None:
            if not isinstance(prompt, Tensor):
                prompt = Tensor(prompt)
            if prompt.ndim != 2 or prompt.shape[1] != cfg.dim:
                raise ConfigError(f"prompt must be (L_p, {cfg.dim}), got {prompt.shape}")
            n_prompt = prompt.shape[0]
            x = concat([prompt, x], axis=0)
        for blk in self.blocks:
            x = x + _attention(layer_norm(x), blk, cfg.heads)
            h = layer_norm(x)
            x = x + gelu(h @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
        x = layer_norm(x) + self.final_bias
        k_img = normalize_rows(x[n_prompt:n_prompt + 1])
        k_pix = normalize_rows(x[n_prompt + 1:])
        return k_img, k_pix


def _attention(x: Tensor, blk: _Block, heads: int) -> Tensor:
    n, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(n, heads, dh).transpose(1, 0, 2)

    q, k, v = split(x @ blk.wq), split(x @ blk.wk), split(x @ blk.wv)
    att = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ blk.wo


def _bundle(features: tuple[Tensor, Tensor]) -> FeatureBundle:
    k_img, k_pix = features
    return FeatureBundle(image=k_img.numpy(), patches=k_pix.numpy())


def patchify(image, patch: int) -> np.ndarray:
    """Split an (H, W) image into raster-ordered, row-major flattened patches."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ConfigError(f"expected a 2-d image, got shape {img.shape}")
    h, w = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"patch size {patch} does not divide image shape {img.shape}")
    gh, gw = h // patch, w // patch
    return (img.reshape(gh, patch, gw, patch)
               .transpose(0, 2, 1, 3)
               .reshape(gh * gw, patch * patch))


def init_backbone(cfg: BackboneConfig) -> Backbone:
    """Draw all weights from a seeded uniform(-1/sqrt(d), 1/sqrt(d))."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    bound = 1.0 / np.sqrt(d)

    def w(*shape) -> Tensor:
        return Tensor(rng.uniform(-bound, bound, size=shape))

    patch_proj = w(cfg.patch_size ** 2, d)
    patch_bias = w(d)
    cls_token = w(1, d)
    pos_embed = w(cfg.num_patches + 1, d)
    hidden = d * cfg.mlp_ratio
    blocks = [
        _Block(wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
               w1=w(d, hidden), b1=w(hidden), w2=w(hidden, d), b2=w(d))
        for _ in range(cfg.depth)
    ]
    final_bias = w(d)
    return Backbone(cfg, patch_proj, patch_bias, cls_token, pos_embed, blocks, final_bias)
