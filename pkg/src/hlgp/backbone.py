"""Small Vision Transformer with prefix-style key/value prompt injection.

Prompts are concatenated to the per-head attention keys and values only —
the token stream itself never grows, so output length equals input length
for any prompt length. With no prompts the network is exactly the frozen
pretrained function.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .rand import rng_for
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_layers: int = 12
    num_heads: int = 4
    mlp_ratio: float = 2.0
    prompt_length: int = 10

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels,
               self.embed_dim, self.num_heads) < 1:
            raise ConfigError("backbone dimensions must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide "
                f"image_size {self.image_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class LayerPrompt:
    """Key/value prompt pair for one attention layer.

    Shapes are (L, D) for a shared prompt or (B, L, D) for per-sample
    prompts (used by weighted fusion at inference time).
    """

    key_prompt: Tensor
    value_prompt: Tensor


class FrozenBackbone:
    """ViT feature extractor; all tensors non-trainable once frozen."""

    def __init__(self, cfg: ViTConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        self.sample_forwards = 0  # instrumentation: one count per sample per pass

    # -- construction -------------------------------------------------------

    @classmethod
    def random_init(cls, cfg: ViTConfig, seed: int, trainable: bool = True):
        rng = rng_for(seed, "backbone")
        d, dm = cfg.embed_dim, cfg.mlp_dim
        patch_in = cfg.channels * cfg.patch_size * cfg.patch_size

        # fan-in scaled init: at desk-scale widths a fixed small std would
        # leave attention logits far weaker than a full-size ViT's
        def w(name, shape, std=None):
            std = std if std is not None else 1.0 / np.sqrt(shape[0])
            return Tensor(rng.normal(0.0, std, size=shape), trainable, name)

        def zeros(name, shape):
            return Tensor(np.zeros(shape), trainable, name)

        def ones(name, shape):
            return Tensor(np.ones(shape), trainable, name)

        t = {
            "patch_proj.weight": w("patch_proj.weight", (patch_in, d)),
            "patch_proj.bias": zeros("patch_proj.bias", (d,)),
            "cls_token": w("cls_token", (1, d), std=0.02),
            "pos_embed": w("pos_embed", (cfg.num_patches + 1, d), std=0.02),
            "final_ln.gain": ones("final_ln.gain", (d,)),
            "final_ln.bias": zeros("final_ln.bias", (d,)),
        }
        for i in range(cfg.num_layers):
            p = f"blocks.{i}."
            t[p + "ln1.gain"] = ones(p + "ln1.gain", (d,))
            t[p + "ln1.bias"] = zeros(p + "ln1.bias", (d,))
            t[p + "qkv.weight"] = w(p + "qkv.weight", (d, 3 * d))
            t[p + "qkv.bias"] = zeros(p + "qkv.bias", (3 * d,))
            t[p + "proj.weight"] = w(p + "proj.weight", (d, d))
            t[p + "proj.bias"] = zeros(p + "proj.bias", (d,))
            t[p + "ln2.gain"] = ones(p + "ln2.gain", (d,))
            t[p + "ln2.bias"] = zeros(p + "ln2.bias", (d,))
            t[p + "mlp.fc1.weight"] = w(p + "mlp.fc1.weight", (d, dm))
            t[p + "mlp.fc1.bias"] = zeros(p + "mlp.fc1.bias", (dm,))
            t[p + "mlp.fc2.weight"] = w(p + "mlp.fc2.weight", (dm, d))
            t[p + "mlp.fc2.bias"] = zeros(p + "mlp.fc2.bias", (d,))
        return cls(cfg, t)

    # -- state --------------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.trainable}

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.freeze()

    def is_frozen(self) -> bool:
        return not any(t.trainable for t in self.tensors.values())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = self.tensors[name]
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def _as_batch(self, images) -> tuple[Tensor, bool]:
        if isinstance(images, Tensor):
            x = images
        else:
            x = Tensor(images)
        if x.data.ndim == 3:
            return T.reshape(x, (1,) + x.shape), True
        if x.data.ndim == 4:
            return x, False
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W) image, got {x.shape}")

    def embed(self, images) -> Tensor:
        """Patchify + project + prepend class token + add position embedding."""
        cfg = self.cfg
        x, single = self._as_batch(images)
        b, c, h, w = x.shape
        if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"image shape {(c, h, w)} does not match config "
                f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
            )
        g, p = cfg.grid, cfg.patch_size
        x = T.reshape(x, (b, c, g, p, g, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # B,gy,gx,C,py,px
        x = T.reshape(x, (b, cfg.num_patches, c * p * p))
        tok = T.add(T.matmul(x, self.tensors["patch_proj.weight"]),
                    self.tensors["patch_proj.bias"])
        cls = T.broadcast_to(T.reshape(self.tensors["cls_token"], (1, 1, cfg.embed_dim)),
                             (b, 1, cfg.embed_dim))
        tok = T.concat([cls, tok], axis=1)
        tok = T.add(tok, self.tensors["pos_embed"])
        return T.reshape(tok, tok.shape[1:]) if single else tok

    def _heads(self, x: Tensor, b: int) -> Tensor:
        cfg = self.cfg
        t = x.shape[-2]
        x = T.reshape(x, (b, t, cfg.num_heads, cfg.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def _prompt_heads(self, prompt: Tensor, b: int, what: str) -> Tensor:
        cfg = self.cfg
        if prompt.data.ndim == 2:
            l, d = prompt.shape
            if d != cfg.embed_dim:
                raise DimensionError(
                    f"{what} dim {d} does not match embed_dim {cfg.embed_dim}"
                )
            p = T.reshape(prompt, (l, cfg.num_heads, cfg.head_dim))
            p = T.transpose(p, (1, 0, 2))
            return T.broadcast_to(T.reshape(p, (1,) + p.shape),
                                  (b, cfg.num_heads, l, cfg.head_dim))
        if prompt.data.ndim == 3:
            pb, l, d = prompt.shape
            if d != cfg.embed_dim:
                raise DimensionError(
                    f"{what} dim {d} does not match embed_dim {cfg.embed_dim}"
                )
            if pb != b:
                raise DimensionError(
                    f"{what} batch {pb} does not match input batch {b}"
                )
            p = T.reshape(prompt, (pb, l, cfg.num_heads, cfg.head_dim))
            return T.transpose(p, (0, 2, 1, 3))
        raise DimensionError(f"{what} must be (L,D) or (B,L,D), got {prompt.shape}")

    def attention_with_prefix(self, x: Tensor, layer: int,
                              prompt: Optional[LayerPrompt]) -> Tensor:
        """Multi-head self-attention over T queries and T+L keys/values."""
        cfg = self.cfg
        b, t, d = x.shape
        pre = f"blocks.{layer}."
        qkv = T.add(T.matmul(x, self.tensors[pre + "qkv.weight"]),
                    self.tensors[pre + "qkv.bias"])
        q = self._heads(T.slice_axis(qkv, 2, 0, d), b)
        k = self._heads(T.slice_axis(qkv, 2, d, 2 * d), b)
        v = self._heads(T.slice_axis(qkv, 2, 2 * d, 3 * d), b)
        if prompt is not None:
            k = T.concat([self._prompt_heads(prompt.key_prompt, b, "key prompt"), k],
                         axis=2)
            v = T.concat([self._prompt_heads(prompt.value_prompt, b, "value prompt"), v],
                         axis=2)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(cfg.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return T.add(T.matmul(ctx, self.tensors[pre + "proj.weight"]),
                     self.tensors[pre + "proj.bias"])

    def _block(self, x: Tensor, layer: int, prompt: Optional[LayerPrompt]) -> Tensor:
        pre = f"blocks.{layer}."
        h = T.layer_norm(x, self.tensors[pre + "ln1.gain"], self.tensors[pre + "ln1.bias"])
        x = T.add(x, self.attention_with_prefix(h, layer, prompt))
        h = T.layer_norm(x, self.tensors[pre + "ln2.gain"], self.tensors[pre + "ln2.bias"])
        h = T.add(T.matmul(h, self.tensors[pre + "mlp.fc1.weight"]),
                  self.tensors[pre + "mlp.fc1.bias"])
        h = T.gelu(h)
        h = T.add(T.matmul(h, self.tensors[pre + "mlp.fc2.weight"]),
                  self.tensors[pre + "mlp.fc2.bias"])
        return T.add(x, h)

    def forward_features(self, images,
                         prompts: Optional[Sequence[Optional[LayerPrompt]]] = None
                         ) -> Tensor:
        """Final-layernormed class-token embedding, (D,) or (B, D)."""
        cfg = self.cfg
        if prompts:
            if len(prompts) != cfg.num_layers:
                raise ContractError(
                    f"got {len(prompts)} layer prompts for {cfg.num_layers} layers"
                )
        else:
            prompts = [None] * cfg.num_layers
        x, single = self._as_batch(images)
        tok = self.embed(x)
        b = tok.shape[0]
        for i in range(cfg.num_layers):
            tok = self._block(tok, i, prompts[i])
        tok = T.layer_norm(tok, self.tensors["final_ln.gain"],
                           self.tensors["final_ln.bias"])
        cls = T.reshape(T.slice_axis(tok, 1, 0, 1), (b, cfg.embed_dim))
        self.sample_forwards += b
        return T.reshape(cls, (cfg.embed_dim,)) if single else cls
