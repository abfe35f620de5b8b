"""Four-stage pyramid encoder and the token-mixing decoders.

The encoder downsamples with strides {4, 8, 16, 32}; each stage applies a
(possibly deformable) patch embedding followed by pre-norm self-attention
blocks with per-stage spatial reduction of keys/values, then a
feed-forward sublayer, both with residual connections.

Decoders re-embed every stage to a common width, mix tokens, upsample all
stages to the stride-4 grid and sum them; the fused map is normalized and
projected to class logits, which are then upsampled to input size. The
fused (pre-head) map doubles as the feature space for prototypical
adaptation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .deform import (ChannelMixer, DeformablePatchEmbed, DeformableTokenMixer,
                     StandardPatchEmbed, pool_mixer)
from .nn import LayerNorm, Linear, Module, linear_nchw


@dataclass
class ModelConfig:
    num_classes: int
    stage_depths: tuple = (2, 2, 2, 2)
    stage_channels: tuple = (64, 128, 320, 512)
    strides: tuple = (4, 8, 16, 32)
    c_emb: int = 128
    heads: tuple = (1, 2, 5, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    patch_sizes: tuple = (7, 3, 3, 3)
    mlp_ratio: int = 4
    decoder: str = "v2"  # {"v1", "v2"}
    patch_embed: str = "deformable"  # {"standard", "deformable"}
    r: int | None = 4
    dpe_offset_mode: str = "per_tap"  # {"per_tap", "shared"}
    decoder_deformable: bool = True
    share_cx: bool = False

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_channels = tuple(self.stage_channels)
        self.strides = tuple(self.strides)
        self.heads = tuple(self.heads)
        self.sr_ratios = tuple(self.sr_ratios)
        self.patch_sizes = tuple(self.patch_sizes)
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.c_emb <= 0:
            raise ValueError(f"c_emb must be positive, got {self.c_emb}")
        if any(a >= b for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if self.decoder not in ("v1", "v2"):
            raise ValueError(f"decoder must be 'v1' or 'v2', got {self.decoder!r}")
        if self.patch_embed not in ("standard", "deformable"):
            raise ValueError(f"patch_embed must be 'standard' or 'deformable', got {self.patch_embed!r}")

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


_PRESETS = {
    # toy: desk-scale training on 64x128 frames
    "toy": dict(stage_depths=(2, 2, 2, 2), stage_channels=(16, 32, 64, 128),
                c_emb=32, heads=(1, 2, 4, 8)),
    # reference presets mirror the published architecture shapes
    "tiny": dict(stage_depths=(2, 2, 2, 2), stage_channels=(64, 128, 320, 512),
                 c_emb=128, heads=(1, 2, 5, 8)),
    "small": dict(stage_depths=(3, 4, 6, 3), stage_channels=(64, 128, 320, 512),
                  c_emb=128, heads=(1, 2, 5, 8)),
}


def preset_config(name, num_classes, **overrides):
    if name not in _PRESETS:
        raise ValueError(f"unknown preset '{name}' (choose from {sorted(_PRESETS)})")
    kwargs = dict(_PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(num_classes=num_classes, **kwargs)


class Attention(Module):
    """Multi-head self-attention with average-pool spatial reduction of K/V."""

    def __init__(self, rng, channels, heads, sr_ratio):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.head_dim = channels // heads
        self.q = Linear(rng, channels, channels)
        self.k = Linear(rng, channels, channels)
        self.v = Linear(rng, channels, channels)
        self.proj = Linear(rng, channels, channels)

    def _split_heads(self, t, n, length):
        t = t.reshape((n, length, self.heads, self.head_dim))
        return ad.transpose(t, (0, 2, 1, 3))

    def __call__(self, x):
        n, c, h, w = x.shape
        tokens = ad.transpose(x, (0, 2, 3, 1)).reshape((n, h * w, c))
        q = self._split_heads(self.q(tokens), n, h * w)

        if self.sr_ratio > 1:
            red = ad.avg_pool2d(x, kernel=self.sr_ratio, stride=self.sr_ratio)
            lr = red.shape[2] * red.shape[3]
            kv_tokens = ad.transpose(red, (0, 2, 3, 1)).reshape((n, lr, c))
        else:
            lr = h * w
            kv_tokens = tokens
        key = self._split_heads(self.k(kv_tokens), n, lr)
        val = self._split_heads(self.v(kv_tokens), n, lr)

        scores = ad.matmul(q, ad.transpose(key, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.transpose(ad.matmul(attn, val), (0, 2, 1, 3)).reshape((n, h * w, c))
        out = self.proj(ctx)
        return ad.transpose(out.reshape((n, h, w, c)), (0, 3, 1, 2))


class FeedForward(Module):
    def __init__(self, rng, channels, ratio):
        hidden = channels * ratio
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)

    def __call__(self, x):
        n, c, h, w = x.shape
        t = ad.transpose(x, (0, 2, 3, 1)).reshape((n * h * w, c))
        t = self.fc2(ad.silu(self.fc1(t)))
        return ad.transpose(t.reshape((n, h, w, c)), (0, 3, 1, 2))


class EncoderBlock(Module):
    def __init__(self, rng, channels, heads, sr_ratio, mlp_ratio):
        self.norm1 = LayerNorm(channels)
        self.attn = Attention(rng, channels, heads, sr_ratio)
        self.norm2 = LayerNorm(channels)
        self.ffn = FeedForward(rng, channels, mlp_ratio)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class EncoderStage(Module):
    def __init__(self, rng, cfg: ModelConfig, index):
        in_ch = 3 if index == 0 else cfg.stage_channels[index - 1]
        out_ch = cfg.stage_channels[index]
        stride = cfg.strides[index] if index == 0 else cfg.strides[index] // cfg.strides[index - 1]
        s = cfg.patch_sizes[index]
        if cfg.patch_embed == "deformable":
            self.embed = DeformablePatchEmbed(rng, in_ch, out_ch, s, stride,
                                              r=cfg.r, offset_mode=cfg.dpe_offset_mode)
        else:
            self.embed = StandardPatchEmbed(rng, in_ch, out_ch, s, stride)
        self.norm_in = LayerNorm(out_ch)
        self.blocks = [EncoderBlock(rng, out_ch, cfg.heads[index], cfg.sr_ratios[index], cfg.mlp_ratio)
                       for _ in range(cfg.stage_depths[index])]
        self.norm_out = LayerNorm(out_ch)

    def __call__(self, x):
        x = self.norm_in(self.embed(x))
        for block in self.blocks:
            x = block(x)
        return self.norm_out(x)


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.stages = [EncoderStage(rng, cfg, i) for i in range(4)]

    def __call__(self, x):
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid


class ChannelMLP(Module):
    """Two-layer per-token MLP used in the v1 decoder."""

    def __init__(self, rng, channels):
        self.fc1 = Linear(rng, channels, channels)
        self.fc2 = Linear(rng, channels, channels)

    def __call__(self, x):
        n, c, h, w = x.shape
        t = ad.transpose(x, (0, 2, 3, 1)).reshape((n * h * w, c))
        t = self.fc2(ad.silu(self.fc1(t)))
        return ad.transpose(t.reshape((n, h, w, c)), (0, 3, 1, 2))


class _DecoderStageV1(Module):
    def __init__(self, rng, in_channels, c_emb, r, deformable):
        self.embed = DeformablePatchEmbed(rng, in_channels, c_emb, patch_size=3,
                                          stride=1, padding=1, r=r, deformable=deformable)
        self.mixer = DeformableTokenMixer(rng, c_emb, r=r, deformable=deformable)
        self.mlp = ChannelMLP(rng, c_emb)

    def __call__(self, z, record=False):
        z = self.embed(z, record=record)
        z = self.mixer(z, record=record) + z
        return self.mlp(z) + z


class _DecoderStageV2(Module):
    def __init__(self, rng, in_channels, c_emb, r, deformable, shared_cx=None):
        self.embed = DeformablePatchEmbed(rng, in_channels, c_emb, patch_size=3,
                                          stride=1, padding=1, r=r, deformable=deformable)
        self.cx_pool = shared_cx if shared_cx is not None else ChannelMixer(rng, c_emb)
        self.cx_mix = shared_cx if shared_cx is not None else ChannelMixer(rng, c_emb)
        self.mixer = DeformableTokenMixer(rng, c_emb, r=r, deformable=deformable)
        self.px = pool_mixer  # swappable hook, e.g. identity in ablation tests

    def __call__(self, z, record=False):
        z = self.embed(z, record=record)
        z = self.px(z) + self.cx_pool(z)
        return self.mixer(z, record=record) + self.cx_mix(z)


class Decoder(Module):
    """Per-stage mixing, stride-4 fusion by summation, norm + class head."""

    def __init__(self, rng, cfg: ModelConfig):
        self.kind = cfg.decoder
        deform = cfg.decoder_deformable
        if cfg.decoder == "v1":
            self.stages = [_DecoderStageV1(rng, c, cfg.c_emb, cfg.r, deform)
                           for c in cfg.stage_channels]
        else:
            shared = ChannelMixer(rng, cfg.c_emb) if cfg.share_cx else None
            self.stages = [_DecoderStageV2(rng, c, cfg.c_emb, cfg.r, deform, shared_cx=shared)
                           for c in cfg.stage_channels]
        self.norm = LayerNorm(cfg.c_emb)
        self.head = Linear(rng, cfg.c_emb, cfg.num_classes)

    def fuse(self, pyramid, record=False):
        target = pyramid[0].shape[2:]
        fused = None
        for stage, feat in zip(self.stages, pyramid):
            z = stage(feat, record=record)
            z = ad.upsample_bilinear(z, target)
            fused = z if fused is None else fused + z
        return fused

    def __call__(self, pyramid, out_size, record=False):
        fused = self.fuse(pyramid, record=record)
        logits = linear_nchw(self.norm(fused), self.head)
        return ad.upsample_bilinear(logits, out_size), fused


class Segmenter(Module):
    """Encoder + decoder with the training/evaluation entry points."""

    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E6]))
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)

    def check_input(self, x):
        h, w = x.shape[2:]
        s = self.cfg.strides[-1]
        if h % s or w % s:
            pad_h = (s - h % s) % s
            pad_w = (s - w % s) % s
            raise ad.ShapeError(
                f"input {h}x{w} not divisible by {s}; pad by ({pad_h}, {pad_w}) first"
            )

    def encode(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        return self.encoder(x)

    def forward(self, x, record=False):
        """Return (logits upsampled to input size, fused stride-4 features)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        pyramid = self.encoder(x)
        return self.decoder(pyramid, x.shape[2:], record=record)

    def predict_proba(self, x):
        logits, fused = self.forward(x)
        return ad.softmax(logits, axis=1), fused

    def segment(self, x):
        """Per-pixel class distribution and argmax label map (no graph)."""
        with ad.no_grad():
            logits, _ = self.forward(x)
        probs = ad._softmax_np(logits.data, axis=1)
        return probs, probs.argmax(axis=1).astype(np.uint8)

    def fused_features(self, x):
        with ad.no_grad():
            _, fused = self.forward(x)
        return fused.data

    def state_dict(self):
        return dict(self.named_parameters())

    def save(self, path, config_path=None):
        save_checkpoint(path, list(self.named_parameters()))
        if config_path is not None:
            self.cfg.to_json(config_path)

    @classmethod
    def load(cls, checkpoint_path, cfg: ModelConfig):
        model = cls(cfg, seed=0)
        model.load_state(load_checkpoint(checkpoint_path))
        return model
