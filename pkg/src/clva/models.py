"""The four trainable networks: visual encoder, text encoder, visual
decoder with channel-bottleneck self-attention fusion, and the patch-wise
style discriminator.

Feature spaces: an image encodes to a spatial content map of H/16 x W/16
with `channels` planes plus a global style vector of length `style_dim`;
instructions embed into the same style space so either source can drive
the decoder.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import imageops

DOWNSCALE = 16  # four stride-2 stages


@dataclass
class ModelConfig:
    channels: int = 256
    style_dim: int = 256
    attention_bottleneck: int = 64
    encoder_stages: int = 4
    text_backend: str = "builtin"  # "builtin" | "external"
    vocab_size: int = 4096
    disc_stages: int = 3
    external_text_dim: int = 0

    @property
    def min_patch(self) -> int:
        """Smallest patch side the discriminator conv stack supports."""
        return 2**self.disc_stages

    def validate(self) -> None:
        if self.encoder_stages != 4:
            raise ValueError("encoder_stages must be 4 (H/16 x W/16 content maps)")
        if self.attention_bottleneck > self.channels:
            raise ValueError(
                f"attention_bottleneck {self.attention_bottleneck} exceeds channels {self.channels}"
            )
        if self.channels < 8 or self.style_dim < 4:
            raise ValueError("channels must be >= 8 and style_dim >= 4")
        if self.text_backend not in ("builtin", "external"):
            raise ValueError(f"unknown text_backend {self.text_backend!r}")
        if self.text_backend == "external" and self.external_text_dim <= 0:
            raise ValueError("external text backend requires external_text_dim > 0")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.disc_stages < 1:
            raise ValueError("disc_stages must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class VisualFeatures:
    content_map: np.ndarray  # h' x w' x c
    style_vec: np.ndarray  # (s,)


@dataclass
class InstructionEmbedding:
    vec: np.ndarray  # (s,)


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, padding=1)


def conv1x1(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=1)


class DownBlock(nn.Module):
    """Pre-activation residual block with instance norm, halves H and W."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.InstanceNorm2d(cin, affine=True)
        self.conv1 = conv3x3(cin, cout)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)
        self.conv2 = conv3x3(cout, cout)
        self.skip = conv1x1(cin, cout)

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        h = F.avg_pool2d(h, 2)
        return h + self.skip(F.avg_pool2d(x, 2))


class UpBlock(nn.Module):
    """Residual block that doubles H and W; no normalization so the global
    color carried by the style fusion survives to the output."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv3x3(cin, cout)
        self.conv2 = conv3x3(cout, cout)
        self.skip = conv1x1(cin, cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv2(F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2))
        return h + self.skip(x)


class ChannelBottleneckAttention(nn.Module):
    """Single-head self-attention over flattened spatial positions with
    query/key/value shrunk to a bottleneck, projected back to the input
    width, and added residually (gain starts at zero)."""

    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        if bottleneck > channels:
            raise ValueError(f"bottleneck {bottleneck} exceeds channels {channels}")
        self.bottleneck = bottleneck
        self.query = conv1x1(channels, bottleneck)
        self.key = conv1x1(channels, bottleneck)
        self.value = conv1x1(channels, bottleneck)
        self.proj = conv1x1(bottleneck, channels)
        self.gain = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, _, h, w = x.shape
        q = self.query(x).flatten(2)  # b x bn x n
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)
        att = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(self.bottleneck), dim=-1)
        out = (v @ att.transpose(1, 2)).view(b, self.bottleneck, h, w)
        return x + self.gain * self.proj(out)


def _width_ladder(channels: int) -> list[int]:
    return [max(4, channels // 8), max(4, channels // 4), max(4, channels // 2), channels, channels]


class VisualEncoder(nn.Module):
    """Four downsampling residual stages; content map from the trunk,
    style vector from a dense layer after global average pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ws = _width_ladder(cfg.channels)
        self.stem = conv3x3(3, ws[0])
        self.blocks = nn.ModuleList(
            [DownBlock(ws[i], ws[i + 1]) for i in range(cfg.encoder_stages)]
        )
        self.style_head = nn.Linear(cfg.channels, cfg.style_dim)

    @staticmethod
    def _content_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
        # per-instance spatial whitening: global color/intensity lives in
        # the style vector only, so restyling cannot be undone by the
        # content pathway (handles 1x1 maps, unlike nn.InstanceNorm2d)
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + eps)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        style = self.style_head(h.mean(dim=(2, 3)))
        return self._content_norm(h), style


class BuiltinTextEncoder(nn.Module):
    """Hash-bucket token embedding, a small GRU, and a dense projection
    into the style space. Tokens hash into a fixed bucket table, so text
    never seen in training still embeds (shared-bucket fallback instead of
    an error)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.style_dim, padding_idx=0)
        self.rnn = nn.GRU(cfg.style_dim, cfg.style_dim, batch_first=True)
        self.proj = nn.Linear(cfg.style_dim, cfg.style_dim)

    def token_ids(self, text: str) -> list[int]:
        tokens = [t for t in "".join(c if c.isalnum() else " " for c in text.lower()).split()]
        if not tokens:
            raise ValueError(f"instruction {text!r} has no tokens")
        return [zlib.crc32(t.encode("utf-8")) % (self.vocab_size - 1) + 1 for t in tokens]

    def forward(self, texts: list[str]) -> torch.Tensor:
        ids = [self.token_ids(t) for t in texts]
        lengths = torch.tensor([len(i) for i in ids])
        maxlen = int(lengths.max())
        batch = torch.zeros(len(ids), maxlen, dtype=torch.long)
        for row, seq in enumerate(ids):
            batch[row, : len(seq)] = torch.tensor(seq)
        emb = self.embed(batch)
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths, batch_first=True, enforce_sorted=False
        )
        _, h_n = self.rnn(packed)
        return self.proj(h_n[-1])


class ExternalTextEncoder(nn.Module):
    """Fixed pretrained sentence representations with a trainable dense
    projection into the style space. The backend object is attached at
    runtime and is not serialized."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.external_text_dim, cfg.style_dim)
        self.backend = None

    def forward(self, texts: list[str]) -> torch.Tensor:
        if self.backend is None:
            raise RuntimeError("external text backend not attached")
        for t in texts:
            if not t.strip():
                raise ValueError("empty instruction")
        reps = np.stack([np.asarray(self.backend.encode(t), dtype=np.float64) for t in texts])
        dtype = self.proj.weight.dtype
        return self.proj(torch.from_numpy(reps).to(dtype))


class VisualDecoder(nn.Module):
    """Broadcasts the style vector over the content grid, fuses by
    channel concatenation, attends in a narrow bottleneck, then restores
    resolution through four upsampling residual stages and a tanh RGB
    head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ws = _width_ladder(cfg.channels)
        self.fuse = conv1x1(cfg.channels + cfg.style_dim, cfg.channels)
        self.attend = ChannelBottleneckAttention(cfg.channels, cfg.attention_bottleneck)
        self.blocks = nn.ModuleList(
            [UpBlock(ws[4], ws[3]), UpBlock(ws[3], ws[2]), UpBlock(ws[2], ws[1]), UpBlock(ws[1], ws[0])]
        )
        self.to_rgb = conv3x3(ws[0], 3)

    def forward(self, content_map: torch.Tensor, style_vec: torch.Tensor) -> torch.Tensor:
        b, _, h, w = content_map.shape
        if style_vec.shape[0] != b:
            raise ValueError("content/style batch mismatch")
        tiled = style_vec[:, :, None, None].expand(-1, -1, h, w)
        fused = self.fuse(torch.cat([content_map, tiled], dim=1))
        fused = self.attend(fused)
        for blk in self.blocks:
            fused = blk(fused)
        return torch.tanh(self.to_rgb(fused))


class PatchStyleDiscriminator(nn.Module):
    """Scores how likely a patch is a real style-image crop matching an
    instruction embedding. Conv stack mirroring the encoder at reduced
    depth, bottleneck attention, then dense layers over the pooled patch
    feature joined with the instruction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.min_patch = cfg.min_patch
        d0 = max(4, cfg.channels // 8)
        widths = [min(cfg.channels, d0 * 2**i) for i in range(cfg.disc_stages + 1)]
        self.stem = conv3x3(3, widths[0])
        self.blocks = nn.ModuleList(
            [DownBlock(widths[i], widths[i + 1]) for i in range(cfg.disc_stages)]
        )
        top = widths[-1]
        self.attend = ChannelBottleneckAttention(top, min(cfg.attention_bottleneck, top))
        self.instr_proj = nn.Linear(cfg.style_dim, top)
        self.score_hidden = nn.Linear(2 * top, top)
        self.score_out = nn.Linear(top, 1)

    def forward(self, patches: torch.Tensor, instr_emb: torch.Tensor) -> torch.Tensor:
        if patches.shape[2] < self.min_patch or patches.shape[3] < self.min_patch:
            raise ValueError(
                f"patch {patches.shape[3]}x{patches.shape[2]} below minimum {self.min_patch}"
            )
        h = self.stem(patches)
        for blk in self.blocks:
            h = blk(h)
        h = self.attend(h)
        patch_feat = h.mean(dim=(2, 3))
        joint = torch.cat([patch_feat, self.instr_proj(instr_emb)], dim=1)
        logit = self.score_out(F.leaky_relu(self.score_hidden(joint), 0.2))
        return torch.sigmoid(logit).squeeze(1)


class CLVAModel(nn.Module):
    """Bundles the four networks plus array-level ops used by the CLI,
    service and tests. Forward passes are pure given fixed parameters."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = VisualEncoder(config)
        self.text_encoder = (
            BuiltinTextEncoder(config) if config.text_backend == "builtin" else ExternalTextEncoder(config)
        )
        self.decoder = VisualDecoder(config)
        self.discriminator = PatchStyleDiscriminator(config)
        self.stylize_calls = 0  # instrumentation: one feed-forward per stylize

    # -- tensor-level core -------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.to_rgb.weight.dtype

    def encode(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.shape[2] % DOWNSCALE or images.shape[3] % DOWNSCALE:
            raise ValueError(
                f"image dims {images.shape[3]}x{images.shape[2]} must be divisible by {DOWNSCALE}"
            )
        return self.encoder(images)

    def embed_text(self, texts: list[str]) -> torch.Tensor:
        return self.text_encoder(texts)

    def generate(self, content_map: torch.Tensor, style_vec: torch.Tensor) -> torch.Tensor:
        return self.decoder(content_map, style_vec)

    def judge_patches(self, patches: torch.Tensor, instr_emb: torch.Tensor) -> torch.Tensor:
        return self.discriminator(patches, instr_emb)

    def attach_text_backend(self, backend) -> None:
        if not isinstance(self.text_encoder, ExternalTextEncoder):
            raise RuntimeError("model was built with the builtin text backend")
        self.text_encoder.backend = backend

    # -- array-level ops ---------------------------------------------------

    def encode_image(self, image: np.ndarray) -> VisualFeatures:
        imageops.check_divisible(image, DOWNSCALE)
        with torch.no_grad():
            cmap, style = self.encode(imageops.img_to_tensor(image, self.dtype))
        return VisualFeatures(
            content_map=cmap[0].numpy().transpose(1, 2, 0).astype(np.float32),
            style_vec=style[0].numpy().astype(np.float32),
        )

    def encode_instruction(self, text: str) -> InstructionEmbedding:
        if not text or not text.strip():
            raise ValueError("instruction must be non-empty")
        with torch.no_grad():
            vec = self.embed_text([text])[0]
        return InstructionEmbedding(vec=vec.numpy().astype(np.float32))

    def decode(self, content_map: np.ndarray, style_vec: np.ndarray) -> np.ndarray:
        if content_map.ndim != 3 or content_map.shape[2] != self.config.channels:
            raise ValueError(f"content map shape {content_map.shape} inconsistent with config")
        if style_vec.shape != (self.config.style_dim,):
            raise ValueError(f"style vector shape {style_vec.shape} inconsistent with config")
        cm = torch.from_numpy(np.ascontiguousarray(content_map.transpose(2, 0, 1))).to(self.dtype)
        sv = torch.from_numpy(np.asarray(style_vec)).to(self.dtype)
        with torch.no_grad():
            out = self.generate(cm.unsqueeze(0), sv.unsqueeze(0))
        return imageops.tensor_to_img(out)

    def discriminate(self, patch: np.ndarray, instr: InstructionEmbedding) -> float:
        if patch.shape[0] < self.config.min_patch or patch.shape[1] < self.config.min_patch:
            raise ValueError(
                f"patch {patch.shape[1]}x{patch.shape[0]} below minimum {self.config.min_patch}"
            )
        vec = torch.from_numpy(np.asarray(instr.vec)).to(self.dtype).unsqueeze(0)
        with torch.no_grad():
            p = self.judge_patches(imageops.img_to_tensor(patch, self.dtype), vec)
        return float(p[0])

    def stylize(self, image: np.ndarray, instruction: str) -> np.ndarray:
        """Single feed-forward restyling pass; increments the pass counter."""
        if not instruction or not instruction.strip():
            raise ValueError("instruction must be non-empty")
        imageops.check_divisible(image, DOWNSCALE)
        with torch.no_grad():
            cmap, _ = self.encode(imageops.img_to_tensor(image, self.dtype))
            style = self.embed_text([instruction])
            out = self.generate(cmap, style)
        self.stylize_calls += 1
        return imageops.tensor_to_img(out)


def init_model(config: ModelConfig, seed: int) -> CLVAModel:
    """Deterministic parameter initialization.

    Conv/linear weights are scaled-Gaussian; the decoder RGB head and the
    discriminator score head start near zero so first outputs sit at
    mid-gray and first judgments near 0.5.
    """
    config.validate()
    model = CLVAModel(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, mod in model.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=g) * std)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.Embedding):
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=g) * 0.1)
                if mod.padding_idx is not None:
                    mod.weight[mod.padding_idx].zero_()
            elif isinstance(mod, nn.GRU):
                k = 1.0 / math.sqrt(mod.hidden_size)
                for _, p in sorted(mod.named_parameters(recurse=False)):
                    p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * k)
            elif isinstance(mod, nn.InstanceNorm2d) and mod.affine:
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for head in (model.decoder.to_rgb, model.discriminator.score_out):
            head.weight.copy_(torch.randn(head.weight.shape, generator=g) * 1e-4)
            head.bias.zero_()
    return model
