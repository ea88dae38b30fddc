"""
Image IO, convolutional feature extractors and visual-token construction.

Frames are stored as 8-bit PNG or as IMGF, a raw little-endian float format:

    b"IMGF" | u32 height | u32 width | f32 RGB payload (row-major, interleaved)

The extractors turn a batch of frames (or 3-frame clips) into a feature map
with ``feature_channels`` channels; adaptive average pooling then reduces it
to an n×n grid whose cells become the visual tokens.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import numeric as nm
from .errors import ShapeError
from .layers import Conv2d, Conv3d, LayerNorm, Module
from .numeric import Tensor
from .rng import Rng

IMGF_MAGIC = b"IMGF"
MIN_IMAGE_SIZE = 32
CLIP_FRAMES = 3
DEFAULT_FEATURE_CHANNELS = 256
DEFAULT_WIDTHS = (32, 64, 128)
VISUAL_SEGMENT = 1


class Image:
    """RGB frame as float64 ``pixels`` [H, W, 3], clamped to [0, 1]."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ShapeError(f"image must be [H, W, 3], got {pixels.shape}")
        h, w, _ = pixels.shape
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ShapeError(f"image {h}x{w} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
        self.pixels = np.clip(pixels, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))


# --- file IO ---


def save_image(image: Image, path: str | Path) -> None:
    """Write ``image`` as IMGF (``.imgf``) or 8-bit PNG (anything else)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".imgf":
        header = IMGF_MAGIC + struct.pack("<II", image.height, image.width)
        path.write_bytes(header + image.pixels.astype("<f4").tobytes())
        return
    data = np.round(image.pixels * 255.0).astype(np.uint8)
    PILImage.fromarray(data).save(path, format="PNG")


def load_image(path: str | Path) -> Image:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == IMGF_MAGIC:
        if len(raw) < 12:
            raise ShapeError(f"{path}: truncated IMGF header")
        h, w = struct.unpack("<II", raw[4:12])
        payload = np.frombuffer(raw, dtype="<f4", offset=12)
        if payload.size != h * w * 3:
            raise ShapeError(f"{path}: IMGF payload has {payload.size} floats, expected {h * w * 3}")
        return Image(payload.reshape(h, w, 3).astype(np.float64))
    try:
        with PILImage.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except PILImage.UnidentifiedImageError as exc:
        raise OSError(f"{path}: not a PNG or IMGF image") from exc
    return Image(data)


# --- feature extractors ---


def channel_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """Layer norm over the channel axis of [B, C, H, W]."""
    return norm(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


class ConvBlock(Module):
    """Stride-2 3×3 convolution, channel layer norm, GeLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: Rng):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng.child("conv"), stride=2, padding=1)
        self.norm = LayerNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return nm.gelu(channel_norm(self.conv(x), self.norm))


class FeatureExtractor2D(Module):
    """Four stride-2 blocks: [B, 3, H, W] -> [B, C, H/16, W/16]."""

    def __init__(
        self,
        rng: Rng,
        feature_channels: int = DEFAULT_FEATURE_CHANNELS,
        widths: tuple[int, int, int] = DEFAULT_WIDTHS,
    ):
        super().__init__()
        channels = [3, *widths, feature_channels]
        self.blocks = [ConvBlock(channels[i], channels[i + 1], rng.child(f"block{i}")) for i in range(4)]
        self.feature_channels = feature_channels

    def forward(self, images: Tensor | np.ndarray) -> Tensor:
        x = nm.as_tensor(images)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"2D extractor expects [B, 3, H, W], got {x.shape}")
        _check_spatial(x.shape[-2:])
        for block in self.blocks:
            x = block(x)
        return x


class FeatureExtractor3D(Module):
    """
    Clip extractor: [B, 3, T=3, H, W] -> [B, C, H/16, W/16].

    The first block is a 3×3×3 convolution with no temporal padding, which
    collapses the three frames into one; the remaining three blocks are the
    2D blocks, so both extractors emit identical shapes.
    """

    def __init__(
        self,
        rng: Rng,
        feature_channels: int = DEFAULT_FEATURE_CHANNELS,
        widths: tuple[int, int, int] = DEFAULT_WIDTHS,
    ):
        super().__init__()
        channels = [3, *widths, feature_channels]
        self.temporal = Conv3d(3, channels[1], (3, 3, 3), rng.child("temporal"), stride=(1, 2, 2), padding=(0, 1, 1))
        self.temporal_norm = LayerNorm(channels[1])
        self.blocks = [ConvBlock(channels[i], channels[i + 1], rng.child(f"block{i}")) for i in range(1, 4)]
        self.feature_channels = feature_channels

    def forward(self, clips: Tensor | np.ndarray) -> Tensor:
        x = nm.as_tensor(clips)
        if x.ndim != 5 or x.shape[1] != 3:
            raise ShapeError(f"3D extractor expects [B, 3, T, H, W], got {x.shape}")
        if x.shape[2] != CLIP_FRAMES:
            raise ShapeError(f"3D extractor needs exactly {CLIP_FRAMES} frames, got T={x.shape[2]}")
        _check_spatial(x.shape[-2:])
        b = x.shape[0]
        y = self.temporal(x)
        y = y.reshape(b, y.shape[1], y.shape[3], y.shape[4])
        y = nm.gelu(channel_norm(y, self.temporal_norm))
        for block in self.blocks:
            y = block(y)
        return y


def _check_spatial(hw: tuple[int, ...]) -> None:
    if hw[0] < MIN_IMAGE_SIZE or hw[1] < MIN_IMAGE_SIZE:
        raise ShapeError(f"image {hw[0]}x{hw[1]} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")


def stack_images(images: list[Image]) -> np.ndarray:
    return np.stack([im.chw() for im in images])


def stack_clips(clips: list[list[Image]]) -> np.ndarray:
    """[B, 3, T, H, W] from B clips of T frames each."""
    for clip in clips:
        if len(clip) != CLIP_FRAMES:
            raise ShapeError(f"clip must hold exactly {CLIP_FRAMES} frames, got {len(clip)}")
        if len({im.pixels.shape for im in clip}) != 1:
            raise ShapeError("clip frames must share one size")
    return np.stack([np.stack([im.chw() for im in clip], axis=1) for clip in clips])


def extract_features_2d(image: Image, extractor: FeatureExtractor2D) -> Tensor:
    """Single-frame feature map [1, C, h, w]."""
    return extractor(stack_images([image]))


def extract_features_3d(clip: list[Image], extractor: FeatureExtractor3D) -> Tensor:
    return extractor(stack_clips([clip]))


# --- pooling and tokens ---


def adaptive_avg_pool(feature_map: Tensor, n: int) -> Tensor:
    """[..., h, w] -> [..., n, n] with floor/ceil bin boundaries."""
    return nm.adaptive_avg_pool2d(nm.as_tensor(feature_map), n)


@dataclass
class VisualTokens:
    """n² pooled cells as token features [B, n², C] with their segment/position ids."""

    features: Tensor
    segment_ids: np.ndarray
    position_ids: np.ndarray

    @property
    def count(self) -> int:
        return self.features.shape[1]


def to_visual_tokens(pooled: Tensor, positions: str = "constant") -> VisualTokens:
    """
    Flatten a pooled grid [B, C, n, n] row-major into n² tokens.

    ``positions="constant"`` gives every token position id 0 (the tokens
    are treated as an unordered set); ``"raster"`` numbers them 0..n²-1.
    """
    if pooled.ndim != 4 or pooled.shape[-1] != pooled.shape[-2]:
        raise ShapeError(f"visual tokens need a square grid [B, C, n, n], got {pooled.shape}")
    b, c, n, _ = pooled.shape
    features = pooled.reshape(b, c, n * n).transpose(0, 2, 1)
    if positions == "constant":
        position_ids = np.zeros(n * n, dtype=np.int64)
    elif positions == "raster":
        position_ids = np.arange(n * n, dtype=np.int64)
    else:
        raise ValueError(f"visual positions must be 'constant' or 'raster', got {positions!r}")
    return VisualTokens(features, np.full(n * n, VISUAL_SEGMENT, dtype=np.int64), position_ids)
