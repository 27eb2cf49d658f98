"""Image encoder backends.

Two classes of backend: pretrained networks (a vision-language model by
default, a self-supervised one as the alternative) loaded lazily so the
package imports without any ML runtime, and a dependency-light statistics
encoder that is always available and fully deterministic, used for fixtures
and tests.  An encoder's `identity` string is recorded in the output file
header so consumers can tell embeddings from different encoders apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import EncoderUnavailableError, UsageError

PIXEL_STATS_GRID = 8


@dataclass(frozen=True)
class PixelStatsEncoder:
    """Downsampled RGB pixels plus per-channel spread.

    Dimension is 3 * grid^2 + 3.  Deterministic given file bytes; images
    already at grid size skip resampling entirely, which keeps shipped
    golden fixtures stable across Pillow versions.
    """

    grid: int = PIXEL_STATS_GRID

    @property
    def identity(self) -> str:
        return f"pixel-stats/{self.grid}x{self.grid}"

    @property
    def dim(self) -> int:
        return 3 * self.grid * self.grid + 3

    def encode_batch(self, images: list[Image.Image]) -> np.ndarray:
        rows = np.empty((len(images), self.dim), dtype=np.float64)
        for i, image in enumerate(images):
            rgb = image.convert("RGB")
            if rgb.size != (self.grid, self.grid):
                rgb = rgb.resize((self.grid, self.grid), Image.BILINEAR)
            pixels = np.asarray(rgb, dtype=np.float64) / 255.0
            flat = pixels.reshape(-1, 3)
            rows[i] = np.concatenate([flat.reshape(-1), flat.std(axis=0)])
        return rows


@dataclass(frozen=True)
class TorchImageEncoder:
    """Wraps a pretrained torch model behind the batch-encode interface."""

    identity: str
    dim: int
    _model: object = field(repr=False)
    _processor: object = field(repr=False)
    _forward: object = field(repr=False)  # (model, processor, images) -> tensor

    def encode_batch(self, images: list[Image.Image]) -> np.ndarray:
        import torch

        with torch.no_grad():
            out = self._forward(self._model, self._processor, images)
        return np.asarray(out.cpu().numpy(), dtype=np.float64)


DEFAULT_VL_MODEL = "openai/clip-vit-base-patch32"
DEFAULT_SSL_MODEL = "facebook/dinov2-base"


def _load_vision_language(model_id: str) -> TorchImageEncoder:
    try:
        from transformers import CLIPModel, CLIPProcessor
    except Exception as exc:
        raise EncoderUnavailableError(
            f"encoder 'clip' needs the transformers runtime: {exc}"
        ) from exc
    try:
        model = CLIPModel.from_pretrained(model_id)
        processor = CLIPProcessor.from_pretrained(model_id)
    except Exception as exc:
        raise EncoderUnavailableError(
            f"could not load pretrained weights '{model_id}': {exc}"
        ) from exc
    model.eval()

    def forward(m, p, images):
        inputs = p(images=images, return_tensors="pt")
        return m.get_image_features(**inputs)

    return TorchImageEncoder(
        identity=f"clip/{model_id}",
        dim=int(model.config.projection_dim),
        _model=model,
        _processor=processor,
        _forward=forward,
    )


def _load_self_supervised(model_id: str) -> TorchImageEncoder:
    try:
        from transformers import AutoImageProcessor, AutoModel
    except Exception as exc:
        raise EncoderUnavailableError(
            f"encoder 'dino' needs the transformers runtime: {exc}"
        ) from exc
    try:
        model = AutoModel.from_pretrained(model_id)
        processor = AutoImageProcessor.from_pretrained(model_id)
    except Exception as exc:
        raise EncoderUnavailableError(
            f"could not load pretrained weights '{model_id}': {exc}"
        ) from exc
    model.eval()

    def forward(m, p, images):
        inputs = p(images=images, return_tensors="pt")
        return m(**inputs).last_hidden_state[:, 0]

    return TorchImageEncoder(
        identity=f"dino/{model_id}",
        dim=int(model.config.hidden_size),
        _model=model,
        _processor=processor,
        _forward=forward,
    )


ENCODER_NAMES = ("clip", "dino", "pixel-stats")


def get_encoder(name: str):
    """Resolve an encoder by name, optionally `name:model_id` for the
    pretrained backends."""
    base, _, spec = name.partition(":")
    if base == "pixel-stats":
        if spec:
            raise UsageError("pixel-stats takes no model id")
        return PixelStatsEncoder()
    if base == "clip":
        return _load_vision_language(spec or DEFAULT_VL_MODEL)
    if base == "dino":
        return _load_self_supervised(spec or DEFAULT_SSL_MODEL)
    raise UsageError(f"unknown encoder {name!r}; known: {', '.join(ENCODER_NAMES)}")
