"""Visual features: whole image plus object crops, each rescaled to 224x224
and encoded to a 2048-d vector; output shape (m+1) x 2048, whole image first."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import ExporterError
from . import mmtf

FEATURE_DIM = 2048
INPUT_SIZE = 224
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)

PRETRAINED_HELP = (
    "could not load pretrained resnet50 weights: {err}. Download them on a "
    "machine with network access, e.g.\n"
    "  python -c \"from torchvision.models import resnet50, "
    "ResNet50_Weights; resnet50(weights=ResNet50_Weights.IMAGENET1K_V2)\"\n"
    "then copy ~/.cache/torch/hub/checkpoints to this machine."
)


def _headless_resnet(weights) -> torch.nn.Module:
    from torchvision.models import resnet50
    net = resnet50(weights=weights)
    net.eval()
    return torch.nn.Sequential(*list(net.children())[:-1])  # drop the fc head


class PretrainedImageEncoder:
    def __init__(self):
        try:
            from torchvision.models import ResNet50_Weights
            self.backbone = _headless_resnet(ResNet50_Weights.IMAGENET1K_V2)
        except Exception as e:
            raise ExporterError(PRETRAINED_HELP.format(err=e)) from e

    def encode_batch(self, views: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            feats = self.backbone(views)
        return feats.reshape(views.shape[0], FEATURE_DIM).numpy() \
            .astype(np.float32)


class UntrainedImageEncoder(PretrainedImageEncoder):
    """Seeded random weights; offline stand-in with identical geometry."""

    def __init__(self, seed: int = 0):
        torch.manual_seed(seed)
        self.backbone = _headless_resnet(None)


def _to_input(img: Image.Image) -> torch.Tensor:
    resized = img.resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR)
    arr = torch.from_numpy(
        np.asarray(resized, dtype=np.float32).copy()).permute(2, 0, 1) / 255.0
    return (arr - _MEAN) / _STD


def _check_box(box, width, height, ex):
    if (not isinstance(box, (list, tuple)) or len(box) != 4
            or not all(isinstance(v, (int, float)) for v in box)):
        raise ExporterError(f"{ex}: box {box!r} is not [x1, y1, x2, y2]")
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise ExporterError(
            f"{ex}: box {box!r} outside image bounds {width}x{height}")
    return int(x1), int(y1), int(x2), int(y2)


def export_image_features(image_path, object_boxes, out_path, encoder) -> None:
    """Encode the whole image and each object crop into one MMTF file."""
    image_path = Path(image_path)
    try:
        with Image.open(image_path) as img:
            img = img.convert("RGB")
    except (OSError, ValueError) as e:
        raise ExporterError(f"unreadable image {image_path}: {e}") from e
    views = [_to_input(img)]
    for box in object_boxes:
        x1, y1, x2, y2 = _check_box(box, img.width, img.height, image_path)
        views.append(_to_input(img.crop((x1, y1, x2, y2))))
    feats = encoder.encode_batch(torch.stack(views))
    mmtf.write_tensor_file(feats, out_path)
