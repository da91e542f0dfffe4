"""Multi-scale 3D detection model.

A 3D encoder-decoder backbone emits class-probability grids from
several decoder resolutions (deep supervision) plus a whole-patch
classification probability derived from the full-resolution lesion
probability map: global average pooling with a coarse kernel, two fully
connected layers, softmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ModelConfig",
    "PredictionPyramid",
    "LesionDetectionNet",
    "build_model",
    "rescale_to_full",
    "predict_pyramid",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1


def _triple(value) -> tuple[int, int, int]:
    arr = np.asarray(value, dtype=int).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    return (int(arr[0]), int(arr[1]), int(arr[2]))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``cls_pool_kernel`` is the per-axis extent of the classification
    head's average-pooling kernel; ``None`` selects patch_size/4, which
    keeps the pooled feature grid at 4x4x4 (64 features) for any patch
    size and equals extent 32 at the reference 128-voxel patch.
    """

    levels: int = 4
    base_channels: int = 16
    num_scales: int = 3
    num_classes: int = 2
    patch_size: tuple[int, int, int] = (128, 128, 128)
    cls_pool_kernel: tuple[int, int, int] | None = None
    cls_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "patch_size", _triple(self.patch_size))
        if self.cls_pool_kernel is not None:
            object.__setattr__(self, "cls_pool_kernel", _triple(self.cls_pool_kernel))
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if not 1 <= self.num_scales <= self.levels:
            raise ValueError(f"num_scales must lie in [1, levels], got {self.num_scales}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        factor = 2 ** (self.levels - 1)
        for n in self.patch_size:
            if n % factor != 0:
                raise ValueError(f"patch size {self.patch_size} not divisible by 2^(levels-1)={factor}")
        for n, k in zip(self.patch_size, self.pool_kernel):
            if k < 1 or n % k != 0:
                raise ValueError(f"patch size {self.patch_size} not divisible by pooling kernel {self.pool_kernel}")

    @property
    def pool_kernel(self) -> tuple[int, int, int]:
        if self.cls_pool_kernel is not None:
            return self.cls_pool_kernel
        return tuple(max(1, n // 4) for n in self.patch_size)

    @property
    def pooled_grid(self) -> tuple[int, int, int]:
        return tuple(n // k for n, k in zip(self.patch_size, self.pool_kernel))

    def scale_shape(self, scale: int) -> tuple[int, int, int]:
        """Spatial shape of the raw prediction at 1-based ``scale``."""
        if not 1 <= scale <= self.num_scales:
            raise ValueError(f"scale must lie in [1, {self.num_scales}], got {scale}")
        return tuple(n // 2 ** (scale - 1) for n in self.patch_size)


@dataclass
class PredictionPyramid:
    """Per-scale class-probability grids for one patch.

    ``raw[s-1]`` holds the prediction at scale ``s`` (shape ``(C, *patch/2^(s-1))``),
    ``rescaled[s-1]`` the same prediction upsampled to full patch resolution,
    and ``class_probs`` the length-C patch classification probabilities.
    Scale 1 is already at full resolution, so ``rescaled[0] is raw[0]``.
    """

    raw: list[np.ndarray]
    rescaled: list[np.ndarray]
    class_probs: np.ndarray

    def validate(self, grid_tol: float = 1e-5, class_tol: float = 1e-6) -> None:
        for name, grids in (("raw", self.raw), ("rescaled", self.rescaled)):
            for s, grid in enumerate(grids, start=1):
                sums = grid.sum(axis=0)
                if not np.allclose(sums, 1.0, atol=grid_tol):
                    worst = float(np.abs(sums - 1.0).max())
                    raise AssertionError(f"{name} scale {s}: voxel probabilities off by {worst:g}")
        total = float(self.class_probs.sum())
        if abs(total - 1.0) > class_tol:
            raise AssertionError(f"class_probs sum {total} outside 1 +/- {class_tol}")


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, kernel_size=3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class LesionDetectionNet(nn.Module):
    """3D UNet backbone + per-scale prediction heads + classification head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = [config.base_channels * 2**i for i in range(config.levels)]

        self.encoders = nn.ModuleList(
            [_conv_block(1 if i == 0 else ch[i - 1], ch[i]) for i in range(config.levels)]
        )
        self.pool = nn.MaxPool3d(2)
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose3d(ch[i + 1], ch[i], kernel_size=2, stride=2) for i in range(config.levels - 1)]
        )
        self.decoders = nn.ModuleList(
            [_conv_block(2 * ch[i], ch[i]) for i in range(config.levels - 1)]
        )
        # Head for scale s sits on the decoder output at resolution /2^(s-1);
        # when num_scales == levels the deepest head reads the bottleneck.
        head_channels = [ch[s - 1] if s <= config.levels - 1 else ch[-1] for s in range(1, config.num_scales + 1)]
        self.heads = nn.ModuleList(
            [nn.Conv3d(c, config.num_classes, kernel_size=1) for c in head_channels]
        )
        self.cls_pool = nn.AvgPool3d(kernel_size=config.pool_kernel, stride=config.pool_kernel)
        pooled = int(np.prod(config.pooled_grid))
        self.cls_fc1 = nn.Linear(pooled, config.cls_hidden)
        self.cls_fc2 = nn.Linear(config.cls_hidden, config.num_classes)

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Returns per-scale logits (finest first) and patch-class logits.

        ``x`` must be ``(B, 1, *patch_size)`` with finite values.
        """
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.patch_size:
            raise ValueError(
                f"expected input of shape (B, 1, {self.config.patch_size}), got {tuple(x.shape)}"
            )
        feats = []
        h = x
        for i, enc in enumerate(self.encoders):
            if i > 0:
                h = self.pool(h)
            h = enc(h)
            feats.append(h)

        decoder_out = {self.config.levels - 1: feats[-1]}  # depth -> feature map
        h = feats[-1]
        for i in reversed(range(self.config.levels - 1)):
            h = self.decoders[i](torch.cat([self.upsamplers[i](h), feats[i]], dim=1))
            decoder_out[i] = h

        seg_logits = []
        for s in range(1, self.config.num_scales + 1):
            depth = s - 1 if s <= self.config.levels - 1 else self.config.levels - 1
            seg_logits.append(self.heads[s - 1](decoder_out[depth]))

        p1 = F.softmax(seg_logits[0], dim=1)
        class_logits = self._class_logits_from_probs(p1)
        return seg_logits, class_logits

    def _class_logits_from_probs(self, probs: torch.Tensor) -> torch.Tensor:
        lesion = probs[:, 1:2]  # lesion-class channel
        pooled = self.cls_pool(lesion).flatten(1)
        return self.cls_fc2(F.relu(self.cls_fc1(pooled)))

    def pooled_features(self, probs: np.ndarray) -> np.ndarray:
        """Average-pooled lesion-channel grid feeding the classifier
        (shape ``pooled_grid``); exposed for inspection and tests."""
        t = torch.as_tensor(np.asarray(probs, dtype=np.float32))
        if t.ndim != 4 or tuple(t.shape[1:]) != self.config.patch_size:
            raise ValueError(f"expected a (C, *patch) grid, got {tuple(t.shape)}")
        with torch.no_grad():
            pooled = self.cls_pool(t[1:2].unsqueeze(0))[0, 0]
        return pooled.numpy()

    def classification_head(self, probs) -> np.ndarray | torch.Tensor:
        """Patch-class probabilities from a full-resolution probability grid.

        Accepts ``(C, *patch)`` or ``(B, C, *patch)``, numpy or torch.
        The lesion channel is average-pooled with the configured coarse
        kernel, flattened, passed through the two fully connected layers
        and a softmax.
        """
        is_numpy = isinstance(probs, np.ndarray)
        t = torch.as_tensor(np.asarray(probs, dtype=np.float32)) if is_numpy else probs
        squeeze = t.ndim == 4
        if squeeze:
            t = t.unsqueeze(0)
        if t.ndim != 5 or t.shape[1] != self.config.num_classes:
            raise ValueError(f"expected (C, *patch) or (B, C, *patch) probabilities, got {tuple(t.shape)}")
        if tuple(t.shape[2:]) != self.config.patch_size:
            raise ValueError(
                f"probability grid {tuple(t.shape[2:])} does not match patch size {self.config.patch_size}"
            )
        out = F.softmax(self._class_logits_from_probs(t), dim=1)
        if squeeze:
            out = out[0]
        return out.detach().numpy() if is_numpy else out


def _he_init(model: LesionDetectionNet, seed: int) -> None:
    # He-style fan-in init for conv/linear weights, zeros for biases,
    # identity for norm layers; driven by a named-order numpy generator
    # so two builds from the same seed are parameter-identical.
    rng = np.random.default_rng(seed)
    for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param[0].numel()
                std = float(np.sqrt(2.0 / fan_in))
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values.astype(np.float32)))
            elif "weight" in name:  # norm scale
                param.fill_(1.0)
            else:
                param.zero_()


def build_model(config: ModelConfig, seed: int = 0) -> LesionDetectionNet:
    model = LesionDetectionNet(config)
    _he_init(model, seed)
    return model


def rescale_to_full(probs, target_shape) -> np.ndarray | torch.Tensor:
    """Upsample a class-probability grid to ``target_shape``.

    Trilinear interpolation with half-pixel-aligned sample centres,
    followed by per-voxel renormalization so class probabilities sum to
    one.  The target must be an integer multiple of the input shape.
    Accepts ``(C, *spatial)`` or ``(B, C, *spatial)``, numpy or torch.
    """
    is_numpy = isinstance(probs, np.ndarray)
    t = torch.as_tensor(np.asarray(probs)) if is_numpy else probs
    squeeze = t.ndim == 4
    if squeeze:
        t = t.unsqueeze(0)
    if t.ndim != 5:
        raise ValueError(f"expected (C, *spatial) or (B, C, *spatial), got {tuple(t.shape)}")
    target = _triple(target_shape)
    source = tuple(t.shape[2:])
    for ts, ss in zip(target, source):
        if ts % ss != 0:
            raise ValueError(f"target {target} is not an integer multiple of source {source}")
    if target != source:
        t = F.interpolate(t, size=target, mode="trilinear", align_corners=False)
        t = t.clamp_min(0)
        t = t / t.sum(dim=1, keepdim=True).clamp_min(1e-12)
    if squeeze:
        t = t[0]
    return t.numpy() if is_numpy else t


def predict_pyramid(model: LesionDetectionNet, image: np.ndarray) -> PredictionPyramid:
    """Run one patch through the frozen model, returning numpy grids."""
    if tuple(image.shape) != model.config.patch_size:
        raise ValueError(f"patch shape {image.shape} does not match config {model.config.patch_size}")
    if not np.isfinite(image).all():
        raise ValueError("patch contains non-finite values")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
            seg_logits, class_logits = model(x)
            raw = [F.softmax(logit, dim=1)[0] for logit in seg_logits]
            rescaled = [
                raw[0] if s == 0 else rescale_to_full(raw[s], model.config.patch_size)
                for s in range(len(raw))
            ]
            class_probs = F.softmax(class_logits, dim=1)[0]
    finally:
        if was_training:
            model.train()
    return PredictionPyramid(
        raw=[g.numpy().astype(np.float64) for g in raw],
        rescaled=[g.numpy().astype(np.float64) for g in rescaled],
        class_probs=class_probs.numpy().astype(np.float64),
    )


@dataclass
class Checkpoint:
    """Loaded checkpoint contents."""

    config: ModelConfig
    params: dict
    stage: str
    seed: int
    optimizer_state: dict | None = None
    metadata: dict = field(default_factory=dict)

    def build_model(self) -> LesionDetectionNet:
        model = LesionDetectionNet(self.config)
        model.load_state_dict(self.params)
        model.eval()
        return model


def save_checkpoint(
    path,
    model: LesionDetectionNet,
    stage: str,
    seed: int,
    optimizer: torch.optim.Optimizer | None = None,
    metadata: dict | None = None,
) -> None:
    if stage not in ("pretrained", "finetuned"):
        raise ValueError(f"stage tag must be 'pretrained' or 'finetuned', got {stage!r}")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "stage": stage,
        "seed": int(seed),
        "params": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "metadata": dict(metadata or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    cfg = payload["config"]
    if cfg.get("cls_pool_kernel") is not None:
        cfg["cls_pool_kernel"] = tuple(cfg["cls_pool_kernel"])
    cfg["patch_size"] = tuple(cfg["patch_size"])
    return Checkpoint(
        config=ModelConfig(**cfg),
        params=payload["params"],
        stage=payload["stage"],
        seed=payload["seed"],
        optimizer_state=payload["optimizer"],
        metadata=payload["metadata"],
    )
