"""Stage 2: patch-level cancer detector.

A small learnable upsampler lifts a 3x6xSxS patch stack (three adjacent
slices, six biomarker channels) onto a 64x32x32 feature map, and an
18-layer residual classifier maps the features to a single cancer
probability.  Training consumes patches produced through the frozen
Stage-1 corrector; the corrector hash is checked before and after so
detector training can never touch corrector parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import arrays_sha256
from .layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    ModuleList,
    bce_with_logits,
    focal_with_logits,
    global_avg_pool,
    nearest_resize,
    nearest_upsample2x,
)
from .optim import AdamW
from .rng import RngStream
from .tensor import DiffTensor, no_grad, relu

_PLANES = 18  # 3 slices x 6 channels, flattened slice-major
_GRID = 16
_OUT_CHANNELS = 64
_OUT_SIZE = 32


@dataclass(frozen=True)
class UpsamplerConfig:
    """Fixed upsampler geometry: 3x6xSxS in, 18x16x16 inside, 64x32x32 out."""

    planes: int = _PLANES
    grid: int = _GRID
    out_channels: int = _OUT_CHANNELS
    out_size: int = _OUT_SIZE

    def __post_init__(self) -> None:
        if self.planes != _PLANES:
            raise ValueError(f"plane count is fixed at {_PLANES}, got {self.planes}")
        if self.grid != _GRID:
            raise ValueError(f"projection grid is fixed at {_GRID}, got {self.grid}")
        if self.out_channels != _OUT_CHANNELS:
            raise ValueError(
                f"output channel count is fixed at {_OUT_CHANNELS}, got {self.out_channels}"
            )
        if self.out_size != 2 * self.grid or self.out_size != _OUT_SIZE:
            raise ValueError(f"output size is fixed at {_OUT_SIZE}, got {self.out_size}")


@dataclass(frozen=True)
class ResNetConfig:
    blocks: tuple = (2, 2, 2, 2)
    base_width: int = 16

    def __post_init__(self) -> None:
        blocks = tuple(int(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if len(blocks) != 4 or any(b < 1 for b in blocks):
            raise ValueError(f"need four positive stage block counts, got {self.blocks}")
        if self.base_width < 1:
            raise ValueError(f"base width must be positive, got {self.base_width}")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "focal"
    gamma: float = 2.0
    alpha: float = 0.75

    def __post_init__(self) -> None:
        if self.kind not in ("bce", "focal"):
            raise ValueError(f"loss kind must be 'bce' or 'focal', got {self.kind!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _check_patch_batch(shape: tuple) -> tuple:
    if len(shape) != 5 or shape[1] != 3 or shape[2] != 6 or shape[3] != shape[4]:
        raise ValueError(f"patch batch must be Nx3x6xSxS, got {tuple(shape)}")
    return shape[0], shape[3]


class Upsampler(Module):
    """Patch stack to feature map.

    Slices and channels flatten into 18 planes (plane = slice*6 + channel),
    nearest-resize to the 16x16 grid, pass a learnable 1x1 projection, then
    nearest-upsample to 32 and a 3x3 conv + batchnorm + ReLU widens to 64.
    """

    def __init__(self, config: UpsamplerConfig = UpsamplerConfig(), *, rng, dtype=np.float32):
        super().__init__()
        self.config = config
        self.proj = Conv2d(config.planes, config.planes, 1, rng=rng, dtype=dtype)
        self.conv = Conv2d(
            config.planes, config.out_channels, 3, padding=1, bias=False, rng=rng, dtype=dtype
        )
        self.bn = BatchNorm2d(config.out_channels, dtype=dtype)

    def project(self, x):
        """The 18x16x16 intermediate: flatten, resize, 1x1 projection."""
        x = x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x))
        n, s = _check_patch_batch(x.shape)
        planes = x.reshape(n, self.config.planes, s, s)
        resized = nearest_resize(planes, self.config.grid, self.config.grid)
        return self.proj(resized)

    def forward(self, x):
        h = nearest_upsample2x(self.project(x))
        return relu(self.bn(self.conv(h)))


class BasicBlock(Module):
    """Two 3x3 conv+norm layers with a shortcut; the shortcut is the
    identity unless width or stride changes, then a 1x1 projection."""

    def __init__(self, c_in: int, c_out: int, stride: int, *, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride=stride, bias=False, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(c_out, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        s = x if self.proj is None else self.proj_bn(self.proj(x))
        return relu(h + s)


class ResNet(Module):
    """Four residual stages at strides 1,2,2,2 and widths w,2w,4w,8w,
    then global average pooling and a linear head producing one logit.

    The head starts at zero so an untrained classifier answers exactly
    0.5 for every input.
    """

    def __init__(
        self,
        config: ResNetConfig = ResNetConfig(),
        in_channels: int = _OUT_CHANNELS,
        *,
        rng,
        dtype=np.float32,
    ):
        super().__init__()
        if tuple(config.blocks) != (2, 2, 2, 2):
            raise ValueError(
                f"classifier requires the 18-layer stage signature [2, 2, 2, 2], "
                f"got {list(config.blocks)}"
            )
        self.in_channels = in_channels
        stages = []
        c = in_channels
        for width_mul, stride, count in zip((1, 2, 4, 8), (1, 2, 2, 2), config.blocks):
            w = config.base_width * width_mul
            blocks = [BasicBlock(c, w, stride, rng=rng, dtype=dtype)]
            blocks += [BasicBlock(w, w, 1, rng=rng, dtype=dtype) for _ in range(count - 1)]
            stages.append(ModuleList(blocks))
            c = w
        self.stages = ModuleList(stages)
        self.head = Linear(c, 1, rng=rng, dtype=dtype)
        self.head.w.data[...] = 0.0

    def forward(self, x):
        h = x
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return self.head(global_avg_pool(h)).reshape(-1)


class Detector(Module):
    """Upsampler plus classifier; the complete trainable Stage-2 model."""

    def __init__(
        self,
        resnet: ResNetConfig = ResNetConfig(),
        upsampler: UpsamplerConfig = UpsamplerConfig(),
        *,
        rng,
        dtype=np.float32,
    ):
        super().__init__()
        self.upsampler = Upsampler(upsampler, rng=rng, dtype=dtype)
        self.resnet = ResNet(resnet, in_channels=upsampler.out_channels, rng=rng, dtype=dtype)

    def forward(self, x, mode: str = "eval"):
        """Logits for an Nx3x6xSxS patch batch."""
        _check_mode(mode)
        self.train(mode == "train")
        return self.resnet(self.upsampler(x))

    def content_hash(self) -> str:
        return arrays_sha256(self.named_arrays())


def _probability(z: np.ndarray) -> np.ndarray:
    # double precision with a clipped exponent so the result never rounds
    # to exactly 0 or 1
    z = np.clip(np.asarray(z, dtype=np.float64), -36.0, 36.0)
    return 1.0 / (1.0 + np.exp(-z))


def upsample_project(patch, upsampler: Upsampler, mode: str = "eval"):
    """Feature map for one 3x6xSxS patch (or an Nx3x6xSxS batch).

    Differentiable: returns a DiffTensor connected to the upsampler
    parameters and, when the input is a DiffTensor, to the input.
    """
    _check_mode(mode)
    x = patch if isinstance(patch, DiffTensor) else DiffTensor(np.asarray(patch))
    single = x.ndim == 4
    if single:
        x = x.reshape(1, *x.shape)
    upsampler.train(mode == "train")
    out = upsampler(x)
    return out[0] if single else out


def resnet_forward(features, net: ResNet, mode: str = "eval"):
    """Probability for a 64x32x32 feature map (or a batch); strictly in (0, 1)."""
    _check_mode(mode)
    x = features if isinstance(features, DiffTensor) else DiffTensor(np.asarray(features))
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    net.train(mode == "train")
    with no_grad():
        z = net(x)
    p = _probability(z.data)
    return float(p[0]) if single else p


def predict_patches(data, detector: Detector, chunk: int = 256) -> np.ndarray:
    """Eval-mode probabilities for an Nx3x6xSxS patch array.

    A pure function of the patch values and the detector parameters;
    processed in chunks to bound peak activation memory.
    """
    x = np.asarray(data)
    n, _ = _check_patch_batch(x.shape)
    if chunk < 1:
        raise ValueError(f"chunk must be positive, got {chunk}")
    out = np.empty(n, dtype=np.float64)
    with no_grad():
        for start in range(0, n, chunk):
            z = detector(DiffTensor(x[start : start + chunk]), "eval")
            out[start : start + chunk] = _probability(z.data)
    return out


# -- scalar loss contract ----------------------------------------------


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


def _logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return np.log(p) - np.log1p(-p)


def bce_loss(p, y):
    """Binary cross-entropy -y ln p - (1-y) ln(1-p), evaluated in logit
    space for stability.  Elementwise over broadcast inputs."""
    z = _logit(p)
    y = _check_labels(y)
    out = np.logaddexp(0.0, z) - z * y
    return float(out) if out.ndim == 0 else out


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.75):
    """Focal loss a_t * (1 - p_t)^gamma * (-ln p_t) with p_t the
    probability of the true class and a_t = alpha for positives,
    1 - alpha for negatives.

    gamma = 0 drops the modulating factor and alpha = 1 disables class
    weighting entirely, reducing the expression exactly to bce_loss.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    z = _logit(p)
    y = _check_labels(y)
    out = np.logaddexp(0.0, z) - z * y  # equals -ln p_t
    if gamma != 0.0:
        out = (1.0 - np.exp(-out)) ** gamma * out
    if alpha != 1.0:
        out = (y * alpha + (1.0 - y) * (1.0 - alpha)) * out
    return float(out) if out.ndim == 0 else out


# -- training ----------------------------------------------------------


@dataclass
class Stage2Hyper:
    lr: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 8
    batch: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2 for batch statistics, got {self.batch}")


def _batch_loss(logits, targets, cfg: LossConfig):
    if cfg.kind == "bce":
        return bce_with_logits(logits, targets)
    return focal_with_logits(logits, targets, gamma=cfg.gamma, alpha=cfg.alpha)


def train_stage2(dataset, frozen_stage1, hyper: Stage2Hyper, config: ResNetConfig = ResNetConfig()):
    """Fit the detector on a labeled patch dataset.

    The dataset must have been built through the given frozen corrector;
    its hash is verified before and after the optimization so a drifting
    corrector is a hard failure, never a silent one.  frozen_stage1 may be
    None only for the corrector-free ablation, where the dataset must not
    carry a corrector hash either.  Returns (detector, log_lines) where
    log_lines is a CSV "epoch,loss,train_acc" series.
    """
    recorded = dataset.manifest.get("stage1_hash")
    if frozen_stage1 is None:
        if recorded is not None:
            raise RuntimeError(
                "dataset was built through a frozen corrector but none was supplied"
            )
    else:
        frozen_stage1.verify()
        if recorded is not None and recorded != frozen_stage1.hash:
            raise RuntimeError(
                "patch dataset was built through a different frozen corrector: "
                f"hash {recorded[:12]} != {frozen_stage1.hash[:12]}"
            )
    labels = np.asarray(dataset.labels)
    if labels.size < 2:
        raise ValueError("need at least two labeled patches to train")
    if np.any(labels < 0):
        raise ValueError("training patches must all carry 0/1 labels")
    x = np.asarray(dataset.data, dtype=np.float32)
    y = labels.astype(np.float32)
    n = len(x)

    stream = RngStream(hyper.seed)
    det = Detector(config, rng=stream.derive("stage2-init"))
    opt = AdamW(det.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    shuffle = stream.derive("stage2-shuffle").draw()
    batch = max(2, min(hyper.batch, n))
    log_lines = ["epoch,loss,train_acc"]
    for epoch in range(hyper.epochs):
        order = shuffle.permutation(n)
        chunks = [order[s : s + batch] for s in range(0, n, batch)]
        if len(chunks) > 1 and len(chunks[-1]) == 1:
            # batchnorm needs >= 2 rows; fold the trailing singleton in
            chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
        losses = []
        correct = 0
        for idx in chunks:
            logits = det(DiffTensor(x[idx]), "train")
            target = y[idx]
            loss = _batch_loss(logits, target, hyper.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int(np.sum((logits.data > 0) == (target > 0.5)))
        log_lines.append(f"{epoch},{float(np.mean(losses)):.8g},{correct / n:.6f}")
    det.eval()
    if frozen_stage1 is not None:
        frozen_stage1.verify()
    return det, log_lines
