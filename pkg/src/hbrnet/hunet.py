"""Stage 1: learnable transform-domain corrector for biomarker slices.

The network is a small encoder-decoder over six-channel slices whose
"convolutions" live in the 2-D Walsh-Hadamard domain: each block
transforms per channel, optionally drops coefficients (train mode),
applies a learnable soft threshold per coefficient, transforms back,
mixes channels with a 1x1 convolution, rescales, and rectifies.  Trained
against reference-corrected targets, then frozen and used as a fixed
preprocessing step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .biasfield import reference_correct
from .checkpoint import arrays_sha256
from .layers import (
    Conv2d,
    Module,
    ModuleList,
    avg_pool2x2,
    nearest_upsample2x,
    softshrink,
    wht2d,
)
from .optim import AdamW
from .rng import RngStream
from .tensor import DiffTensor, concat, no_grad, relu, tsum
from .volume_io import BiomarkerVolume, MaskVolume, dilate_mask

# Fixed per-channel scales (rough physical maxima) applied at the network
# boundary so all six channels train on comparable magnitudes.
CHANNEL_SCALE = np.array([0.6, 0.3, 2.0, 1.8, 130.0, 100.0], dtype=np.float32)

# damping applied to random 1x1 mixer weights at init; the surviving
# identity embedding makes the whole net start close to a passthrough,
# kept well below the bias-error floor the loss starts from
_IDENTITY_INIT_NOISE = 0.005


@dataclass
class HUNetConfig:
    levels: int = 3
    widths: tuple = (16, 24, 32)
    coeff_dropout_rate: float = 0.1
    pad_target: int = 64

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.widths) != self.levels:
            raise ValueError(
                f"need one width per level, got {len(self.widths)} widths for {self.levels} levels"
            )
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if not 0.0 <= self.coeff_dropout_rate < 1.0:
            raise ValueError(
                f"coeff_dropout_rate must lie in [0, 1), got {self.coeff_dropout_rate}"
            )
        p = self.pad_target
        if p < 1 or p & (p - 1):
            raise ValueError(f"pad target must be a power of two, got {p}")
        if p >> (self.levels - 1) < 2:
            raise ValueError(
                f"pad target {p} is too small for {self.levels} pooling levels"
            )


@dataclass
class Stage1Hyper:
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 8
    weight_decay: float = 0.0
    loss_mask_radius: int = 0
    lr_schedule: str = "cosine"
    lesion_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if self.loss_mask_radius < 0:
            raise ValueError(f"loss mask radius must be nonnegative, got {self.loss_mask_radius}")
        if self.lr_schedule not in ("flat", "cosine"):
            raise ValueError(f"lr_schedule must be 'flat' or 'cosine', got {self.lr_schedule!r}")
        if self.lesion_weight < 1.0:
            raise ValueError(f"lesion_weight must be >= 1, got {self.lesion_weight}")


def coeff_dropout(coeffs: DiffTensor, rate: float, rng: np.random.Generator) -> DiffTensor:
    """Zero non-DC coefficients independently with probability `rate` and
    rescale survivors by 1/(1-rate); the DC coefficient [..., 0, 0] always
    passes through unscaled.  Identity at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return coeffs
    keep = rng.random(coeffs.shape) >= rate
    scale = keep.astype(coeffs.data.dtype) / np.float32(1.0 - rate)
    scale[..., 0, 0] = 1.0
    return coeffs * DiffTensor(scale)


class _ShrinkBlock(Module):
    """WHT -> (dropout) -> softshrink -> WHT -> 1x1 mix -> affine -> ReLU."""

    def __init__(self, c_in: int, c_out: int, size: int, drop_rate: float, *, rng):
        super().__init__()
        self.drop_rate = drop_rate
        self.thresholds = DiffTensor(
            np.zeros((c_in, size, size), dtype=np.float32), requires_grad=True
        )
        self.mix = Conv2d(c_in, c_out, 1, rng=rng)
        self.gamma = DiffTensor(np.ones((1, c_out, 1, 1), dtype=np.float32), requires_grad=True)
        self.beta = DiffTensor(np.zeros((1, c_out, 1, 1), dtype=np.float32), requires_grad=True)

    def forward(self, x: DiffTensor, mode: str, rng) -> DiffTensor:
        c = wht2d(x)
        if mode == "train" and self.drop_rate > 0.0:
            c = coeff_dropout(c, self.drop_rate, rng)
        c = softshrink(c, self.thresholds)
        y = wht2d(c)
        y = self.mix(y) * self.gamma + self.beta
        return relu(y)


class HUNet(Module):
    """Parameter container and forward pass; operates on channel-scaled
    slices padded to (pad_target, pad_target)."""

    def __init__(self, config: HUNetConfig, *, rng):
        super().__init__()
        self.config = config
        sizes = [config.pad_target >> i for i in range(config.levels)]
        widths = config.widths
        self.enc = ModuleList()
        c = len(CHANNEL_SCALE)
        for i in range(config.levels):
            self.enc.append(
                _ShrinkBlock(c, widths[i], sizes[i], config.coeff_dropout_rate, rng=rng)
            )
            c = widths[i]
        self.dec = ModuleList()
        for i in range(config.levels - 2, -1, -1):
            self.dec.append(
                _ShrinkBlock(
                    widths[i + 1] + widths[i],
                    widths[i],
                    sizes[i],
                    config.coeff_dropout_rate,
                    rng=rng,
                )
            )
        self.head = Conv2d(widths[0], len(CHANNEL_SCALE), 1, rng=rng)
        self._identity_mix_init()

    def _identity_mix_init(self) -> None:
        """Start as a passthrough: damp the random 1x1 mixers and thread an
        identity for the biomarker channels through every block, so the
        initial forward reproduces its input (thresholds start at zero) and
        training only departs from identity where that lowers the loss."""
        c6 = len(CHANNEL_SCALE)
        widths = self.config.widths

        def embed(conv, col_offset):
            w = conv.w.data
            w *= _IDENTITY_INIT_NOISE
            m = min(c6, w.shape[0], w.shape[1] - col_offset)
            for k in range(m):
                w[k, col_offset + k, 0, 0] += 1.0

        for block in self.enc:
            embed(block.mix, 0)
        for j, block in enumerate(self.dec):
            i = self.config.levels - 2 - j
            embed(block.mix, widths[i + 1])
        embed(self.head, 0)

    def forward(self, x: DiffTensor, mode: str = "eval", rng=None) -> DiffTensor:
        if mode == "train" and self.config.coeff_dropout_rate > 0.0 and rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        skips = []
        h = x
        for i in range(self.config.levels):
            h = self.enc[i](h, mode, rng)
            if i < self.config.levels - 1:
                skips.append(h)
                h = avg_pool2x2(h)
        for j in range(len(self.dec)):
            h = nearest_upsample2x(h)
            h = concat([h, skips[-(j + 1)]], axis=1)
            h = self.dec[j](h, mode, rng)
        return self.head(h)

    def clamp_thresholds(self) -> None:
        for name, p in self.named_parameters():
            if name.endswith("thresholds"):
                np.maximum(p.data, 0.0, out=p.data)

    def content_hash(self) -> str:
        return arrays_sha256(self.named_arrays())


def make_hunet(config: HUNetConfig, seed: int = 0) -> HUNet:
    return HUNet(config, rng=RngStream(seed).derive("stage1-init"))


def set_identity(net: HUNet) -> HUNet:
    """Configure the network to reproduce nonnegative inputs exactly: zero
    thresholds and offsets, identity channel mixes.  Only single-level
    configurations with matching widths admit square mixes."""
    for name, p in net.named_parameters():
        if name.endswith("thresholds"):
            p.data[...] = 0.0
        elif name.endswith("beta"):
            p.data[...] = 0.0
        elif name.endswith("gamma"):
            p.data[...] = 1.0
        elif name.endswith(".w"):
            c_out, c_in = p.data.shape[:2]
            if c_out != c_in:
                raise ValueError(
                    f"cannot set an identity mix for {name}: {c_in} -> {c_out} channels"
                )
            p.data[...] = np.eye(c_out, dtype=np.float32).reshape(c_out, c_in, 1, 1)
        elif name.endswith(".b"):
            p.data[...] = 0.0
    return net


def _pad_slices(slices: np.ndarray, target: int) -> np.ndarray:
    """(N, C, H, W) zero-padded bottom/right to (target, target)."""
    n, c, h, w = slices.shape
    if h > target or w > target:
        raise ValueError(f"slice {h}x{w} exceeds pad target {target}")
    out = np.zeros((n, c, target, target), dtype=np.float32)
    out[:, :, :h, :w] = slices
    return out


def hunet_forward(
    x: np.ndarray, net: HUNet, mode: str = "eval", rng=None
) -> np.ndarray:
    """Correct one raw (6, H, W) slice; returns the same shape and units."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != len(CHANNEL_SCALE):
        raise ValueError(f"expected a (6, H, W) slice, got {x.shape}")
    _, h, w = x.shape
    scale = CHANNEL_SCALE[:, None, None]
    padded = _pad_slices((x / scale)[None], net.config.pad_target)
    with no_grad():
        out = net(DiffTensor(padded), mode, rng).data
    return out[0, :, :h, :w] * scale


def correct_volume(net: HUNet, volume, batch: int = 16) -> np.ndarray:
    """Eval-mode correction of a (6, Z, H, W) stack, slice by slice."""
    data = volume.data if isinstance(volume, BiomarkerVolume) else np.asarray(volume)
    if data.ndim != 4 or data.shape[0] != len(CHANNEL_SCALE):
        raise ValueError(f"expected a (6, Z, H, W) volume, got {data.shape}")
    _, z, h, w = data.shape
    scale = CHANNEL_SCALE[:, None, None, None]
    slices = np.ascontiguousarray((data / scale).transpose(1, 0, 2, 3).astype(np.float32))
    padded = _pad_slices(slices, net.config.pad_target)
    rows = []
    with no_grad():
        for start in range(0, z, batch):
            rows.append(net(DiffTensor(padded[start : start + batch])).data)
    out = np.concatenate(rows, axis=0)[:, :, :h, :w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out) * scale


# -- training ----------------------------------------------------------


def stage1_targets(record, k: int = 4, iters: int = 5) -> np.ndarray:
    """Reference-corrected (6, Z, H, W) regression targets for one patient.

    For cancerous patients the reference fit runs on the prostate minus
    the cancer region (known at training time) so lesion contrast cannot
    bend the estimated field; the correction still applies everywhere."""
    fit_mask = record.prostate_mask
    if record.has_cancer:
        keep = (record.prostate_mask.values > 0) & (record.cancer_mask.values == 0)
        fit_mask = MaskVolume(keep.astype(np.uint8))
    targets = np.empty_like(record.observed.data)
    for ci in range(targets.shape[0]):
        targets[ci], _ = reference_correct(
            record.observed.data[ci], fit_mask, k=k, iters=iters
        )
    return targets


def _assemble_slices(records, pad_target: int, mask_radius: int = 0,
                     lesion_weight: float = 1.0):
    """Per-slice training triples (input, target, loss weight), channel
    scaled and padded; slices without any mask coverage are skipped.

    The loss region defaults to the undilated mask: reference targets
    are only trustworthy where the reference fit had support.  Lesion
    voxels may be upweighted; each slice's weights are renormalised to a
    constant total so slices keep equal shares of the loss."""
    xs, ys, ws = [], [], []
    scale = CHANNEL_SCALE[:, None, None]
    for rec in records:
        if not rec.prostate_mask.values.any():
            continue
        region = dilate_mask(rec.prostate_mask, mask_radius).values
        targets = stage1_targets(rec)
        for zi in range(region.shape[0]):
            count = int(region[zi].sum())
            if count == 0:
                continue
            xs.append(rec.observed.data[:, zi] / scale)
            ys.append(targets[:, zi] / scale)
            w_sl = region[zi].astype(np.float32)
            if lesion_weight != 1.0:
                w_sl = w_sl * (1.0 + (lesion_weight - 1.0)
                               * rec.cancer_mask.values[zi].astype(np.float32))
            ws.append(w_sl / (len(CHANNEL_SCALE) * w_sl.sum()))
    if not xs:
        raise ValueError("empty training split: no slices intersect the mask")
    x = _pad_slices(np.stack(xs), pad_target)
    y = _pad_slices(np.stack(ys), pad_target)
    w = _pad_slices(np.stack(ws)[:, None], pad_target)
    return x, y, w


def masked_mse(pred: DiffTensor, target: np.ndarray, weight: np.ndarray) -> DiffTensor:
    """Mean over the batch of per-slice masked MSE summed across channels."""
    diff = pred - DiffTensor(target)
    weighted = diff * diff * DiffTensor(weight)
    return tsum(weighted) * (1.0 / pred.shape[0])


def train_stage1(records, config: HUNetConfig, hyper: Stage1Hyper):
    """Fit the corrector on reference-corrected targets.

    Returns (net, log_lines) where log_lines is a CSV "epoch,mean_loss"
    series, one row per epoch.
    """
    if not records:
        raise ValueError("empty training split")
    stream = RngStream(hyper.seed)
    net = HUNet(config, rng=stream.derive("stage1-init"))
    x, y, w = _assemble_slices(records, config.pad_target, hyper.loss_mask_radius,
                               hyper.lesion_weight)
    n = x.shape[0]
    batch = min(hyper.batch, n)
    opt = AdamW(net.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    shuffle = stream.derive("stage1-shuffle").draw()
    dropout = stream.derive("stage1-dropout").draw()
    log_lines = ["epoch,mean_loss"]
    net.train()
    for epoch in range(hyper.epochs):
        if hyper.lr_schedule == "cosine":
            opt.lr = hyper.lr * 0.5 * (1.0 + float(np.cos(np.pi * epoch / hyper.epochs)))
        order = shuffle.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            pred = net(DiffTensor(x[idx]), "train", dropout)
            loss = masked_mse(pred, y[idx], w[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            net.clamp_thresholds()
            losses.append(loss.item())
        log_lines.append(f"{epoch},{float(np.mean(losses)):.8g}")
    net.eval()
    return net, log_lines


# -- freezing ----------------------------------------------------------


class FrozenStage1:
    """Eval-only handle around trained parameters; the content hash taken
    at freeze time must match for as long as the handle is used."""

    def __init__(self, net: HUNet):
        self._net = net.eval()
        self.hash = net.content_hash()

    def verify(self) -> None:
        current = self._net.content_hash()
        if current != self.hash:
            raise RuntimeError(
                f"frozen stage-1 parameters changed: hash {current[:12]} != {self.hash[:12]}"
            )

    def correct_slice(self, x) -> np.ndarray:
        if isinstance(x, DiffTensor):
            raise TypeError(
                "frozen stage-1 rejects differentiable inputs; gradients cannot "
                "flow through the frozen corrector"
            )
        return hunet_forward(np.asarray(x), self._net, "eval", None)

    def correct_volume(self, volume) -> np.ndarray:
        if isinstance(volume, DiffTensor):
            raise TypeError(
                "frozen stage-1 rejects differentiable inputs; gradients cannot "
                "flow through the frozen corrector"
            )
        return correct_volume(self._net, volume)


def freeze(net: HUNet) -> FrozenStage1:
    return FrozenStage1(net)
