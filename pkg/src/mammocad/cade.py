"""Conditional-GAN lesion detector: U-Net generator, PatchGAN discriminator."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, CheckpointError
from .data import DatasetManifest, GrayImage, read_image, read_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CadeModelConfig:
    input_size: int = 64
    generator_depth: int = 3
    base_channels: int = 16
    discriminator_layers: int = 3
    use_batchnorm: bool = True

    def __post_init__(self):
        if self.generator_depth < 1:
            raise ValueError("generator_depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.input_size % (1 << self.generator_depth):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{self.generator_depth}"
            )
        if self.discriminator_layers < 1 or self.input_size >> self.discriminator_layers < 2:
            raise ValueError("discriminator_layers leaves no patch grid at this input size")


@dataclass(frozen=True)
class CadeTrainConfig:
    learning_rate: float = 4e-5
    batch_size: int = 16
    epochs: int = 50
    lambda_l1: float = 100.0
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" or "adam"
    momentum: float = 0.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def desk(cls, **overrides) -> "CadeTrainConfig":
        """CPU-scale preset; the class defaults are the reference settings."""
        params = dict(learning_rate=2e-3, batch_size=8, epochs=20, optimizer="adam")
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    values: np.ndarray  # (height, width) floats in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("probability map must be 2D")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("probabilities outside [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_image(self) -> GrayImage:
        return GrayImage(np.rint(self.values * 65535).astype(np.uint16), 16)

    @classmethod
    def from_image(cls, img: GrayImage) -> "ProbabilityMap":
        return cls(img.pixels.astype(np.float64) / 65535.0)


# -- networks ----------------------------------------------------------------

def _conv_block(cin, cout, bn: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, padding=1, bias=not bn)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class UNetGenerator(nn.Module):
    """Encoder-decoder with a skip connection at every resolution level."""

    def __init__(self, cfg: CadeModelConfig):
        super().__init__()
        self.cfg = cfg
        bn = cfg.use_batchnorm
        ch = [cfg.base_channels << i for i in range(cfg.generator_depth + 1)]
        self.encoders = nn.ModuleList(
            [_conv_block(1, ch[0], bn=False)]
            + [_conv_block(ch[i - 1], ch[i], bn) for i in range(1, len(ch))]
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(cfg.generator_depth)]
        )
        self.decoders = nn.ModuleList(
            [_conv_block(2 * ch[i], ch[i], bn=bn and i > 0) for i in range(cfg.generator_depth)]
        )
        self.head = nn.Conv2d(ch[0], 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        step = 1 << self.cfg.generator_depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by {step}")
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        for i in reversed(range(self.cfg.generator_depth)):
            x = self.ups[i](x)
            x = self.decoders[i](torch.cat([skips[i], x], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class PatchDiscriminator(nn.Module):
    """Scores (image, mask) pairs with a grid of per-patch logits."""

    def __init__(self, cfg: CadeModelConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        cin = 2
        for j in range(cfg.discriminator_layers):
            cout = cfg.base_channels * min(1 << j, 8)
            bn = cfg.use_batchnorm and j > 0
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not bn))
            if bn:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU())
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if image.shape != mask.shape:
            raise ValueError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} differ")
        return self.net(torch.cat([image, mask], dim=1))


def patch_grid_size(input_size: int, discriminator_layers: int) -> int:
    return input_size // (1 << discriminator_layers) - 1


def build_generator(cfg: CadeModelConfig) -> UNetGenerator:
    return UNetGenerator(cfg)


def build_discriminator(cfg: CadeModelConfig) -> PatchDiscriminator:
    return PatchDiscriminator(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- data --------------------------------------------------------------------

def image_to_tensor(pixels: np.ndarray, max_value: int = 255) -> torch.Tensor:
    return torch.from_numpy(pixels.astype(np.float32) / (max_value / 2.0) - 1.0)[None]


def resize(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (N, C, H, W) tensor."""
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    shrinking = t.shape[-1] > size[1] or t.shape[-2] > size[0]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=shrinking)


def resize_mask(bits: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(bits.astype(np.float32))[None, None]
    if bits.shape != (size, size):
        t = F.interpolate(t, size=(size, size), mode="area")
    return (t >= 0.5).float()[0]


def load_cade_arrays(manifest: DatasetManifest, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for rec in manifest.records:
        if rec.mask_path is None:
            raise ValueError(f"record {rec.image_id} has no mask")
        img = read_image(rec.image_path, rec.bit_depth)
        x = image_to_tensor(img.pixels, img.max_value)[None]
        xs.append(resize(x, (size, size))[0])
        ys.append(resize_mask(read_mask(rec.mask_path).bits, size))
    return torch.stack(xs), torch.stack(ys)


# -- training ----------------------------------------------------------------

def _make_optimizer(params, tcfg: CadeTrainConfig):
    if tcfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=tcfg.learning_rate, betas=(0.5, 0.999))
    return torch.optim.SGD(params, lr=tcfg.learning_rate, momentum=tcfg.momentum)


@torch.no_grad()
def recalibrate_batchnorm(model: nn.Module, inputs: torch.Tensor, batch_size: int) -> None:
    """Replace BN running statistics with exact averages over ``inputs``."""
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    was_training = model.training
    model.train()
    for i in range(0, len(inputs), batch_size):
        model(inputs[i:i + batch_size])
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.train(was_training)


def soft_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    a, b = pred.sum(), truth.sum()
    if a + b == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / (a + b))


@torch.no_grad()
def predict_batch(gen: UNetGenerator, x: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    gen.eval()
    return torch.cat([gen(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def mean_dice(gen: UNetGenerator, x: torch.Tensor, y: torch.Tensor, threshold: float = 0.5) -> float:
    p = predict_batch(gen, x).numpy() >= threshold
    t = y.numpy() >= 0.5
    return float(np.mean([soft_dice(p[i, 0], t[i, 0]) for i in range(len(p))]))


def fit_cade(
    x_train: torch.Tensor,
    y_train: torch.Tensor,
    x_val: Optional[torch.Tensor],
    y_val: Optional[torch.Tensor],
    mcfg: CadeModelConfig,
    tcfg: CadeTrainConfig,
) -> Checkpoint:
    """Adversarial + L1 training on in-memory (N, 1, S, S) tensors."""
    if len(x_train) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(tcfg.seed)
    gen = build_generator(mcfg)
    disc = build_discriminator(mcfg)
    opt_g = _make_optimizer(gen.parameters(), tcfg)
    opt_d = _make_optimizer(disc.parameters(), tcfg)
    bce = nn.BCEWithLogitsLoss()
    shuffler = torch.Generator().manual_seed(tcfg.seed)
    has_val = x_val is not None and len(x_val) > 0

    best = None
    history: list[dict] = []
    for epoch in range(1, tcfg.epochs + 1):
        gen.train()
        disc.train()
        order = torch.randperm(len(x_train), generator=shuffler)
        sums = {"g_loss": 0.0, "d_loss": 0.0, "l1": 0.0}
        batches = 0
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            x, y = x_train[idx], y_train[idx]
            fake = gen(x)

            opt_d.zero_grad()
            real_logits = disc(x, y)
            fake_logits = disc(x, fake.detach())
            d_loss = 0.5 * (
                bce(real_logits, torch.ones_like(real_logits))
                + bce(fake_logits, torch.zeros_like(fake_logits))
            )
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad()
            adv_logits = disc(x, fake)
            l1 = F.l1_loss(fake, y)
            g_loss = bce(adv_logits, torch.ones_like(adv_logits)) + tcfg.lambda_l1 * l1
            g_loss.backward()
            opt_g.step()

            sums["g_loss"] += g_loss.item()
            sums["d_loss"] += d_loss.item()
            sums["l1"] += l1.item()
            batches += 1

        recalibrate_batchnorm(gen, x_train, max(tcfg.batch_size, 32))
        entry = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        if has_val:
            entry["val_dice"] = mean_dice(gen, x_val, y_val, tcfg.threshold)
        history.append(entry)
        log.info("cade epoch %d %s", epoch, entry)
        score = entry.get("val_dice", 0.0)
        if best is None or (has_val and score > best[0]) or not has_val:
            best = (score, epoch, copy.deepcopy(gen.state_dict()), copy.deepcopy(disc.state_dict()))

    _, best_epoch, g_state, d_state = best
    return Checkpoint(
        kind="cade",
        config=asdict(mcfg),
        state=g_state,
        epoch=best_epoch,
        seed=tcfg.seed,
        metrics_log=history,
        extra={"discriminator": d_state, "train_config": asdict(tcfg)},
    )


def train_cade(
    train: DatasetManifest,
    val: Optional[DatasetManifest],
    mcfg: CadeModelConfig,
    tcfg: CadeTrainConfig,
) -> Checkpoint:
    if len(train.records) == 0:
        raise ValueError("empty training manifest")
    missing = [r.image_id for r in train.records if r.mask_path is None]
    if val is not None:
        missing += [r.image_id for r in val.records if r.mask_path is None]
    if missing:
        raise ValueError(f"records without masks: {', '.join(missing[:5])}")
    x_tr, y_tr = load_cade_arrays(train, mcfg.input_size)
    x_va = y_va = None
    if val is not None and len(val.records):
        x_va, y_va = load_cade_arrays(val, mcfg.input_size)
    return fit_cade(x_tr, y_tr, x_va, y_va, mcfg, tcfg)


# -- inference ---------------------------------------------------------------

def load_generator(ckpt: Checkpoint) -> UNetGenerator:
    if ckpt.kind != "cade":
        raise CheckpointError(f"expected a cade checkpoint, got {ckpt.kind!r}")
    try:
        cfg = CadeModelConfig(**ckpt.config)
        gen = build_generator(cfg)
        gen.load_state_dict(ckpt.state)
    except (TypeError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    gen.eval()
    return gen


def infer_probability_map(ckpt, img: GrayImage) -> ProbabilityMap:
    """Run the generator at the image's own resolution."""
    gen = ckpt if isinstance(ckpt, UNetGenerator) else load_generator(ckpt)
    gen.eval()
    x = image_to_tensor(img.pixels, img.max_value)[None]
    with torch.no_grad():
        p = gen(x)[0, 0].double().numpy()
    return ProbabilityMap(np.clip(p, 0.0, 1.0))


class Detector:
    """Resizes to the generator's input size and maps the result back."""

    def __init__(self, ckpt: Checkpoint):
        self.gen = load_generator(ckpt)
        self.size = self.gen.cfg.input_size

    def __call__(self, img: GrayImage) -> ProbabilityMap:
        x = image_to_tensor(img.pixels, img.max_value)[None]
        with torch.no_grad():
            p = self.gen(resize(x, (self.size, self.size)))
            p = resize(p, (img.height, img.width))
        return ProbabilityMap(np.clip(p[0, 0].double().numpy(), 0.0, 1.0))
