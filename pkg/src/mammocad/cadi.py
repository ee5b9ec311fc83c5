"""DenseNet benign/malignant classifier over RoI patches."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cade import recalibrate_batchnorm
from .checkpoint import Checkpoint, CheckpointError
from .metrics import MetricError, roc_auc
from .postprocess import ROI_SIZE, RoiPatch

log = logging.getLogger(__name__)

CLASSES = ("benign", "malignant")


@dataclass(frozen=True)
class CadiModelConfig:
    growth_rate: int = 4
    num_dense_blocks: int = 4
    num_transitions: int = 3
    layers_per_block: int = 4
    initial_channels: int = 8
    compression: float = 0.5
    num_classes: int = 2
    input_size: int = ROI_SIZE
    in_channels: int = 1
    stem: str = "imagenet"  # 7x7/2 conv + 3x3/2 max pool; "small" is a 3x3/1 conv

    def __post_init__(self):
        if self.num_transitions != self.num_dense_blocks - 1:
            raise ValueError("num_transitions must equal num_dense_blocks - 1")
        if self.growth_rate < 1 or self.layers_per_block < 1 or self.initial_channels < 1:
            raise ValueError("growth_rate, layers_per_block and initial_channels must be >= 1")
        if not 0 < self.compression <= 1:
            raise ValueError("compression must lie in (0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.stem not in ("imagenet", "small"):
            raise ValueError(f"unknown stem {self.stem!r}")
        reduce = (4 if self.stem == "imagenet" else 1) * (1 << self.num_transitions)
        if self.input_size < reduce:
            raise ValueError(f"input_size {self.input_size} too small for {self.num_transitions} transitions")


@dataclass(frozen=True)
class CadiTrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-5
    gamma: float = 0.1
    initial_lr: float = 0.001
    batch_size: int = 8
    epochs: int = 30
    lr_step_epochs: tuple[int, ...] = (15, 25)
    seed: int = 0
    target_train_accuracy: Optional[float] = None  # stop once reached

    def __post_init__(self):
        object.__setattr__(self, "lr_step_epochs", tuple(int(e) for e in self.lr_step_epochs))
        if self.optimizer != "sgd":
            raise ValueError("only SGD is supported")
        if min(self.momentum, self.weight_decay, self.gamma, self.initial_lr) <= 0:
            raise ValueError("momentum, weight_decay, gamma and initial_lr must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")


@dataclass(frozen=True)
class ClassPrediction:
    probs: tuple[float, float]
    label: str
    provenance: tuple[str, int] = ("", 0)

    @property
    def p_malignant(self) -> float:
        return self.probs[1]


# -- network -----------------------------------------------------------------

class DenseLayer(nn.Module):
    def __init__(self, cin: int, growth: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(cin)
        self.conv = nn.Conv2d(cin, growth, 3, padding=1, bias=False)

    def forward(self, x):
        return self.conv(F.relu(self.norm(x)))


class DenseBlock(nn.Module):
    """Each layer sees the concatenation of the block input and all earlier outputs."""

    def __init__(self, cin: int, n_layers: int, growth: int):
        super().__init__()
        self.layers = nn.ModuleList([DenseLayer(cin + i * growth, growth) for i in range(n_layers)])
        self.out_channels = cin + n_layers * growth

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(torch.cat(features, dim=1)))
        return torch.cat(features, dim=1)


class Transition(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(cin)
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        return F.avg_pool2d(self.conv(F.relu(self.norm(x))), 2)


class DenseNet(nn.Module):
    def __init__(self, cfg: CadiModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.initial_channels
        if cfg.stem == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.in_channels, c, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.in_channels, c, 3, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(),
            )
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for b in range(cfg.num_dense_blocks):
            block = DenseBlock(c, cfg.layers_per_block, cfg.growth_rate)
            self.blocks.append(block)
            c = block.out_channels
            if b < cfg.num_transitions:
                cout = max(1, int(c * cfg.compression))
                self.transitions.append(Transition(c, cout))
                c = cout
        self.norm = nn.BatchNorm2d(c)
        self.classifier = nn.Linear(c, cfg.num_classes)
        self.feature_channels = c

    def forward(self, x):
        x = self.stem(x)
        for b, block in enumerate(self.blocks):
            x = block(x)
            if b < len(self.transitions):
                x = self.transitions[b](x)
        x = F.adaptive_avg_pool2d(F.relu(self.norm(x)), 1).flatten(1)
        return self.classifier(x)


def build_densenet(cfg: CadiModelConfig) -> DenseNet:
    return DenseNet(cfg)


def predict_label(logits) -> str:
    return CLASSES[int(np.argmax(np.asarray(logits)))]


# -- data --------------------------------------------------------------------

def patch_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0)[None]


def _crop(arr: np.ndarray, size: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    slack_y, slack_x = arr.shape[0] - size, arr.shape[1] - size
    if slack_y < 0 or slack_x < 0:
        raise ValueError(f"patch {arr.shape} smaller than input size {size}")
    if rng is None:
        oy, ox = slack_y // 2, slack_x // 2
    else:
        oy, ox = int(rng.integers(0, slack_y + 1)), int(rng.integers(0, slack_x + 1))
    return arr[oy:oy + size, ox:ox + size]


def _as_array(item) -> np.ndarray:
    return item.pixels if isinstance(item, RoiPatch) else np.asarray(item)


def _label_index(label) -> int:
    if isinstance(label, str):
        return CLASSES.index(label)
    return int(label)


def _batch(items, size: int, rng=None) -> torch.Tensor:
    return torch.stack([patch_tensor(_crop(_as_array(a), size, rng)) for a in items])


# -- training ----------------------------------------------------------------

def make_optimizer(model: nn.Module, tcfg: CadiTrainConfig):
    opt = torch.optim.SGD(
        model.parameters(), lr=tcfg.initial_lr, momentum=tcfg.momentum, weight_decay=tcfg.weight_decay
    )
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(tcfg.lr_step_epochs), gamma=tcfg.gamma)
    return opt, sched


def learning_rate_at(tcfg: CadiTrainConfig, epoch: int) -> float:
    """Learning rate in effect during 0-based ``epoch``."""
    drops = sum(1 for e in tcfg.lr_step_epochs if epoch >= e)
    return tcfg.initial_lr * tcfg.gamma ** drops


@torch.no_grad()
def _evaluate(model, x: torch.Tensor, y: torch.Tensor) -> dict:
    model.eval()
    logits = torch.cat([model(x[i:i + 32]) for i in range(0, len(x), 32)])
    loss = F.cross_entropy(logits, y).item()
    probs = torch.softmax(logits.double(), dim=1)[:, 1].numpy()
    acc = float((logits.argmax(1) == y).float().mean())
    try:
        auc = roc_auc(list(zip(probs, y.numpy())))
    except MetricError:
        auc = None
    return {"loss": loss, "accuracy": acc, "auc": auc}


def train_cadi(
    train_rois: Sequence[tuple[object, object]],
    val_rois: Sequence[tuple[object, object]],
    mcfg: CadiModelConfig,
    tcfg: CadiTrainConfig,
    init_state: Optional[dict] = None,
) -> Checkpoint:
    """Cross-entropy training with step-decayed SGD.

    ``train_rois``/``val_rois`` hold (patch, label) pairs; patches larger than
    the input size are randomly cropped for training and centre-cropped
    otherwise. ``init_state`` seeds the weights (see ``load_pretrained``).
    """
    labels = [_label_index(lab) for _, lab in train_rois]
    if len(set(labels)) < 2:
        raise ValueError("training set must contain both classes")
    torch.manual_seed(tcfg.seed)
    model = build_densenet(mcfg)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt, sched = make_optimizer(model, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    shuffler = torch.Generator().manual_seed(tcfg.seed)

    items = [a for a, _ in train_rois]
    y_train = torch.tensor(labels)
    x_train_eval = _batch(items, mcfg.input_size)
    has_val = len(val_rois) > 0
    if has_val:
        x_val = _batch([a for a, _ in val_rois], mcfg.input_size)
        y_val = torch.tensor([_label_index(lab) for _, lab in val_rois])

    history, best = [], None
    for epoch in range(tcfg.epochs):
        model.train()
        lr = opt.param_groups[0]["lr"]
        order = torch.randperm(len(items), generator=shuffler).tolist()
        total = 0.0
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            if len(idx) < 2 and len(order) > 1:
                idx = order[i - 1:i + 1]  # BatchNorm needs two samples
            x = _batch([items[j] for j in idx], mcfg.input_size, rng)
            loss = F.cross_entropy(model(x), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()

        recalibrate_batchnorm(model, x_train_eval, 32)
        entry = {"epoch": epoch + 1, "lr": lr, "train_loss": total / len(items)}
        tr = _evaluate(model, x_train_eval, y_train)
        entry["train_accuracy"] = tr["accuracy"]
        if has_val:
            va = _evaluate(model, x_val, y_val)
            entry.update(val_loss=va["loss"], val_accuracy=va["accuracy"], val_auc=va["auc"])
        history.append(entry)
        log.info("cadi epoch %d %s", epoch + 1, entry)

        key = (entry["val_accuracy"], -entry["val_loss"]) if has_val else None
        if best is None or not has_val or key > best[0]:
            best = (key, epoch + 1, copy.deepcopy(model.state_dict()))
        if tcfg.target_train_accuracy is not None and tr["accuracy"] >= tcfg.target_train_accuracy:
            if not has_val:
                best = (key, epoch + 1, copy.deepcopy(model.state_dict()))
            break

    _, best_epoch, state = best
    return Checkpoint(
        kind="cadi",
        config=asdict(mcfg),
        state=state,
        epoch=best_epoch,
        seed=tcfg.seed,
        metrics_log=history,
        extra={"train_config": asdict(tcfg)},
    )


# -- transfer learning -------------------------------------------------------

def _state_from_file(path) -> dict:
    path = Path(path)
    if not path.is_file() or path.stat().st_size == 0:
        raise CheckpointError(f"pretrained weight file missing or empty: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read weights from {path}: {exc}") from exc
    if isinstance(blob, dict) and "state" in blob and isinstance(blob["state"], dict):
        blob = blob["state"]
    if not isinstance(blob, dict) or not all(isinstance(v, torch.Tensor) for v in blob.values()):
        raise CheckpointError(f"{path} does not contain a tensor dictionary")
    return blob


def load_pretrained(ckpt_path, mcfg: CadiModelConfig, expand_channels: bool = True):
    """Copy every shape-compatible tensor from a weight file into a fresh model.

    With ``expand_channels``, multi-channel stem filters are summed over
    their input channels to fit a single-channel model. Returns
    ``(state_dict, report)`` with ``report = {"loaded": [...], "skipped": [...]}``.
    """
    source = _state_from_file(ckpt_path)
    torch.manual_seed(0)
    target = build_densenet(mcfg).state_dict()
    loaded, skipped = [], []
    for name, tensor in target.items():
        src = source.get(name)
        if src is not None and src.shape != tensor.shape and expand_channels and src.dim() == 4:
            if src.shape[0] == tensor.shape[0] and src.shape[2:] == tensor.shape[2:] and tensor.shape[1] == 1:
                src = src.sum(dim=1, keepdim=True)
        if src is not None and src.shape == tensor.shape:
            target[name] = src.clone().to(tensor.dtype)
            loaded.append(name)
        else:
            skipped.append(name)
    if not any(not n.endswith("num_batches_tracked") for n in loaded):
        raise CheckpointError("no layer of the weight file matches this architecture")
    return target, {"loaded": loaded, "skipped": skipped}


# -- inference ---------------------------------------------------------------

def load_classifier(ckpt: Checkpoint) -> DenseNet:
    if ckpt.kind != "cadi":
        raise CheckpointError(f"expected a cadi checkpoint, got {ckpt.kind!r}")
    try:
        model = build_densenet(CadiModelConfig(**ckpt.config))
        model.load_state_dict(ckpt.state)
    except (TypeError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    model.eval()
    return model


def _prediction(logits: torch.Tensor, provenance) -> ClassPrediction:
    p = torch.softmax(logits.double(), dim=0).numpy()
    return ClassPrediction((float(p[0]), float(p[1])), predict_label(p), tuple(provenance))


def classify(ckpt, roi) -> ClassPrediction:
    model = ckpt if isinstance(ckpt, DenseNet) else load_classifier(ckpt)
    model.eval()
    provenance = roi.provenance if isinstance(roi, RoiPatch) else ("", 0)
    with torch.no_grad():
        logits = model(_batch([roi], model.cfg.input_size))[0]
    return _prediction(logits, provenance)


def classify_many(ckpt, rois: Sequence, provenances: Optional[Sequence] = None) -> list[ClassPrediction]:
    model = ckpt if isinstance(ckpt, DenseNet) else load_classifier(ckpt)
    model.eval()
    out = []
    for i in range(0, len(rois), 32):
        chunk = rois[i:i + 32]
        with torch.no_grad():
            logits = model(_batch(chunk, model.cfg.input_size))
        for j, lg in enumerate(logits):
            k = i + j
            prov = provenances[k] if provenances is not None else (
                rois[k].provenance if isinstance(rois[k], RoiPatch) else ("", k))
            out.append(_prediction(lg, prov))
    return out
