"""Model checkpoints shared by the detector and the classifier."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "cade" or "cadi"
    config: dict
    state: dict[str, torch.Tensor]
    epoch: int = 0
    seed: int = 0
    metrics_log: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def parameter_index(self, trainable_names=None) -> list[tuple[str, tuple[int, ...]]]:
        names = trainable_names if trainable_names is not None else list(self.state)
        return [(n, tuple(self.state[n].shape)) for n in names]

    def flat_parameters(self, trainable_names=None) -> np.ndarray:
        """Concatenate tensors (all state entries by default) into one vector."""
        names = trainable_names if trainable_names is not None else list(self.state)
        if not names:
            return np.zeros(0)
        return np.concatenate([self.state[n].detach().double().reshape(-1).numpy() for n in names])

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "kind": self.kind,
                "config": dict(self.config),
                "state": {k: v.detach().cpu() for k, v in self.state.items()},
                "epoch": int(self.epoch),
                "seed": int(self.seed),
                "metrics_log": list(self.metrics_log),
                "extra": copy.deepcopy(self.extra),
            },
            path,
        )

    @classmethod
    def load(cls, path, kind=None) -> "Checkpoint":
        path = Path(path)
        if not path.is_file() or path.stat().st_size == 0:
            raise CheckpointError(f"checkpoint file missing or empty: {path}")
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch raises a zoo of types for corrupt archives
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(blob, dict) or "state" not in blob:
            raise CheckpointError(f"{path} is not a checkpoint")
        ckpt = cls(
            kind=blob.get("kind", ""),
            config=blob.get("config", {}),
            state=blob["state"],
            epoch=blob.get("epoch", 0),
            seed=blob.get("seed", 0),
            metrics_log=blob.get("metrics_log", []),
            extra=blob.get("extra", {}),
        )
        if kind is not None and ckpt.kind != kind:
            raise CheckpointError(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
        return ckpt
