"""Model checkpoints: one container format, tagged by model kind.

Every checkpoint embeds the full config, every parameter tensor (bit-exact
float64), and the training seed, so ``load -> save`` reproduces the file
byte for byte and ``load -> score`` reproduces the model's outputs exactly.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from capsanom.baselines import (
    AutoencoderConfig,
    AutoencoderModel,
    DnnConfig,
    DnnModel,
    IsolationForest,
    IsolationForestConfig,
    IsolationTree,
)
from capsanom.capsnet import CapsNetModel, DecoderConfig, EncoderConfig, LossParams
from capsanom.container import read_container, write_container
from capsanom.errors import FormatError
from capsanom.tensor import Tensor

MODEL_KINDS = ("capsnet", "dnn", "autoencoder", "iforest")


def _tensor_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {
        name: Tensor(data, requires_grad=True, name=name)
        for name, data in arrays.items()
    }


def save_checkpoint(model, path: str | Path, seed: int) -> None:
    """Write any supported model to ``path``."""
    if isinstance(model, CapsNetModel):
        meta = {"model": "capsnet", "config": model.config_dict(), "seed": seed}
        arrays = {name: p.data for name, p in model.params.items()}
    elif isinstance(model, DnnModel):
        meta = {"model": "dnn", "config": asdict(model.config), "seed": seed}
        arrays = {name: p.data for name, p in model.params.items()}
    elif isinstance(model, AutoencoderModel):
        meta = {
            "model": "autoencoder",
            "config": asdict(model.config),
            "seed": seed,
            "threshold": model.threshold,
        }
        arrays = {name: p.data for name, p in model.params.items()}
    elif isinstance(model, IsolationForest):
        meta = {
            "model": "iforest",
            "config": asdict(model.config),
            "seed": seed,
            "psi": model.psi,
            "max_depth": model.max_depth,
        }
        arrays = _forest_arrays(model)
    else:
        raise FormatError(f"cannot checkpoint a {type(model).__name__}")
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (model_kind, model, meta)."""
    _, meta, arrays = read_container(path, expect_kind="checkpoint")
    kind = meta["model"]
    if kind == "capsnet":
        cfg = meta["config"]
        model = CapsNetModel(
            EncoderConfig(**cfg["encoder"]),
            DecoderConfig(**cfg["decoder"]),
            LossParams(**cfg["loss_params"]),
            _tensor_params(arrays),
            seed=meta["seed"],
        )
    elif kind == "dnn":
        model = DnnModel(config=DnnConfig(**meta["config"]), params=_tensor_params(arrays))
    elif kind == "autoencoder":
        model = AutoencoderModel(
            config=AutoencoderConfig(**meta["config"]),
            params=_tensor_params(arrays),
            threshold=meta["threshold"],
        )
    elif kind == "iforest":
        model = _forest_from_arrays(
            IsolationForestConfig(**meta["config"]), meta["psi"], meta["max_depth"], arrays
        )
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    return kind, model, meta


def _forest_arrays(forest: IsolationForest) -> dict[str, np.ndarray]:
    """Flatten all trees into parallel node arrays plus offsets and roots."""
    fields = ("feature", "threshold", "left", "right", "size")
    arrays = {
        name: np.concatenate([getattr(t, name) for t in forest.trees])
        for name in fields
    }
    arrays["offsets"] = np.cumsum(
        [0] + [len(t.feature) for t in forest.trees]
    ).astype(np.int64)
    arrays["roots"] = np.array([t.root for t in forest.trees], dtype=np.int64)
    return arrays


def _forest_from_arrays(
    config: IsolationForestConfig, psi: int, max_depth: int,
    arrays: dict[str, np.ndarray],
) -> IsolationForest:
    forest = IsolationForest(config=config, psi=psi, max_depth=max_depth)
    offsets = arrays["offsets"]
    for t in range(len(offsets) - 1):
        lo, hi = int(offsets[t]), int(offsets[t + 1])
        forest.trees.append(
            IsolationTree(
                feature=arrays["feature"][lo:hi],
                threshold=arrays["threshold"][lo:hi],
                left=arrays["left"][lo:hi],
                right=arrays["right"][lo:hi],
                size=arrays["size"][lo:hi],
                root=int(arrays["roots"][t]),
            )
        )
    return forest
