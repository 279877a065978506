#  Versioned checkpoint container. The layout is documented in
#  CHECKPOINT_FORMAT.md; bump FORMAT_VERSION on any incompatible change.

import logging
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from cryptogram.backbone import ModelConfig
from cryptogram.heads import DEFAULT_SINKHORN_ITERS, DEFAULT_TAU, CipherSolver, HeadType


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
# row index = ciphertext letter, column index = plaintext letter
MATRIX_ORIENTATION = "row=ciphertext,col=plaintext"
_CHECKPOINT_NAME = re.compile(r"^step_(\d+)\.pt$")


@dataclass
class Checkpoint:
    model: CipherSolver
    step: int = 0
    optimizer_state: Optional[Dict] = None
    train_config: Optional[Dict] = None
    rng_state: Optional[torch.Tensor] = None
    metadata: Dict = field(default_factory=dict)


def checkpoint_name(step: int) -> str:
    return f"step_{step:07d}.pt"


def save_checkpoint(path, model: CipherSolver, step=0, optimizer=None, train_config=None):
    head = model.head_type.name
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.as_dict(),
        "head": head,
        "tau": model.head.tau if model.is_bijective else DEFAULT_TAU,
        "sinkhorn_iters": model.head.sinkhorn_iters if model.is_bijective else DEFAULT_SINKHORN_ITERS,
        "matrix_orientation": MATRIX_ORIENTATION,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_config": train_config,
        "rng_state": torch.get_rng_state(),
        "step": int(step),
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # write then rename, so a crash never leaves a truncated checkpoint
    tmp_path = path + ".tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"saved checkpoint {path} (step {step}, {head} head)")
    return path


def load_checkpoint(path, map_location="cpu") -> Checkpoint:
    if not os.path.isfile(path):
        raise ValueError(f"checkpoint: {path} does not exist")
    payload = torch.load(path, map_location=map_location, weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint: {path} has format_version {version}, expected {FORMAT_VERSION}"
        )
    config = ModelConfig.from_dict(payload["model_config"])
    model = CipherSolver(
        config,
        HeadType[payload["head"]],
        tau=payload["tau"],
        sinkhorn_iters=payload["sinkhorn_iters"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    metadata = {
        key: payload[key]
        for key in ("format_version", "head", "matrix_orientation", "tau", "sinkhorn_iters")
    }
    logger.debug(f"loaded checkpoint {path} at step {payload['step']}")
    return Checkpoint(
        model=model,
        step=int(payload["step"]),
        optimizer_state=payload.get("optimizer"),
        train_config=payload.get("train_config"),
        rng_state=payload.get("rng_state"),
        metadata=metadata,
    )


def list_checkpoints(directory) -> List[str]:
    if not os.path.isdir(directory):
        return []
    names = sorted(name for name in os.listdir(directory) if _CHECKPOINT_NAME.match(name))
    return [os.path.join(directory, name) for name in names]


def latest_checkpoint(directory) -> Optional[str]:
    paths = list_checkpoints(directory)
    return paths[-1] if paths else None
