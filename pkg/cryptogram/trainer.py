#  Training loop: masked cross-entropy, AdamW with decoupled weight decay and a
#  constant learning rate, on-the-fly encryption, periodic validation on
#  unseen ciphers, metrics CSV and checkpoints. Every random choice is keyed
#  by the training step, so a resumed run continues the exact same stream.

import logging
import math
import os
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Set

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from cryptogram.backbone import ModelConfig
from cryptogram.checkpoint import checkpoint_name, latest_checkpoint, load_checkpoint, save_checkpoint
from cryptogram.cipher import CipherMapping, CipherStream, sample_cipher, symbol_error_rate
from cryptogram.corpus import BatchSampler, TextRecord, make_batch
from cryptogram.errors import ConfigError, TrainingDivergedError
from cryptogram.heads import DEFAULT_SINKHORN_ITERS, DEFAULT_TAU, CipherSolver, HeadType


logger = logging.getLogger(__name__)

GENERALIZATION_POOL_SIZES = (10, 100, 250, 500, 750, 1000, 1500, 2500, 5000, 10000)
METRICS_COLUMNS = ["step", "loss", "lr", "wall_ms", "val_acc"]
PRECISIONS = ("fp32", "bf16")
# mixed into seeds so validation ciphers never share a stream with training
_VALIDATION_SALT = 0x7A11D
_POOL_SALT = 0x9001


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 96
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-5
    weight_decay: float = 0.1
    seed: int = 0
    # None means a fresh cipher for every training sequence
    cipher_pool_size: Optional[int] = None
    head: str = "standard"
    model: ModelConfig = field(default_factory=ModelConfig)
    precision: str = "fp32"
    tau: float = DEFAULT_TAU
    sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS
    checkpoint_every: int = 1000
    flush_every: int = 50
    val_every: int = 500
    val_size: int = 512
    device: str = "cpu"

    def perform_checks(self) -> List[str]:
        problems = []
        for name in ("steps", "batch_size", "checkpoint_every", "flush_every", "val_every", "val_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                problems.append(f"train.{name}: must be a positive integer, got {value!r}")
        if not isinstance(self.lr, (int, float)) or self.lr < 0:
            problems.append(f"train.lr: must be non-negative, got {self.lr!r}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                problems.append(f"train.{name}: must lie in [0, 1), got {value!r}")
        if self.adam_eps <= 0:
            problems.append(f"train.adam_eps: must be positive, got {self.adam_eps!r}")
        if self.weight_decay < 0:
            problems.append(f"train.weight_decay: must be non-negative, got {self.weight_decay!r}")
        if self.cipher_pool_size is not None and (
            not isinstance(self.cipher_pool_size, int) or self.cipher_pool_size <= 0
        ):
            problems.append(
                f"train.cipher_pool_size: must be a positive integer or null, got {self.cipher_pool_size!r}"
            )
        if self.head not in HeadType.__members__:
            problems.append(
                f"train.head: must be one of {list(HeadType.__members__)}, got {self.head!r}"
            )
        if self.precision not in PRECISIONS:
            problems.append(f"train.precision: must be one of {list(PRECISIONS)}, got {self.precision!r}")
        if self.tau <= 0:
            problems.append(f"train.tau: must be positive, got {self.tau!r}")
        if not isinstance(self.sinkhorn_iters, int) or self.sinkhorn_iters < 1:
            problems.append(f"train.sinkhorn_iters: must be a positive integer, got {self.sinkhorn_iters!r}")
        problems.extend(self.model.perform_checks())
        return problems

    def validate(self):
        problems = self.perform_checks()
        if problems:
            raise ConfigError(problems)

    def as_dict(self) -> Dict:
        return asdict(self)

    @staticmethod
    def from_dict(values: Dict) -> "TrainConfig":
        values = dict(values)
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError([f"train.{name}: unknown field" for name in unknown])
        model = values.pop("model", None)
        if isinstance(model, dict):
            values["model"] = ModelConfig.from_dict(model)
        elif model is not None:
            values["model"] = model
        return TrainConfig(**values)


class CipherPool:
    """
    A fixed set of K distinct ciphers. Training sequences draw uniformly from
    the pool, keyed by (step, row) like CipherStream.
    """

    def __init__(self, size: int, seed=0):
        if size < 1:
            raise ValueError(f"CipherPool: size must be positive, got {size}")
        self.seed = int(seed)
        ciphers = []
        seen = set()
        index = 0
        while len(ciphers) < size:
            cipher = sample_cipher(np.random.SeedSequence([self.seed, _POOL_SALT, index]))
            index += 1
            if cipher.perm not in seen:
                seen.add(cipher.perm)
                ciphers.append(cipher)
        self.ciphers: List[CipherMapping] = ciphers

    def __len__(self):
        return len(self.ciphers)

    def __contains__(self, cipher: CipherMapping):
        return cipher in set(self.ciphers)

    def cipher_for(self, step: int, row: int) -> CipherMapping:
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([self.seed, _POOL_SALT, int(step), int(row)]))
        )
        return self.ciphers[int(rng.integers(0, len(self.ciphers)))]


class HeldOutCipherStream(CipherStream):
    # fresh ciphers that are guaranteed not to belong to `exclude`
    def __init__(self, seed: int, exclude: Optional[Set[CipherMapping]] = None):
        super().__init__(seed)
        self.exclude = set(exclude or ())

    def cipher_for(self, step: int, row: int) -> CipherMapping:
        attempt = 0
        while True:
            seed = np.random.SeedSequence([self.seed, _VALIDATION_SALT, int(step), int(row), attempt])
            cipher = sample_cipher(seed)
            if cipher not in self.exclude:
                return cipher
            attempt += 1


def loss(position_logits, targets, pad_mask) -> torch.Tensor:
    # mean cross-entropy over every non-pad position, passthrough symbols included
    keep = ~pad_mask
    return F.cross_entropy(position_logits[keep], targets[keep])


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    # decay matrices only; norm gains and biases are left alone
    decay, no_decay = [], []
    for _, param in model.named_parameters():
        if not param.requires_grad:
            continue
        (decay if param.dim() >= 2 else no_decay).append(param)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        groups,
        lr=config.lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )


def step_generator(seed: int, step: int, device="cpu") -> torch.Generator:
    # Gumbel noise for the bijective head, keyed by (seed, step)
    seed_seq = np.random.SeedSequence([int(seed), int(step), 0x6B])
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed_seq.generate_state(1, dtype=np.uint64)[0]) % 2**63)
    return generator


def sequence_sers(predictions: torch.Tensor, targets: torch.Tensor, pad_mask: torch.Tensor) -> List[float]:
    sers = []
    for pred, truth, pad in zip(predictions.tolist(), targets.tolist(), pad_mask.tolist()):
        length = pad.index(True) if True in pad else len(pad)
        sers.append(symbol_error_rate(pred[:length], truth[:length]))
    return sers


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        train_records: Sequence[TextRecord],
        val_records: Optional[Sequence[TextRecord]] = None,
        out_dir: Optional[str] = None,
        progress=False,
    ):
        config.validate()
        self.config = config
        self.device = torch.device(config.device)
        self.out_dir = out_dir
        self.progress = progress
        torch.manual_seed(config.seed)
        self.model = CipherSolver(
            config.model, config.head, config.tau, config.sinkhorn_iters
        ).to(self.device)
        self.optimizer = build_optimizer(self.model, config)
        self.sampler = BatchSampler(train_records, config.batch_size, config.seed)
        if config.cipher_pool_size is None:
            self.pool = None
            self.cipher_source = CipherStream(config.seed)
        else:
            self.pool = CipherPool(config.cipher_pool_size, config.seed)
            self.cipher_source = self.pool
        self.val_records = list(val_records or [])[: config.val_size]
        self.val_source = HeldOutCipherStream(
            config.seed, set(self.pool.ciphers) if self.pool is not None else None
        )
        self.step = 0
        self.history: List[Dict] = []
        self._pending: List[Dict] = []
        logger.info(
            f"model {config.model.size_tag} with {config.head} head: "
            f"{sum(p.numel() for p in self.model.parameters())} parameters"
        )

    @property
    def metrics_path(self) -> Optional[str]:
        return os.path.join(self.out_dir, "metrics.csv") if self.out_dir else None

    @property
    def checkpoint_dir(self) -> Optional[str]:
        return os.path.join(self.out_dir, "checkpoints") if self.out_dir else None

    def _autocast(self):
        if self.config.precision == "bf16":
            return torch.autocast(device_type=self.device.type, dtype=torch.bfloat16)
        return nullcontext()

    def train_step(self, step: int) -> float:
        batch = self.sampler.batch_for(step, self.cipher_source, self.config.model.context_len)
        batch = batch.to(self.device)
        generator = None
        if self.model.is_bijective:
            generator = step_generator(self.config.seed, step, self.device)
        self.model.train()
        with self._autocast():
            out = self.model(batch.tokens, batch.pad_mask, generator=generator)
        value = loss(out.logits.float(), batch.targets, batch.pad_mask)
        if not torch.isfinite(value):
            raise TrainingDivergedError(step, value.item())
        self.optimizer.zero_grad(set_to_none=True)
        value.backward()
        self.optimizer.step()
        return value.item()

    @torch.no_grad()
    def validate(self) -> Optional[float]:
        # 1 - mean SER over the held-out records under ciphers outside the pool
        if not self.val_records:
            return None
        self.model.eval()
        sers = []
        for chunk, start in enumerate(range(0, len(self.val_records), self.config.batch_size)):
            records = self.val_records[start : start + self.config.batch_size]
            batch = make_batch(records, self.val_source, chunk, self.config.model.context_len)
            batch = batch.to(self.device)
            with self._autocast():
                result = self.model.decode(batch.tokens, batch.pad_mask)
            sers.extend(sequence_sers(result.predictions, batch.targets, batch.pad_mask))
        self.model.train()
        return 1.0 - float(np.mean(sers))

    def flush_metrics(self):
        if not self._pending or self.metrics_path is None:
            self._pending = []
            return
        os.makedirs(self.out_dir, exist_ok=True)
        frame = pd.DataFrame(self._pending, columns=METRICS_COLUMNS)
        write_header = not os.path.exists(self.metrics_path)
        frame.to_csv(self.metrics_path, mode="a", header=write_header, index=False)
        self._pending = []

    def save(self) -> Optional[str]:
        if self.checkpoint_dir is None:
            return None
        path = os.path.join(self.checkpoint_dir, checkpoint_name(self.step))
        return save_checkpoint(path, self.model, self.step, self.optimizer, self.config.as_dict())

    def resume(self, path: Optional[str] = None):
        if path is None:
            if self.checkpoint_dir is None:
                raise ValueError("Trainer: no checkpoint path and no output directory")
            path = latest_checkpoint(self.checkpoint_dir)
            if path is None:
                raise ValueError(f"Trainer: no checkpoint found in {self.checkpoint_dir}")
        checkpoint = load_checkpoint(path, map_location=self.device)
        self.model.load_state_dict(checkpoint.model.state_dict())
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        self.step = checkpoint.step
        self._pending = []
        self.truncate_metrics(self.step)
        logger.info(f"resumed from {path} at step {self.step}")

    def truncate_metrics(self, step: int):
        # rows flushed after the checkpoint are replayed by the resumed run
        if self.metrics_path is None or not os.path.exists(self.metrics_path):
            return
        frame = pd.read_csv(self.metrics_path)
        kept = frame[frame["step"] <= step]
        if len(kept) < len(frame):
            logger.info(f"dropped {len(frame) - len(kept)} metrics rows after step {step}")
            kept.to_csv(self.metrics_path, index=False)

    def run(self, steps: Optional[int] = None) -> List[Dict]:
        last = self.config.steps if steps is None else min(self.config.steps, self.step + steps)
        lr = self.optimizer.param_groups[0]["lr"]
        rows = []
        with logging_redirect_tqdm():
            for step in tqdm(
                range(self.step, last),
                initial=self.step,
                total=self.config.steps,
                disable=not self.progress,
                desc="train",
            ):
                start = time.perf_counter()
                value = self.train_step(step)
                wall_ms = (time.perf_counter() - start) * 1000.0
                self.step = step + 1
                val_acc = math.nan
                if self.step % self.config.val_every == 0 or self.step == self.config.steps:
                    measured = self.validate()
                    if measured is not None:
                        val_acc = measured
                        logger.info(f"step {self.step}: loss {value:.4f}, val_acc {val_acc:.4f}")
                row = {"step": self.step, "loss": value, "lr": lr, "wall_ms": wall_ms, "val_acc": val_acc}
                rows.append(row)
                self._pending.append(row)
                if self.step % self.config.flush_every == 0:
                    self.flush_metrics()
                if self.step % self.config.checkpoint_every == 0:
                    self.save()
        self.flush_metrics()
        if self.step == self.config.steps and self.step % self.config.checkpoint_every != 0:
            self.save()
        self.history.extend(rows)
        return rows


def pool_label(pool_size: Optional[int]) -> str:
    return "unlimited" if pool_size is None else str(pool_size)


def run_generalization_suite(
    pool_sizes,
    config: TrainConfig,
    train_records: Sequence[TextRecord],
    val_records: Sequence[TextRecord],
    out_dir: Optional[str] = None,
    progress=False,
) -> pd.DataFrame:
    """
    Train one model per pool size with everything else fixed and collect the
    loss and validation accuracy curves. Returns (and writes, when out_dir is
    given) a long-format table: pool_size, step, metric, value.
    """
    frames = []
    for pool_size in pool_sizes:
        label = pool_label(pool_size)
        run_config = replace(config, cipher_pool_size=pool_size)
        run_dir = os.path.join(out_dir, f"pool_{label}") if out_dir else None
        logger.info(f"generalization run with pool size {label}")
        trainer = Trainer(run_config, train_records, val_records, run_dir, progress)
        history = pd.DataFrame(trainer.run(), columns=METRICS_COLUMNS)
        long = history.melt(id_vars=["step"], value_vars=["loss", "val_acc"], var_name="metric")
        long = long.dropna(subset=["value"])
        long.insert(0, "pool_size", label)
        frames.append(long)
    table = pd.concat(frames, ignore_index=True)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "generalization.csv")
        table.to_csv(path, index=False)
        logger.info(f"wrote {path}")
    return table
