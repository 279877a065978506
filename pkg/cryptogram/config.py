#  Run configuration: a single JSON file with "model", "train" and "data"
#  sections, command-line overrides on top, and the manifest written into
#  every run directory.

import datetime
import json
import logging
import os
import platform
import subprocess
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import psutil
import torch

from cryptogram.backbone import MODEL_PRESETS, ModelConfig
from cryptogram.errors import ConfigError
from cryptogram.trainer import TrainConfig


logger = logging.getLogger(__name__)

SECTIONS = ("model", "train", "data")
SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "data", "config_schema.json")
RUN_LAYOUT = {
    "manifest": "manifest.json",
    "metrics": "metrics.csv",
    "checkpoints": "checkpoints",
    "analysis": "analysis",
}


@dataclass
class DataConfig:
    corpus_dir: str = "corpus"
    train_file: str = "train.jsonl"
    test_file: str = "test.jsonl"

    @property
    def train_path(self) -> str:
        return os.path.join(self.corpus_dir, self.train_file)

    @property
    def test_path(self) -> str:
        return os.path.join(self.corpus_dir, self.test_file)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def as_dict(self) -> Dict:
        train = self.train.as_dict()
        model = train.pop("model")
        return {"model": model, "train": train, "data": asdict(self.data)}


def _set_dotted(raw: Dict, dotted_key: str, value):
    section, _, key = dotted_key.partition(".")
    if not key:
        raise ConfigError([f"{dotted_key}: override keys look like section.field"])
    raw.setdefault(section, {})[key] = value


def _known(cls) -> set:
    return {f.name for f in fields(cls)}


def build_run_config(raw: Dict, source=None) -> RunConfig:
    problems: List[str] = []
    for section in sorted(set(raw) - set(SECTIONS)):
        problems.append(f"{section}: unknown section")

    model_raw = dict(raw.get("model") or {})
    size_tag = model_raw.get("size_tag")
    if size_tag is not None and size_tag != "custom" and size_tag not in MODEL_PRESETS:
        problems.append(f"model.size_tag: unknown preset {size_tag!r}, expected one of {list(MODEL_PRESETS)}")
    for key in sorted(set(model_raw) - _known(ModelConfig)):
        problems.append(f"model.{key}: unknown field")
        model_raw.pop(key)
    # a preset supplies the ladder dimensions, explicit fields override them
    model = ModelConfig.preset(size_tag) if size_tag in MODEL_PRESETS else ModelConfig()
    for key, value in model_raw.items():
        setattr(model, key, value)
    dims = (model.d_model, model.n_layers, model.n_heads, model.ffn_dim)
    if MODEL_PRESETS.get(model.size_tag) != dims:
        model.size_tag = "custom"

    train_raw = dict(raw.get("train") or {})
    train_raw.pop("model", None)
    for key in sorted(set(train_raw) - _known(TrainConfig)):
        problems.append(f"train.{key}: unknown field")
        train_raw.pop(key)
    train = TrainConfig(model=model, **train_raw)

    data_raw = dict(raw.get("data") or {})
    for key in sorted(set(data_raw) - _known(DataConfig)):
        problems.append(f"data.{key}: unknown field")
        data_raw.pop(key)
    data = DataConfig(**data_raw)

    try:
        problems.extend(train.perform_checks())
    except TypeError as e:
        problems.append(f"type error while checking values: {e}")
    if problems:
        raise ConfigError(problems, source)
    return RunConfig(train, data)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Reads the JSON file at `path` (or starts from defaults) and applies
    `overrides`, a mapping of "section.field" to value. Overrides win over
    the file. Every problem found is reported in one ConfigError.
    """
    raw: Dict = {}
    if path is not None:
        try:
            with open(path) as fp:
                raw = json.load(fp)
        except OSError as e:
            raise ConfigError([f"cannot read config file: {e}"], path) from e
        except json.JSONDecodeError as e:
            raise ConfigError([f"not valid JSON: {e}"], path) from e
        if not isinstance(raw, dict):
            raise ConfigError(["top level must be a JSON object"], path)
    for dotted_key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, dotted_key, value)
    return build_run_config(raw, path)


def git_revision(cwd=None) -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=cwd,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            check=True,
            text=True,
        )
        return out.stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def hardware_string(device="cpu") -> str:
    memory_gb = psutil.virtual_memory().total / 2**30
    cpu = platform.processor() or platform.machine()
    parts = [
        f"{cpu} ({psutil.cpu_count(logical=False)} cores, {psutil.cpu_count()} threads)",
        f"{memory_gb:.1f} GiB RAM",
        f"torch {torch.__version__}",
    ]
    if torch.device(device).type == "cuda" and torch.cuda.is_available():
        parts.append(torch.cuda.get_device_name(torch.device(device)))
    return ", ".join(parts)


@dataclass
class RunManifest:
    config: Dict
    git_revision: str
    seeds: Dict[str, int]
    hardware: str
    layout: Dict[str, str]
    command: Optional[str] = None
    created: str = ""

    @staticmethod
    def create(run_config: RunConfig, command=None) -> "RunManifest":
        train = run_config.train
        return RunManifest(
            config=run_config.as_dict(),
            git_revision=git_revision(),
            seeds={"train": train.seed},
            hardware=hardware_string(train.device),
            layout=dict(RUN_LAYOUT),
            command=command,
            created=datetime.datetime.now().isoformat(timespec="seconds"),
        )

    def write(self, out_dir) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, RUN_LAYOUT["manifest"])
        with open(path, "w") as fp:
            json.dump(asdict(self), fp, indent=2)
        logger.info(f"wrote run manifest {path}")
        return path

    @staticmethod
    def read(path) -> "RunManifest":
        with open(path) as fp:
            return RunManifest(**json.load(fp))

    def run_config(self) -> RunConfig:
        return build_run_config(self.config)
