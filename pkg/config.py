import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

from core.attacks import AttackConfig
from core.datagen import DatasetSpec
from core.evalreport import EvalConfig
from core.exceptions import ConfigurationError
from core.losses import LossConfig
from core.models import ModelConfig
from core.schema import from_dict, set_path, to_dict
from core.trainer import SweepConfig, TrainConfig

PRESET_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs')


def _int_env(name: str, default: Optional[int]) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be an integer, got {raw!r}")


class Config:
    """Process configuration from the environment"""

    # Overrides every seed in the run config when set
    SEED = os.getenv('PARTROBUST_SEED')

    LOG_LEVEL = os.getenv('PARTROBUST_LOG_LEVEL', 'INFO')

    # Worker threads for sweep cells and evaluation chunks; unset keeps the config's value
    WORKERS = os.getenv('PARTROBUST_WORKERS')

    # tqdm progress bars
    PROGRESS = os.getenv('PARTROBUST_PROGRESS', 'true').lower() == 'true'

    OUTPUT_DIR = os.getenv('PARTROBUST_OUTPUT_DIR', 'runs')

    @classmethod
    def reload(cls):
        """Re-read the environment"""
        cls.SEED = os.getenv('PARTROBUST_SEED')
        cls.LOG_LEVEL = os.getenv('PARTROBUST_LOG_LEVEL', 'INFO')
        cls.WORKERS = os.getenv('PARTROBUST_WORKERS')
        cls.PROGRESS = os.getenv('PARTROBUST_PROGRESS', 'true').lower() == 'true'
        cls.OUTPUT_DIR = os.getenv('PARTROBUST_OUTPUT_DIR', 'runs')

    @staticmethod
    def seed() -> Optional[int]:
        return _int_env('PARTROBUST_SEED', None) if Config.SEED is not None else None

    @staticmethod
    def workers(default: int) -> int:
        value = _int_env('PARTROBUST_WORKERS', default) if Config.WORKERS is not None else default
        if value < 1:
            raise ConfigurationError(f"PARTROBUST_WORKERS must be ≥ 1, got {value}")
        return value

    @staticmethod
    def validate():
        """Validate configuration"""
        warnings = []

        if Config.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            warnings.append(f"PARTROBUST_LOG_LEVEL={Config.LOG_LEVEL} not recognised - using INFO")

        if Config.SEED is not None:
            warnings.append(f"PARTROBUST_SEED={Config.SEED} overrides every configured seed")

        if Config.WORKERS is not None and Config.WORKERS not in ('', '1'):
            warnings.append("Parallel workers enabled - results match single-threaded runs only up to chunk order")

        return warnings


@dataclass(frozen=True)
class TrainSection:
    """Optimiser and schedule; the model, loss and attack come from their own sections"""

    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    pretrain_epochs: int = 15
    train_epochs: int = 40
    select_on: str = 'adv'
    # Validation attack for early stopping; defaults to the training attack
    val_attack: Optional[AttackConfig] = None


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = 'runs'
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        run = from_dict(cls, data)
        run.train_config()
        return run

    def to_dict(self) -> Dict[str, Any]:
        return to_dict(self)

    def model_config(self) -> ModelConfig:
        """Model section with extents and part count taken from the dataset"""
        return replace(self.model, K=self.dataset.label_channels, C=self.dataset.C,
                       H=self.dataset.H, W=self.dataset.W)

    def train_config(self) -> TrainConfig:
        section = self.train
        return TrainConfig(
            model=self.model_config(),
            loss=self.loss,
            attack=self.attack,
            eval_attack=section.val_attack if section.val_attack is not None else self.attack,
            lr0=section.lr0,
            momentum=section.momentum,
            weight_decay=section.weight_decay,
            batch_size=section.batch_size,
            pretrain_epochs=section.pretrain_epochs,
            train_epochs=section.train_epochs,
            select_on=section.select_on,
            seed=self.seed,
        )

    def apply_overrides(self, overrides: Sequence[str]) -> 'RunConfig':
        """Apply "section.key=value" overrides; values parse as JSON, else as plain strings"""
        run = self
        for item in overrides:
            key, sep, raw = item.partition('=')
            if not sep or not key:
                raise ConfigurationError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            run = set_path(run, key.strip(), value)
        run.train_config()
        return run

    def with_seed(self, seed: int) -> 'RunConfig':
        """Replace the run seed and every section seed"""
        loss = self.loss if self.loss.attack is None else replace(self.loss, attack=replace(self.loss.attack, seed=seed))
        val_attack = self.train.val_attack
        return replace(
            self,
            seed=seed,
            dataset=replace(self.dataset, seed=seed),
            model=replace(self.model, seed=seed),
            loss=loss,
            attack=replace(self.attack, seed=seed),
            train=replace(self.train, val_attack=None if val_attack is None else replace(val_attack, seed=seed)),
            eval=replace(self.eval, seed=seed, attack=replace(self.eval.attack, seed=seed)),
        )


def preset_names() -> List[str]:
    if not os.path.isdir(PRESET_DIR):
        return []
    return sorted(name[:-5] for name in os.listdir(PRESET_DIR) if name.endswith('.json'))


def _resolve_path(path_or_name: str) -> str:
    if os.path.isfile(path_or_name):
        return path_or_name
    preset = os.path.join(PRESET_DIR, f"{path_or_name}.json")
    if os.path.isfile(preset):
        return preset
    raise ConfigurationError(f"config {path_or_name!r} is neither a file nor a preset ({', '.join(preset_names())})")


def load_run_config(path_or_name: Optional[str] = None, overrides: Sequence[str] = (),
                    env_seed: Optional[int] = None) -> RunConfig:
    """File or preset, then --set overrides, then the PARTROBUST_SEED override"""
    data: Dict[str, Any] = {}
    if path_or_name:
        path = _resolve_path(path_or_name)
        try:
            with open(path, encoding='utf-8') as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}")
    run = RunConfig.from_dict(data).apply_overrides(overrides)
    if env_seed is not None:
        run = run.with_seed(env_seed)
    return run
