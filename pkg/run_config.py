# run_config.py
"""
Flat key=value run configuration.

Defaults come from config_template.py (UPPER_CASE names, lowercased here), then a
key=value file, then command-line overrides. Unknown keys are rejected.
"""
import logging
import os
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, TypeVar

from dotenv import dotenv_values

import config_template
from agcp_refine import AgcpConfig
from discriminator import DiscriminatorConfig, Fusion
from generator import GeneratorConfig
from metrics import EvalConfig
from stereo_data import CostConfig, SynthConfig
from training import TrainConfig

logger = logging.getLogger('RunConfig')

EFFECTIVE_CONFIG_NAME = "effective_config.txt"
_TRUE_WORDS = ("true", "1", "yes")
_FALSE_WORDS = ("false", "0", "no")

T = TypeVar("T")


class ConfigError(ValueError):
    """Unknown key or a value that does not fit the key's type."""


def default_values() -> Dict[str, Any]:
    return {
        name.lower(): value
        for name, value in vars(config_template).items()
        if name.isupper() and not name.startswith("_")
    }


def _convert(key: str, raw: Any, default: Any) -> Any:
    if raw is None:
        raise ConfigError(f"Config key '{key}' has no value")
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in _TRUE_WORDS:
                return True
            if lowered in _FALSE_WORDS:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"Config key '{key}' expects {type(default).__name__}, got '{raw}'") from None
    return raw


def _build(factory: Callable[..., T], **kwargs) -> T:
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_override(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not KEY=VALUE")
    key, value = text.split("=", 1)
    return key.strip().lower(), value


class RunConfig:
    """Validated flat mapping of every run setting."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._values = default_values()
        if values:
            self.update(values)

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None, overrides: Iterable[str] = (),
                     seed: Optional[int] = None, out_dir: Optional[str] = None) -> "RunConfig":
        cfg = cls()
        if config_path:
            if not os.path.isfile(config_path):
                raise ConfigError(f"Config file not found: {config_path}")
            file_values = dotenv_values(config_path, interpolate=False)
            cfg.update({k.lower(): v for k, v in file_values.items()})
            logger.info(f"Loaded {len(file_values)} keys from {config_path}")
        cfg.update(dict(parse_override(o) for o in overrides))
        if seed is not None:
            cfg.update({"seed": seed})
        if out_dir is not None:
            cfg.update({"out_dir": out_dir})
        return cfg

    def update(self, values: Dict[str, Any]) -> None:
        for key, raw in values.items():
            key = key.lower()
            if key not in self._values:
                raise ConfigError(f"Unknown config key '{key}'")
            default = default_values()[key]
            self._values[key] = _convert(key, raw, default)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def write(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, EFFECTIVE_CONFIG_NAME)
        with open(path, "w", encoding="utf-8") as f:
            for key in sorted(self._values):
                f.write(f"{key}={self._values[key]}\n")
        return path

    # --- Derived paths -----------------------------------------------------

    @property
    def out_dir(self) -> str:
        return self["out_dir"]

    @property
    def checkpoint_dir(self) -> str:
        return self["checkpoint_dir"] or os.path.join(self.out_dir, "checkpoints")

    @property
    def prediction_dir(self) -> str:
        return self["prediction_dir"] or self.out_dir

    # --- Typed sub-configs -------------------------------------------------

    def cost_config(self) -> CostConfig:
        return _build(CostConfig, window=self["census_window"], p1=self["sgm_p1"],
                      p2=self["sgm_p2"], paths=self["sgm_paths"])

    def synth_config(self) -> SynthConfig:
        return _build(SynthConfig, count=self["synth_count"], height=self["synth_height"],
                      width=self["synth_width"], d_max=self["synth_d_max"],
                      n_layers=self["synth_layers"], workers=self["synth_workers"])

    def generator_config(self, d_max: int) -> GeneratorConfig:
        return _build(GeneratorConfig, base_channels=self["gen_base_channels"], sigma=self["gen_sigma"],
                      k=self["gen_top_k"], d_max=d_max)

    def discriminator_config(self) -> DiscriminatorConfig:
        try:
            fusion = Fusion(self["disc_fusion"])
        except ValueError:
            raise ConfigError(f"disc_fusion must be 'dynamic' or 'concat', got '{self['disc_fusion']}'") from None
        return _build(DiscriminatorConfig, feat_channels=self["disc_feat_channels"], fusion=fusion,
                      head_depth=self["disc_head_depth"], use_color=self["disc_use_color"])

    def train_config(self) -> TrainConfig:
        return _build(
            TrainConfig,
            lr=self["train_lr"], batch=self["train_batch"], momentum=self["train_momentum"],
            lam=self["train_lambda"], rho=self["train_rho"], recon_weight=self["train_recon_weight"],
            gate_recon=self["train_gate_recon"], warmup_epochs=self["train_warmup_epochs"],
            epochs=self["train_epochs"], crop=self["train_crop"], seed=self["seed"],
            resume=self["train_resume"], validation_count=self["train_validation_count"],
            cost_workers=self["train_cost_workers"], cost=self.cost_config(),
        )

    def agcp_config(self) -> AgcpConfig:
        return _build(AgcpConfig, tau=self["agcp_tau"], gamma=self["agcp_gamma"], radius_m=self["agcp_radius_m"],
                      sigma_color=self["agcp_sigma_color"], sigma_space=self["agcp_sigma_space"],
                      cg_tol=self["agcp_cg_tol"], cg_max_iter=self["agcp_cg_max_iter"])

    def eval_config(self) -> EvalConfig:
        if self["eval_confidence"] not in ("learned", "ground_truth"):
            raise ConfigError("eval_confidence must be 'learned' or 'ground_truth'")
        return _build(EvalConfig, threshold_px=self["eval_threshold_px"], n_points=self["eval_n_points"],
                      confidence=self["eval_confidence"], rho=self["train_rho"])
