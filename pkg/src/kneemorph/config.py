"""Plain ``key = value`` run configuration.

One pair per line, ``#`` starts a comment. Lists are comma separated,
booleans are ``true``/``false``, an empty value means "unset" for path
keys. Unknown keys are rejected so typos never pass silently.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .diffusion import DenoiserArch
from .morphing import CANONICAL_ETAS, RegNetArch
from .phantom import PhantomParams
from .supervision import SupervisorConfig
from .training import TrainConfig

CONFIG_NAME = "resolved_config.txt"


class ConfigError(ValueError):
    """Bad key, bad value, or inconsistent settings."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    out: str = "run"

    # phantom data
    n_pairs: int = 60
    size: int = 64
    gap0: float = 7.0
    gap1: float = 2.0
    osteophyte_max: float = 4.0
    noise_sigma: float = 0.02
    image_format: str = "png"
    manifest: str = ""
    truth_manifest: str = ""

    # supervisor pretraining
    sup_per_class: int = 150
    sup_kl2_range: tuple = (0.45, 0.55)
    sup_kl3_range: tuple = (0.70, 0.80)
    sup_epochs: int = 8
    sup_batch_size: int = 16
    sup_lr: float = 2e-3
    sup_val_fraction: float = 0.3
    sup_min_accuracy: float = 0.95
    supervisor: str = ""

    # training
    lambda_mph: float = 0.1
    lambda_sup: float = 0.01
    lr_denoiser: float = 2e-4
    lr_regnet: float = 1e-3
    steps: int = 300
    epochs: int = 0
    batch_size: int = 8
    t_max: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    flow_window: int = 5
    stop_sup_grad_at_noise: bool = False
    t_sampling: str = "per-step"
    checkpoint_every: int = 50
    denoiser_base: int = 32
    denoiser_mults: tuple = (1, 2, 2)
    denoiser_blocks: int = 2
    denoiser_attention: bool = True
    denoiser_dropout: float = 0.0
    regnet_base: int = 16
    regnet_levels: int = 3
    regnet_smooth_passes: int = 2
    model: str = ""
    resume: str = ""

    # synthesis / evaluation
    etas: tuple = CANONICAL_ETAS
    synth_mode: str = "paired"
    sources: str = ""
    max_i: float = 2.0

    # sweep
    sweep_lambda_mph: tuple = (0.0, 0.1, 1.0)
    sweep_lambda_sup: tuple = (0.0, 0.01, 1.0)
    sweep_steps: int = 40
    sweep_tail: int = 10

    # ------------------------------------------------------------ derived

    def out_dir(self) -> Path:
        return Path(self.out)

    def path(self, key: str, default_name: str) -> Path:
        """Explicit path from ``key`` if set, else ``default_name`` inside the output folder."""
        val = getattr(self, key)
        return Path(val) if val else self.out_dir() / default_name

    def phantom_params(self) -> PhantomParams:
        return PhantomParams(gap0=self.gap0, gap1=self.gap1, osteophyte_max=self.osteophyte_max,
                             size=(self.size, self.size), noise_sigma=self.noise_sigma)

    def supervisor_config(self) -> SupervisorConfig:
        return SupervisorConfig(epochs=self.sup_epochs, batch_size=self.sup_batch_size, lr=self.sup_lr,
                                val_fraction=self.sup_val_fraction, min_accuracy=self.sup_min_accuracy,
                                seed=self.seed)

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(
            lambda_mph=self.lambda_mph, lambda_sup=self.lambda_sup, lr_denoiser=self.lr_denoiser,
            lr_regnet=self.lr_regnet, steps=self.steps, epochs=self.epochs or None, batch_size=self.batch_size,
            t_max=self.t_max, beta_start=self.beta_start, beta_end=self.beta_end, seed=self.seed,
            flow_window=self.flow_window, stop_sup_grad_at_noise=self.stop_sup_grad_at_noise,
            t_sampling=self.t_sampling, checkpoint_every=self.checkpoint_every,
            denoiser=DenoiserArch(base=self.denoiser_base, mults=tuple(int(m) for m in self.denoiser_mults),
                                  blocks=self.denoiser_blocks, attention=self.denoiser_attention,
                                  dropout=self.denoiser_dropout),
            regnet=RegNetArch(base=self.regnet_base, levels=self.regnet_levels,
                              smooth_passes=self.regnet_smooth_passes),
        )
        return replace(cfg, **overrides)

    def validate(self) -> None:
        try:
            self.phantom_params().validate()
        except ValueError as exc:
            raise ConfigError(_name_key(str(exc))) from None
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")
        if self.image_format not in ("png", "pgm"):
            raise ConfigError(f"image_format must be png or pgm, got {self.image_format!r}")
        if self.synth_mode not in ("paired", "source-only"):
            raise ConfigError(f"synth_mode must be paired or source-only, got {self.synth_mode!r}")
        for key in ("sup_kl2_range", "sup_kl3_range"):
            rng = getattr(self, key)
            if len(rng) != 2 or not 0.0 <= rng[0] <= rng[1] <= 1.0:
                raise ConfigError(f"{key} must be 'lo, hi' within [0, 1]")
        if not self.etas or any(not 0.0 <= e <= 1.0 for e in self.etas):
            raise ConfigError("etas must be a non-empty list within [0, 1]")
        if not self.sweep_lambda_mph or not self.sweep_lambda_sup:
            raise ConfigError("sweep grids must not be empty")
        if self.sweep_steps < 1 or self.sweep_tail < 1:
            raise ConfigError("sweep_steps and sweep_tail must be >= 1")
        if self.max_i <= 0:
            raise ConfigError("max_i must be positive")
        try:
            self.train_config().validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.size % 2 ** max(self.regnet_levels, len(self.denoiser_mults) - 1):
            raise ConfigError(f"size {self.size} is not divisible by the network downsampling factor")


_PHANTOM_KEYS = ("gap1", "gap0", "osteophyte_max", "noise_sigma", "size")


def _name_key(msg: str) -> str:
    # phantom validation messages mention the offending field first
    for key in _PHANTOM_KEYS:
        if key in msg:
            return f"{key}: {msg}"
    return msg


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, known[key])
    return replace(base, **values)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, tuple):
            text = ", ".join(repr(v) for v in val)
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_NAME
    path.write_text(format_config(cfg))
    return path
