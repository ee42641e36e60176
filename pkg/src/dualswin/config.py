"""Hyperparameter definitions, file parsing, validation, and serialization.

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments.
Lists may be written as ``[2, 2, 2]`` or ``(0.9, 0.999)``. Unset keys fall
back to the defaults below. ``dump_config`` emits the same format, so
serialize(load(path)) round-trips to an identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

FUSION_MODES = ("concatenate", "additive")
AUGMENT_OPS = ("hflip", "intensity_jitter")


class ConfigError(ValueError):
    """Configuration file could not be parsed."""


class ValidationError(ValueError):
    """A configuration invariant does not hold."""


@dataclass(frozen=True)
class ModelConfig:
    img_size: int = 224
    patch_size: int = 4
    in_channels: int = 1
    embed_dim: int = 96
    encoder_depths: tuple[int, ...] = (2, 2, 2)
    bottleneck_depth: int = 2
    decoder_depths: tuple[int, ...] = (2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    drop_rate: float = 0.0
    skip_connection_count: int = 6
    skip_fusion_mode: str = "concatenate"
    dual_decoder: bool = True
    dec2_encoder_skip: bool = True
    relative_position_bias: bool = True

    @property
    def num_stages(self) -> int:
        return len(self.encoder_depths)

    @property
    def max_skips(self) -> int:
        return 2 * self.num_stages

    def validate(self) -> None:
        if self.img_size < 1 or self.patch_size < 1:
            raise ValidationError("img_size and patch_size must be positive")
        if self.img_size % self.patch_size:
            raise ValidationError(
                f"img_size {self.img_size} not divisible by patch_size {self.patch_size}"
            )
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        n = self.num_stages
        if n < 1:
            raise ValidationError("encoder_depths must name at least one stage")
        if len(self.decoder_depths) != n:
            raise ValidationError(
                f"decoder_depths has {len(self.decoder_depths)} entries, expected {n}"
            )
        if len(self.num_heads) != n + 1:
            raise ValidationError(
                f"num_heads has {len(self.num_heads)} entries, expected {n + 1} (stages + bottleneck)"
            )
        for name, depths in (("encoder_depths", self.encoder_depths),
                             ("decoder_depths", self.decoder_depths),
                             ("bottleneck_depth", (self.bottleneck_depth,))):
            for d in depths:
                if d < 2 or d % 2:
                    raise ValidationError(
                        f"{name} entries must be positive even block counts (W-MSA/SW-MSA pairs), got {d}"
                    )
        for h in self.num_heads:
            if h < 1 or self.embed_dim % h:
                raise ValidationError(
                    f"embed_dim {self.embed_dim} not divisible by head count {h}"
                )
        if not 0 <= self.skip_connection_count <= self.max_skips:
            raise ValidationError(
                f"skip_connection_count {self.skip_connection_count} outside [0, {self.max_skips}]"
            )
        if self.skip_fusion_mode not in FUSION_MODES:
            raise ValidationError(f"skip_fusion_mode must be one of {FUSION_MODES}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValidationError("drop_rate must be in [0, 1)")
        if self.mlp_ratio <= 0:
            raise ValidationError("mlp_ratio must be positive")
        stage_table(self)  # window divisibility at every stage


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 300
    warmup_epochs: int = 20
    base_lr: float = 3e-4
    decay_epochs: int = 30
    decay_rate: float = 0.1
    weight_decay: float = 0.05
    clip_grad: float = 5.0
    betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 0.5
    beta: float = 0.5
    label_smoothing: float = 0.0
    seed: int = 0
    threshold: float = 0.5

    def validate(self) -> None:
        for name in ("alpha", "beta", "threshold", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError(
                f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}"
            )
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValidationError(f"decay_rate must be in (0, 1], got {self.decay_rate}")
        if self.decay_epochs < 1:
            raise ValidationError("decay_epochs must be positive")
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if self.clip_grad <= 0:
            raise ValidationError("clip_grad must be positive")
        if not (0.0 <= self.betas[0] < 1.0 and 0.0 <= self.betas[1] < 1.0):
            raise ValidationError("betas must each be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")


@dataclass(frozen=True)
class DataConfig:
    dataset_root: str = ""
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    synthetic: bool = False
    synthetic_count: int = 200
    augmentation: tuple[str, ...] = ()

    def validate(self) -> None:
        if len(self.split_fractions) != 3:
            raise ValidationError("split_fractions must be a (train, val, test) triple")
        if any(f < 0 for f in self.split_fractions):
            raise ValidationError("split_fractions must be nonnegative")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValidationError(
                f"split_fractions must sum to 1.0, got {sum(self.split_fractions)!r}"
            )
        if self.synthetic_count < 1:
            raise ValidationError("synthetic_count must be positive")
        for op in self.augmentation:
            if op not in AUGMENT_OPS:
                raise ValidationError(f"unknown augmentation op {op!r}; allowed: {AUGMENT_OPS}")


@dataclass(frozen=True)
class StageShape:
    name: str
    height: int
    width: int
    channels: int


def stage_table(cfg: ModelConfig) -> list[StageShape]:
    """Resolution/channel table for every encoder stage, the bottleneck, the
    mirrored decoder stages, and the per-decoder output maps. Raises if any
    stage breaks window tiling."""
    grid = cfg.img_size // cfg.patch_size
    table = []
    h = grid
    c = cfg.embed_dim
    for s in range(cfg.num_stages):
        _check_stage(f"encoder stage {s}", h, cfg.window_size)
        table.append(StageShape(f"encoder_stage{s}", h, h, c))
        if h % 2:
            raise ValidationError(f"encoder stage {s} resolution {h} is odd; cannot merge 2x2")
        h //= 2
        c *= 2
    _check_stage("bottleneck", h, cfg.window_size)
    table.append(StageShape("bottleneck", h, h, c))
    for s in range(cfg.num_stages - 1, -1, -1):
        h *= 2
        c //= 2
        _check_stage(f"decoder stage {s}", h, cfg.window_size)
        table.append(StageShape(f"decoder_stage{s}", h, h, c))
    table.append(StageShape("output_thyroid", cfg.img_size, cfg.img_size, 1))
    if cfg.dual_decoder:
        table.append(StageShape("output_ptmc", cfg.img_size, cfg.img_size, 1))
    return table


def _check_stage(name: str, res: int, window: int) -> None:
    if res < 1:
        raise ValidationError(f"{name}: resolution collapsed to {res}")
    if res % window:
        raise ValidationError(f"{name}: resolution {res} not divisible by window_size {window}")


def validate_shapes(cfg: ModelConfig) -> list[StageShape]:
    return stage_table(cfg)


# -- file format ----------------------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_DATA_KEYS = {f.name for f in fields(DataConfig)}


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def _parse_value(text: str):
    t = text.strip()
    if t.startswith(("[", "(")) and t.endswith(("]", ")")):
        inner = t[1:-1].strip()
        if not inner:
            return ()
        return tuple(_parse_scalar(p) for p in inner.split(","))
    return _parse_scalar(t)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a raw dict; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def _coerce_field(name: str, value, proto):
    """Coerce a parsed value to the dataclass field's type, or raise ConfigError."""
    cur = getattr(proto, name)
    try:
        if isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            return value
        if isinstance(cur, int):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(cur, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError("expected a number")
            return float(value)
        if isinstance(cur, tuple):
            if name == "augmentation":
                if isinstance(value, str):
                    items = () if value.lower() in ("none", "") else tuple(
                        p.strip() for p in value.split(",")
                    )
                else:
                    items = tuple(value) if isinstance(value, tuple) else (value,)
                return tuple(str(x) for x in items if str(x).lower() != "none")
            if not isinstance(value, tuple):
                value = (value,)
            if all(isinstance(x, int) for x in cur) and cur:
                return tuple(int(x) for x in value)
            return tuple(float(x) for x in value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"key {name!r}: {e} (got {value!r})") from None


def configs_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    model_kw, train_kw, data_kw = {}, {}, {}
    mproto, tproto, dproto = ModelConfig(), TrainConfig(), DataConfig()
    for key, value in raw.items():
        if key in _MODEL_KEYS:
            model_kw[key] = _coerce_field(key, value, mproto)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _coerce_field(key, value, tproto)
        elif key in _DATA_KEYS:
            data_kw[key] = _coerce_field(key, value, dproto)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    mcfg = replace(mproto, **model_kw)
    tcfg = replace(tproto, **train_kw)
    dcfg = replace(dproto, **data_kw)
    mcfg.validate()
    tcfg.validate()
    dcfg.validate()
    return mcfg, tcfg, dcfg


def load_config(path) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    """Read a config file; unset keys take defaults. Raises ConfigError on
    parse failures and ValidationError on invariant violations."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return configs_from_dict(parse_config_text(text))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(mcfg: ModelConfig, tcfg: TrainConfig, dcfg: DataConfig) -> str:
    """Emit the fully resolved configuration in the file format."""
    lines = []
    for title, cfg in (("model", mcfg), ("training", tcfg), ("data", dcfg)):
        lines.append(f"# {title}")
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if f.name == "augmentation":
                lines.append(f"{f.name} = {','.join(v) if v else 'none'}")
            else:
                lines.append(f"{f.name} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)
