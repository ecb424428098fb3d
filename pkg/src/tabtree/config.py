"""Model presets and the resolved run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .sampler import GenerationConfig
from .transformer import TrainConfig

# hidden size, feed-forward width, attention heads, layers
ARCHITECTURES = {
    "TINY": (64, 256, 4, 2),
    "S": (256, 1024, 8, 6),
    "L": (768, 3072, 12, 6),
    "NM": (768, 3072, 12, 6),
}

TRAIN_OVERRIDES = {
    "NM": {"tree_mask": (0.0, 0.0), "value_mask": (0.0, 0.0), "patience": 100},
}

GENERATION_OVERRIDES = {
    "NM": {"temperature_categorical": 0.2, "temperature_numeric": 0.1, "tree_mask": (0.0, 0.0)},
}


@dataclass
class RunConfig:
    preset: str = "TINY"
    k: int = 10
    q: int = 1000
    tree_trials: int = 0
    seed: int = 0
    train: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.preset = self.preset.upper()
        if self.preset not in ARCHITECTURES:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(ARCHITECTURES)}")
        if self.k < 1 or self.q < 1:
            raise ValueError("K and Q must be positive")
        if self.tree_trials < 0:
            raise ValueError("tree_trials must be >= 0")
        _check_keys(self.train, TrainConfig, "train")
        _check_keys(self.generation, GenerationConfig, "generation")

    def architecture(self) -> dict:
        dim, ff, heads, layers = ARCHITECTURES[self.preset]
        return {"dim": dim, "ff_dim": ff, "n_heads": heads, "n_layers": layers, "preset": self.preset}

    def train_config(self) -> TrainConfig:
        kw = {"seed": self.seed, **TRAIN_OVERRIDES.get(self.preset, {}), **self.train}
        return TrainConfig(**_tuples(kw))

    def generation_config(self, seed: int | None = None) -> GenerationConfig:
        tc = self.train_config()
        kw = {"tree_mask": tc.tree_mask, **GENERATION_OVERRIDES.get(self.preset, {}), **self.generation}
        if seed is not None:
            kw["seed"] = seed
        return GenerationConfig(**_tuples(kw))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> dict:
        return {"run": self.to_dict(), "architecture": self.architecture(),
                "train": asdict(self.train_config()), "generation": asdict(self.generation_config())}

    def merged(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _tuples(kw: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}


def _check_keys(d: dict, cls, label: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {label} override(s): {sorted(unknown)}")
