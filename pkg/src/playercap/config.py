"""Hyperparameter configuration and named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


@dataclass
class HyperConfig:
    """Model geometry and run-control knobs.

    Defaults are desk scale (CPU, minutes). The named presets below carry
    the full-scale dimensions and per-variant learning rates.
    """

    d_time: int = 32          # width of the visual feature space
    d_down: int = 16          # interaction-module bottleneck width
    d_llm: int = 48           # decoder embedding width
    n_q: int = 8              # learnable context query count
    n_heads: int = 4
    k_players: int = 2        # top-k identified players kept for prompting
    n_frames_max: int = 12    # max video feature rows per clip
    seq_len_max: int = 6      # max frames per player sequence
    beam_size: int = 5
    dropout_rate: float = 0.1
    seed: int = 0
    # knobs the equations leave open
    bsim_mlp_ratio: int = 1
    vclm_mlp_ratio: int = 1
    vclm_ffn_ratio: int = 4
    decoder_blocks: int = 2
    decoder_ffn_ratio: int = 4
    max_caption_len: int = 24

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dropout_rate":
                if not 0.0 <= v < 1.0:
                    raise ConfigError(f"dropout_rate {v} outside [0, 1)")
            elif f.name == "seed":
                if v < 0:
                    raise ConfigError("seed must be nonnegative")
            elif v < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {v}")
        if self.d_time % self.n_heads or self.d_llm % self.n_heads:
            raise ConfigError(
                f"d_time ({self.d_time}) and d_llm ({self.d_llm}) must be "
                f"divisible by n_heads ({self.n_heads})"
            )
        if self.d_down % self.n_heads:
            raise ConfigError(
                f"d_down ({self.d_down}) must be divisible by n_heads "
                f"({self.n_heads}) for the bottleneck cross attention"
            )
        if self.d_down > self.d_time:
            raise ConfigError(
                f"d_down ({self.d_down}) must not exceed d_time ({self.d_time})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown HyperConfig fields: {sorted(unknown)}")
        return cls(**d)


# Full-scale dimension shared by every preset.
_FULL_SCALE = dict(
    d_time=768, d_down=512, n_q=32, n_heads=8, k_players=2,
    n_frames_max=60, seq_len_max=20, beam_size=5,
)

# Named decoder variants: hidden size plus the published learning rate and
# batch size for that variant. Interface parity only; decoders are trained
# from scratch here.
PRESETS: dict[str, dict] = {
    "g":      {**_FULL_SCALE, "d_llm": 768,  "lr": 5e-5, "batch_size": 64},
    "q-0.5b": {**_FULL_SCALE, "d_llm": 896,  "lr": 7e-5, "batch_size": 32},
    "q-1.5b": {**_FULL_SCALE, "d_llm": 1536, "lr": 5e-5, "batch_size": 32},
    "q-3b":   {**_FULL_SCALE, "d_llm": 2048, "lr": 1e-5, "batch_size": 8},
    "l-1b":   {**_FULL_SCALE, "d_llm": 2048, "lr": 5e-5, "batch_size": 32},
    "l-3b":   {**_FULL_SCALE, "d_llm": 3072, "lr": 7e-6, "batch_size": 8},
}


def preset_overrides(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dict(PRESETS[name])


@dataclass
class RunConfig:
    """Fully-resolved configuration of one CLI command.

    Serialized verbatim into every artifact the command writes so results
    carry their provenance.
    """

    command: str
    hyper: HyperConfig
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "hyper": self.hyper.to_dict(),
            "paths": dict(self.paths),
            "options": dict(self.options),
        }
