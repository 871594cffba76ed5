from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

VARIANTS = ("segnet", "unet", "convlstm")
PRESETS = ("full", "desk")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "convlstm"
    input_resolution: int = 192
    sequence_length: int = 40
    encoder_channels: tuple[int, int, int] = (32, 48, 64)
    dropout_p: float = 0.1
    scale_preset: str = "full"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    forget_bias: float = 1.0
    # initial logit of the output head; a negative value starts near the sparse knot prior
    head_bias: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        if self.scale_preset not in PRESETS:
            raise ValueError(f"unknown scale preset {self.scale_preset!r}; expected one of {PRESETS}")
        if len(self.encoder_channels) != 3:
            raise ValueError(f"encoder_channels needs exactly 3 entries, got {self.encoder_channels}")
        if self.input_resolution <= 0 or self.input_resolution % 8:
            raise ValueError(f"input_resolution must be a positive multiple of 8, got {self.input_resolution}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @classmethod
    def preset(cls, name: str, variant: str = "convlstm", **overrides) -> "ModelConfig":
        if name == "full":
            base = dict(input_resolution=192, sequence_length=40, encoder_channels=(32, 48, 64))
        elif name == "desk":
            base = dict(input_resolution=48, sequence_length=12, encoder_channels=(8, 12, 16))
        else:
            raise ValueError(f"unknown scale preset {name!r}; expected one of {PRESETS}")
        base.update(variant=variant, scale_preset=name)
        base.update(overrides)
        return cls(**base)

    @property
    def decoder_channels(self) -> tuple[int, int, int]:
        c1, c2, _ = self.encoder_channels
        return (c2, c1, c1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)
