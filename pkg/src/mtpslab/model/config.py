import json
from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError

VARIANTS = ("ntp", "group_linear", "group_trans", "mtp_parallel", "mtp_deepseek", "mtp_vocalnet")
GROUP_VARIANTS = ("group_linear", "group_trans")
MTP_VARIANTS = ("mtp_parallel", "mtp_deepseek", "mtp_vocalnet")


@dataclass
class ModelConfig:
    """Model hyperparameters.

    ``N`` is the number of tokens predicted per step for MTP variants and the
    group size for group variants; it must be 1 for ``ntp``.
    """

    V_speech: int = 99
    V_text: int = 18
    d_model: int = 128
    n_heads: int = 4
    n_backbone_layers: int = 4
    n_projector_layers: int = 2
    d_ff: int = 512
    variant: str = "ntp"
    N: int = 1
    lam: float = 0.5
    mask_mode_mix: float = 0.5
    C_s: int = 15
    C_t: int = 5
    dtype: str = "f32"
    pos_encoding: str = "rotary"
    group_trans_layers: int = 2
    head_init: str = "zero"
    init_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.variant == "ntp" and self.N != 1:
            raise ConfigError("the ntp variant predicts one token per step; N must be 1")
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2 and self.pos_encoding == "rotary":
            raise ConfigError("rotary encoding needs an even head dimension")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.pos_encoding not in ("rotary", "sinusoidal"):
            raise ConfigError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.head_init not in ("zero", "normal"):
            raise ConfigError(f"unknown head_init {self.head_init!r}")
        if not 0.0 <= self.mask_mode_mix <= 1.0:
            raise ConfigError(f"mask_mode_mix must lie in [0, 1], got {self.mask_mode_mix}")
        if self.C_s < 1 or self.C_t < 1:
            raise ConfigError("C_s and C_t must be >= 1")

    # special token ids sit at the end of each vocabulary
    @property
    def sos_id(self):
        return self.V_speech - 3

    @property
    def eos_id(self):
        return self.V_speech - 2

    @property
    def pad_id(self):
        return self.V_speech - 1

    @property
    def bos_id(self):
        return self.V_text - 2

    @property
    def text_pad_id(self):
        return self.V_text - 1

    @property
    def is_group(self):
        return self.variant in GROUP_VARIANTS

    @property
    def n_heads_out(self):
        """Number of per-offset output heads (0 for group variants)."""
        return 0 if self.is_group else self.N

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def for_grammar(cls, grammar, **kw):
        return cls(V_speech=grammar.V_speech, V_text=grammar.V_text, **kw)
