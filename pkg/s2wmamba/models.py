"""
Pydantic models for configuration, reports and run manifests
"""

from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from . import config as settings
from .errors import UsageError


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


# ==================== Network Models ====================


ABLATION_NAMES = {
    "SpeO": "speo",
    "SpaO": "spao",
    "SeqB1": "seqb1",
    "SeqB2": "seqb2",
    "CRM": "crm",
    "HP": "hp",
    "AWS": "aws",
    "no_Gm": "no_gm",
    "no_Gc": "no_gc",
    "no_Ga": "no_ga",
}
STRUCTURAL_FLAGS = ("speo", "spao", "seqb1", "seqb2", "crm", "hp", "aws")
GATE_FLAGS = ("no_gm", "no_gc", "no_ga")
# variants that keep the dual gate in place
GATED_STRUCTURES = ("crm",)


class AblationConfig(BaseModel):
    """Ablation variant: at most one structural flag, gate toggles combine freely"""

    speo: bool = Field(default=False, description="Spectral branch only")
    spao: bool = Field(default=False, description="Spatial branch only")
    seqb1: bool = Field(default=False, description="Sequential spectral -> spatial")
    seqb2: bool = Field(default=False, description="Sequential spatial -> spectral")
    crm: bool = Field(default=False, description="Convolution blocks replace FMamba")
    hp: bool = Field(default=False, description="Hadamard product replaces the dual gate")
    aws: bool = Field(default=False, description="Attention weighted sum replaces the dual gate")
    no_gm: bool = Field(default=False, description="Multiplicative gate forced to zero")
    no_gc: bool = Field(default=False, description="Decorative gate forced to zero")
    no_ga: bool = Field(default=False, description="Additive gate forced to zero")

    @model_validator(mode="after")
    def check_exclusive(self):
        active = [flag for flag in STRUCTURAL_FLAGS if getattr(self, flag)]
        if len(active) > 1:
            raise ValueError(f"conflicting structural ablations: {active}")
        gates = [flag for flag in GATE_FLAGS if getattr(self, flag)]
        if gates and active and active[0] not in GATED_STRUCTURES:
            raise ValueError(f"gate toggles {gates} need the dual gate, removed by {active[0]}")
        return self

    @classmethod
    def from_names(cls, names: List[str]) -> "AblationConfig":
        """Build from table names like ["CRM"] or ["no_Gm", "no_Ga"]"""
        lookup = {key.lower(): value for key, value in ABLATION_NAMES.items()}
        flags = {}
        for name in names:
            if not name:
                continue
            key = lookup.get(name.strip().lower())
            if key is None:
                raise UsageError(f"Unknown ablation {name!r}, expected one of {list(ABLATION_NAMES)}")
            flags[key] = True
        try:
            return cls(**flags)
        except ValidationError as ex:
            raise UsageError(f"Invalid ablation {names}: {ex.errors()[0]['msg']}")

    @property
    def names(self) -> List[str]:
        return [name for name, flag in ABLATION_NAMES.items() if getattr(self, flag)]

    @property
    def structure(self) -> Optional[str]:
        for flag in STRUCTURAL_FLAGS:
            if getattr(self, flag):
                return flag
        return None

    @property
    def has_dual_gate(self) -> bool:
        return self.structure in (None, *GATED_STRUCTURES)

    @property
    def label(self) -> str:
        return "+".join(self.names) or "Orig"


class NetworkConfig(BaseModel):
    """Architecture hyperparameters of the pansharpening network"""

    ratio: int = Field(default=4, examples=[4], description="PAN/LRMS resolution ratio r")
    bands: int = Field(default=8, examples=[8, 4], description="LRMS band count c")
    width: int = Field(default=32, examples=[32], description="Feature width C")
    d_state: int = Field(default=16, examples=[16])
    expand: int = Field(default=2, examples=[2])
    conv_width: int = Field(default=4, examples=[4])
    depth: int = Field(default=1, examples=[1], description="FMamba blocks per subband per stage")
    skip_source: Literal["post", "raw"] = Field(default="post", examples=["post"])
    gfeb_reduction: int = Field(default=4, examples=[4])
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    seed: int = Field(default=settings.SEED, examples=[7])
    dtype: Literal["float64", "float32"] = Field(default=settings.DTYPE, examples=["float64"])

    @field_validator("ratio", "bands")
    @classmethod
    def check_power_of_two(cls, value: int) -> int:
        if value < 2 or not is_power_of_two(value):
            raise ValueError(f"must be a power of two >= 2, got {value}")
        return value

    @field_validator("width", "d_state", "expand", "conv_width", "depth", "gfeb_reduction")
    @classmethod
    def check_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be positive, got {value}")
        return value

    @property
    def n_r(self) -> int:
        return self.ratio.bit_length() - 1

    @property
    def n_c(self) -> int:
        return self.bands.bit_length() - 1


class TrainConfig(BaseModel):
    """Optimizer and step-decay schedule"""

    learning_rate: float = Field(default=4e-4, gt=0.0, examples=[4e-4])
    decay: float = Field(default=0.7, gt=0.0, lt=1.0, examples=[0.7])
    decay_every: int = Field(default=100, ge=1, examples=[100])
    steps: int = Field(default=200, ge=0, examples=[200, 360])
    batch: int = Field(default=4, ge=1, examples=[4, 32])
    betas: Tuple[float, float] = Field(default=(0.9, 0.999))
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0, examples=[1e-4])
    eval_every: int = Field(default=20, ge=1, examples=[20])
    patch: int = Field(default=16, ge=0, examples=[16, 64], description="GT crop size, 0 trains on whole scenes")
    seed: int = Field(default=settings.SEED, examples=[7])

    def lr_at(self, step: int) -> float:
        """Step decay: lr * decay^(step // decay_every)"""
        return self.learning_rate * self.decay ** (step // self.decay_every)


class HistoryEntry(BaseModel):
    """One logged training step"""

    step: int = Field(default=..., examples=[100])
    loss: float = Field(default=..., examples=[0.0213])
    lr: float = Field(default=..., examples=[2.8e-4])
    val_psnr: Optional[float] = Field(default=None, examples=[31.2])


# ==================== Dataset Models ====================


class SceneSpec(BaseModel):
    """Synthetic scene generator settings"""

    bands: int = Field(default=8, ge=1, examples=[8])
    size: int = Field(default=64, ge=4, examples=[64])
    count: int = Field(default=64, ge=1, examples=[64])
    seed: int = Field(default=settings.SEED, examples=[7])
    polygons: int = Field(default=3, ge=1, description="Sharp polygons per scene, at least one")
    texture_weight: float = Field(default=0.15, ge=0.0, le=1.0)
    band_correlation: float = Field(default=0.8, ge=0.0, le=1.0)
    value_range: Tuple[float, float] = Field(default=(0.0, 1.0))


# ==================== Metrics Models ====================


class MetricsReport(BaseModel):
    """Reduced resolution and / or full resolution quality indexes"""

    psnr: Optional[float] = Field(default=None, examples=[39.391])
    sam: Optional[float] = Field(default=None, ge=0.0, examples=[2.825])
    ergas: Optional[float] = Field(default=None, ge=0.0, examples=[2.087])
    q2n: Optional[float] = Field(default=None, le=1.0 + 1e-9, examples=[0.923])
    d_lambda: Optional[float] = Field(default=None, ge=0.0, le=1.0, examples=[0.024])
    d_s: Optional[float] = Field(default=None, ge=0.0, le=1.0, examples=[0.021])
    hqnr: Optional[float] = Field(default=None, ge=0.0, le=1.0, examples=[0.956])

    @model_validator(mode="after")
    def compose_hqnr(self):
        if self.d_lambda is not None and self.d_s is not None:
            self.hqnr = (1.0 - self.d_lambda) * (1.0 - self.d_s)
        return self

    def to_text(self, digits: int = 3) -> str:
        """Line oriented key=value report, unset fields omitted"""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if value == float("inf"):
                lines.append(f"{key}=inf")
            else:
                lines.append(f"{key}={value:.{digits}f}")
        return "\n".join(lines)

    def to_table(self) -> str:
        """Machine readable two-row tab separated table"""
        items = [(k, v) for k, v in self.model_dump().items() if v is not None]
        header = "\t".join(k for k, _ in items)
        row = "\t".join(repr(float(v)) for _, v in items)
        return f"{header}\n{row}"


# ==================== Run Models ====================


class RunManifest(BaseModel):
    """One per CLI run: enough to reproduce the outputs"""

    command: str = Field(default=..., examples=["gen"])
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int = Field(default=settings.SEED, examples=[7])
    timings: Dict[str, float] = Field(default_factory=dict, examples=[{"total_s": 1.25}])
    outputs: List[str] = Field(default_factory=list, examples=[["data/train/0.gt.s2wt"]])


# ==================== Verification Models ====================


class GradCheckEntry(BaseModel):
    name: str = Field(default=..., examples=["spebs1.fm_ll.alpha"])
    checked: int = Field(default=..., ge=0, examples=[32])
    max_rel_error: float = Field(default=..., ge=0.0, examples=[3.1e-9])
    passed: bool = Field(default=...)


class GradCheckReport(BaseModel):
    """Analytic vs central difference gradients, one entry per parameter"""

    entries: List[GradCheckEntry] = Field(default_factory=list)
    tolerance: float = Field(default=1e-4, examples=[1e-4])
    passed: bool = Field(default=...)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> List[str]:
        return [e.name for e in self.entries if not e.passed]
