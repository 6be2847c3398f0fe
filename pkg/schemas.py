import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Technique = Literal["points", "grid", "contours", "skeleton", "regions"]
TECHNIQUES: tuple[str, ...] = ("points", "grid", "contours", "skeleton", "regions")

LearnerId = Literal["weasel", "protoseg", "o_weasel", "o_protoseg", "eo_weasel", "eo_protoseg", "sl_baseline"]
Stage = Literal["synth", "transform", "train", "eval", "profile", "report"]


class StrictModel(BaseModel):
    """Base for configuration sections: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


def check_density(technique: str, value: float) -> None:
    """Raise ValueError when `value` is outside the density domain of `technique`."""
    if technique == "points":
        if value < 1 or float(value) != int(value):
            raise ValueError(f"points density is a point count and must be an integer >= 1, got {value}")
    elif not 0 < value <= 1:
        raise ValueError(f"{technique} density must lie in (0, 1], got {value}")


# --- Sparsification ---

class SparsifySizes(StrictModel):
    """Size parameters shared by every sparse label drawn during a run."""
    point_size: int = Field(3, ge=1, description="Downscale factor of points and grid.")
    grid_spacing: int = Field(4, ge=2, description="Lattice spacing in downscaled pixels.")
    erode_radius: int = Field(3, ge=0, description="Erosion disk radius for contours.")
    dilate_radius: int = Field(1, ge=0, description="Dilation disk radius for points and skeleton.")
    contour_dilate_radius: int = Field(0, ge=0, description="Dilation of contour lines; 0 keeps them one pixel wide.")
    compactness: float = Field(1.0, gt=0, description="SLIC compactness for regions.")
    region_scale: float = Field(12.0, gt=0, description="Superpixel side is min(H, W) / region_scale.")
    blob_size: float = Field(0.1, gt=0, le=1, description="Blob size as a fraction of the larger side (binary_blobs).")

    def params(self, technique: str, density: float, seed: int) -> "SparsifyParams":
        return SparsifyParams(technique=technique, density=density, seed=seed, **self.model_dump())


class SparsifyParams(SparsifySizes):
    technique: Technique
    density: float = Field(gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _density_domain(self):
        check_density(self.technique, self.density)
        return self


# --- Episodes ---

class ValueSpace(StrictModel):
    """Either a (low, high) range drawn uniformly or an explicit option list."""
    bounds: Optional[tuple[float, float]] = None
    options: Optional[list[float]] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.bounds is None) == (self.options is None):
            raise ValueError("exactly one of 'bounds' or 'options' must be given")
        if self.options is not None and not self.options:
            raise ValueError("options must not be empty")
        if self.bounds is not None and self.bounds[0] > self.bounds[1]:
            raise ValueError(f"bounds low {self.bounds[0]} exceeds high {self.bounds[1]}")
        return self

    def values(self) -> list[float]:
        return list(self.options) if self.options is not None else list(self.bounds)

    def draw(self, rng: np.random.Generator, integer: bool = False, decimals: int | None = 2) -> float:
        if self.options is not None:
            return self.options[int(rng.integers(len(self.options)))]
        low, high = self.bounds
        if integer:
            return int(rng.integers(int(low), int(high) + 1))
        value = float(rng.uniform(low, high))
        # two decimals keep drawn densities readable in logs and manifests
        return value if decimals is None else round(value, decimals)


def default_train_densities() -> dict[str, ValueSpace]:
    return {
        "points": ValueSpace(bounds=(5, 50)),
        "grid": ValueSpace(bounds=(0.1, 1.0)),
        "contours": ValueSpace(bounds=(0.1, 1.0)),
        "skeleton": ValueSpace(bounds=(0.1, 1.0)),
        "regions": ValueSpace(bounds=(0.1, 1.0)),
    }


class OmniConfig(StrictModel):
    shots: ValueSpace = Field(default_factory=lambda: ValueSpace(bounds=(1, 20)))
    densities: dict[Technique, ValueSpace] = Field(default_factory=default_train_densities)
    query_batch: Optional[int] = Field(None, ge=1, description="Defaults to the training batch size.")
    # combine and full_combine are the validation and evaluation roles, see EvalGrid
    mode: Literal["mix"] = "mix"
    seed: int = 0

    @field_validator("shots")
    @classmethod
    def _positive_shots(cls, v: ValueSpace):
        if any(s < 1 or float(s) != int(s) for s in v.values()):
            raise ValueError("shot values must be integers >= 1")
        return v

    @model_validator(mode="after")
    def _density_domains(self):
        if not self.densities:
            raise ValueError("at least one technique must be configured")
        for technique, space in self.densities.items():
            for value in space.values():
                check_density(technique, value)
        return self

    @property
    def techniques(self) -> list[str]:
        return [t for t in TECHNIQUES if t in self.densities]


class EvalGrid(StrictModel):
    mode: Literal["combine", "full_combine"] = "combine"
    shots: list[int] = Field(default_factory=lambda: [5, 10, 15])
    densities: dict[Technique, list[float]] = Field(default_factory=lambda: {
        "points": [13, 25, 37],
        "grid": [0.25, 0.5, 0.75],
        "contours": [0.25, 0.5, 0.75],
        "skeleton": [0.25, 0.5, 0.75],
        "regions": [0.25, 0.5, 0.75],
    })
    query_batch: int = Field(5, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _domains(self):
        if not self.shots or any(s < 1 for s in self.shots):
            raise ValueError("shots must be a non-empty list of integers >= 1")
        for technique, values in self.densities.items():
            if not values:
                raise ValueError(f"density options for {technique} must not be empty")
            for value in values:
                check_density(technique, value)
        return self


# --- Network & Training ---

class NetConfig(StrictModel):
    channels: int = Field(3, ge=1)
    classes: int = Field(3, ge=2)
    embed_dim: int = Field(16, ge=2)
    width: int = Field(16, ge=1)
    levels: int = Field(4, ge=1)
    seed: int = 0


class OptimizerConfig(StrictModel):
    lr: float = Field(1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.0, ge=0)
    step_size: int = Field(10, ge=1, description="Scheduler period in epochs.")
    gamma: float = Field(0.5, gt=0, le=1)


class TrainConfig(StrictModel):
    learner: LearnerId = "eo_protoseg"
    batch_size: int = Field(5, ge=1)
    epochs: int = Field(30, ge=1)
    iterations: int = Field(50, ge=1, description="Steps per epoch in original mode.")
    inner_lr: float = Field(0.01, gt=0)
    tune_epochs: int = Field(20, ge=0)
    first_order: bool = False
    per_annotated_norm: bool = False
    macro_prototypes: bool = False
    validate_every: int = Field(1, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    seed: int = 0


# --- Data ---

class CropSpec(StrictModel):
    v_pad_mean: float = Field(0.20, ge=0)
    v_pad_std: float = Field(0.08, ge=0)
    h_pad_mean: float = Field(0.27, ge=0)
    h_pad_std: float = Field(0.11, ge=0)
    seed: int = 0


class SynthSpec(StrictModel):
    count: int = Field(250, ge=1)
    image_size: int = Field(128, ge=8)
    canvas_size: int = Field(256, ge=16, description="Full fundus canvas before disc-centred cropping.")
    disc_radius: tuple[float, float] = (0.12, 0.18)
    cup_ratio: tuple[float, float] = (0.3, 0.7)
    color_jitter: float = Field(0.05, ge=0)
    texture_noise: float = Field(0.04, ge=0)
    pixel_noise: float = Field(0.02, ge=0)
    crop: CropSpec = Field(default_factory=lambda: CropSpec(v_pad_mean=0.35, v_pad_std=0.05,
                                                            h_pad_mean=0.35, h_pad_std=0.05))
    seed: int = 0

    @model_validator(mode="after")
    def _geometry(self):
        lo, hi = self.cup_ratio
        if not 0 < lo <= hi < 1:
            raise ValueError(f"cup_ratio must satisfy 0 < low <= high < 1, got {self.cup_ratio}")
        r_lo, r_hi = self.disc_radius
        if not 0 < r_lo <= r_hi:
            raise ValueError(f"disc_radius must satisfy 0 < low <= high, got {self.disc_radius}")
        # disc plus jitter plus the widest expected padding has to stay on the canvas
        if r_hi * (1 + 2 * max(self.crop.v_pad_mean, self.crop.h_pad_mean)) + 0.05 > 0.5:
            raise ValueError("disc radius too large for the canvas once cropping padding is added")
        return self


class DataConfig(StrictModel):
    source: Literal["synthetic", "directory"] = "synthetic"
    root: Optional[Path] = None
    image_size: int = Field(128, ge=8)
    support_fraction: float = Field(0.5, gt=0, lt=1)
    train_split: str = "train"
    val_splits: list[str] = Field(default_factory=lambda: ["val"])
    test_splits: list[str] = Field(default_factory=lambda: ["test"])
    synth: SynthSpec = Field(default_factory=SynthSpec)
    crop: Optional[CropSpec] = Field(
        default_factory=CropSpec, description="Disc crop for directory datasets; null keeps images as stored.")
    synth_splits: dict[str, int] = Field(default_factory=lambda: {"train": 200, "val": 25, "test": 50})
    seed: int = 0

    @model_validator(mode="after")
    def _root_exists(self):
        if self.source == "directory":
            if self.root is None:
                raise ValueError("data.root is required when data.source is 'directory'")
            if not Path(self.root).is_dir():
                raise ValueError(f"dataset root {self.root} does not exist")
        return self


# --- Harness ---

class ProfileConfig(StrictModel):
    shots: list[int] = Field(default_factory=lambda: [10, 20])
    batch_sizes: list[int] = Field(default_factory=lambda: [1, 5])
    reps: int = Field(10, ge=3)
    learners: list[LearnerId] = Field(default_factory=list)
    technique: Technique = "regions"
    density: float = 0.5
    seed: int = 0

    @model_validator(mode="after")
    def _domains(self):
        if not self.shots or any(s < 1 for s in self.shots):
            raise ValueError("profile shots must be a non-empty list of integers >= 1")
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ValueError("profile batch sizes must be a non-empty list of integers >= 1")
        check_density(self.technique, self.density)
        return self


class SweepConfig(StrictModel):
    grid: dict[str, list] = Field(default_factory=dict)
    random: dict[str, ValueSpace] = Field(default_factory=dict)
    samples: int = Field(0, ge=0)
    integer_keys: list[str] = Field(default_factory=list, description="Random keys drawn as integers.")
    stages: list[Stage] = Field(default_factory=lambda: ["train", "eval"])
    seed: int = 0


class RunConfig(StrictModel):
    name: str = "fws"
    stages: list[Stage] = Field(default_factory=lambda: ["synth", "train", "eval", "report"])
    output_dir: Optional[Path] = None
    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    sparsify: SparsifySizes = Field(default_factory=SparsifySizes)
    net: NetConfig = Field(default_factory=NetConfig)
    omni: OmniConfig = Field(default_factory=OmniConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    validation: EvalGrid = Field(default_factory=EvalGrid)
    evaluation: EvalGrid = Field(default_factory=lambda: EvalGrid(
        mode="full_combine",
        shots=[1, 5, 10, 15, 20],
        densities={
            "points": [1, 13, 25, 37, 50],
            "grid": [0.1, 0.25, 0.5, 0.75, 1.0],
            "contours": [0.1, 0.25, 0.5, 0.75, 1.0],
            "skeleton": [0.1, 0.25, 0.5, 0.75, 1.0],
            "regions": [0.1, 0.25, 0.5, 0.75, 1.0],
        },
    ))
    profile: ProfileConfig = Field(default_factory=ProfileConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    def fingerprint(self, *sections: str) -> str:
        """
        SHA-256 over the canonical JSON of the named sections, or of every
        field that can change a result (output location and stage list excluded).
        """
        dumped = self.model_dump(mode="json", exclude={"output_dir", "stages", "sweep"})
        if sections:
            dumped = {name: dumped[name] for name in sections}
        blob = json.dumps(dumped, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def training_fingerprint(self) -> str:
        return self.fingerprint("data", "sparsify", "net", "omni", "train")


# --- Records ---

class MetricRecord(BaseModel):
    """One evaluated query image."""
    learner: str
    dataset: str
    shots: int = Field(ge=0)
    technique: str
    density: float
    seed: int
    image_id: str
    iou_od: float = Field(ge=0, le=1)
    iou_oc: float = Field(ge=0, le=1)
    overhead_time: float = Field(0.0, ge=0)
    predict_time: float = Field(0.0, ge=0)
    fingerprint: str = ""

    @property
    def mean_iou(self) -> float:
        return (self.iou_od + self.iou_oc) / 2


class SkippedCell(BaseModel):
    """A grid cell whose supports could not be prepared; it has no metric records."""
    learner: str
    dataset: str
    shots: int = Field(ge=0)
    technique: str
    density: float
    seed: int
    queries: int = Field(ge=0)
    reason: str
    fingerprint: str = ""


TIMING_FIELDS = ("overhead_time", "predict_time")


class TimingRecord(BaseModel):
    learner: str
    kind: Literal["inference", "prediction"]
    shots: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    rep: int = Field(ge=0)
    overhead_time: float = Field(0.0, ge=0)
    predict_time: float = Field(0.0, ge=0)
    metric_time: float = Field(0.0, ge=0)
    total_time: float = Field(0.0, ge=0)
    per_image_time: float = Field(0.0, ge=0)
    images: int = Field(0, ge=0)
    fingerprint: str = ""


class CheckpointManifest(BaseModel):
    learner: LearnerId
    net: NetConfig
    seed: int
    epoch: int = Field(ge=0)
    param_count: int = Field(ge=0)
    val_iou: Optional[float] = None
    diverged_step: Optional[int] = Field(None, description="Global step that diverged; the weights are the epoch before.")
    fingerprint: str
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class EpisodeRecord(BaseModel):
    """Audit entry for one scheduled episode."""
    index: int
    support_ids: list[str]
    query_ids: list[str]
    shots: int
    technique: str
    density: float
    seed: int


def finite_or_none(value: float | None) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return value
