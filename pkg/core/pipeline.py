"""
Run orchestration: configuration loading and the synth / transform / train /
eval / profile / report stages.

Every artifact is stamped with a fingerprint. Checkpoints carry the training
fingerprint (data, sparsify, net, omni and train sections) so a checkpoint is
only reused by a config that would have produced it; everything else carries
the whole-config fingerprint.
"""

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import torch
import yaml

import config
from core.data import DatasetBundle, concat_bundles, generate_synthetic, load_dataset, save_dataset, synthetic_bundle
from core.episodes import build_omni_schedule
from core.errors import ConfigError, DivergenceError
from core.evaluation import evaluate_grid, mean_iou
from core.learners.registry import get_learner
from core.learners.trainer import meta_train, sl_train
from core.net import MiniUNet, init_network, param_count
from core.profiling import profile_inference, profile_prediction
from core.report import build_report, write_jsonl
from schemas import CheckpointManifest, RunConfig, finite_or_none

log = logging.getLogger(__name__)

STAGE_ORDER = ("synth", "transform", "train", "eval", "profile", "report")


# --- Configuration ---

def read_config_mapping(path: Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping at the top level")
    return data


def set_dotted(mapping: dict, key: str, value: Any) -> None:
    node = mapping
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override {key}: {part} is not a section")
        node = child
    node[parts[-1]] = value


def apply_overrides(mapping: dict, overrides: Iterable[str]) -> dict:
    """Apply `section.key=value` overrides; values are parsed as YAML scalars or lists."""
    out = copy.deepcopy(mapping)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        set_dotted(out, key.strip(), yaml.safe_load(raw))
    return out


def load_run_config(path: Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read, override and validate. Raises pydantic ValidationError with field-level messages."""
    return RunConfig.model_validate(apply_overrides(read_config_mapping(path), overrides))


def resolve_output_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) if cfg.output_dir is not None else config.get_output_root() / cfg.name


# --- Datasets ---

def _synthetic_offsets(cfg: RunConfig) -> dict[str, int]:
    offsets, offset = {}, 0
    for split, count in cfg.data.synth_splits.items():
        offsets[split] = offset
        offset += count
    return offsets


def split_bundle(cfg: RunConfig, split: str) -> DatasetBundle:
    data = cfg.data
    if data.source == "directory":
        return load_dataset(data.root, split, data.image_size, data.support_fraction, data.seed, data.crop)
    if split not in data.synth_splits:
        raise ConfigError(f"synthetic split {split!r} is not listed in data.synth_splits")
    spec = data.synth.model_copy(update={"image_size": data.image_size})
    return synthetic_bundle(spec, data.synth_splits[split], _synthetic_offsets(cfg)[split], split,
                            data.support_fraction, data.seed)


def role_bundles(cfg: RunConfig, splits: list[str]) -> list[DatasetBundle]:
    bundles = [b for b in (split_bundle(cfg, s) for s in splits) if len(b)]
    for b in bundles:
        if not b.support or not b.query:
            raise ConfigError(f"dataset {b.name} needs both support and query images")
    return bundles


# --- Checkpoints ---

def save_checkpoint(out_dir: Path, model: MiniUNet, manifest: CheckpointManifest) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / config.CHECKPOINT_WEIGHTS)
    (out_dir / config.CHECKPOINT_MANIFEST).write_text(manifest.model_dump_json(indent=2))
    log.info(f"💾 Checkpoint saved to {out_dir} (epoch {manifest.epoch}, val_iou={manifest.val_iou})")


def load_checkpoint(out_dir: Path, cfg: RunConfig) -> tuple[MiniUNet, CheckpointManifest]:
    manifest_path = out_dir / config.CHECKPOINT_MANIFEST
    if not manifest_path.is_file():
        raise ConfigError(f"no checkpoint in {out_dir}; run the train stage first")
    manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    expected = cfg.training_fingerprint()
    if manifest.fingerprint != expected:
        raise ConfigError(
            f"checkpoint in {out_dir} was trained with fingerprint {manifest.fingerprint[:12]}, "
            f"the current config gives {expected[:12]}"
        )
    model = init_network(manifest.net)
    model.load_state_dict(torch.load(out_dir / config.CHECKPOINT_WEIGHTS, map_location="cpu", weights_only=True))
    model.to(config.FWS_DEVICE).eval()
    return model, manifest


# --- Stages ---

@dataclass
class RunContext:
    cfg: RunConfig
    out_dir: Path
    device: str
    fingerprint: str


def stage_synth(ctx: RunContext) -> None:
    data = ctx.cfg.data
    if data.source != "synthetic":
        log.info("🟠 data.source is a directory; nothing to synthesize")
        return
    spec = data.synth.model_copy(update={"image_size": data.image_size})
    offsets = _synthetic_offsets(ctx.cfg)
    for split, count in data.synth_splits.items():
        written = save_dataset(generate_synthetic(spec, count, offsets[split], prefix=split), ctx.out_dir / "data", split)
        log.info(f"🧪 Wrote {written} synthetic samples to {ctx.out_dir / 'data' / split}")


def stage_transform(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    train = split_bundle(cfg, cfg.data.train_split)
    schedule = build_omni_schedule(train, cfg.omni, cfg.train.batch_size)
    path = ctx.out_dir / config.SCHEDULE_MANIFEST
    payload = {
        "fingerprint": ctx.fingerprint,
        "schedule_fingerprint": schedule.fingerprint,
        "epoch_permutation_seed": schedule.epoch_permutation_seed,
        "episodes": [r.model_dump() for r in schedule.records(train)],
    }
    path.write_text(json.dumps(payload, indent=2))
    log.info(f"🗂️ Schedule with {len(schedule)} episodes written to {path}")
    return path


def stage_train(ctx: RunContext) -> CheckpointManifest:
    cfg = ctx.cfg
    learner = get_learner(cfg.train.learner)
    train = split_bundle(cfg, cfg.data.train_split)
    if not len(train):
        raise ConfigError(f"training split {cfg.data.train_split!r} is empty")
    if train.samples[0].channels != cfg.net.channels:
        raise ConfigError(f"net.channels={cfg.net.channels} but the data has {train.samples[0].channels} channels")
    validation = role_bundles(cfg, cfg.data.val_splits)
    val_bundle = concat_bundles(validation, name="validation") if validation else None

    def validate(model: MiniUNet) -> float:
        return mean_iou(evaluate_grid(model, learner, val_bundle, cfg.validation, cfg.sparsify, cfg.train,
                                      mode="combine", device=ctx.device))

    model = init_network(cfg.net).to(ctx.device)
    log_path = ctx.out_dir / config.TRAIN_LOG
    log_path.unlink(missing_ok=True)
    kwargs = dict(validate=validate if val_bundle else None, log_path=log_path, device=ctx.device,
                  fingerprint=ctx.fingerprint)
    try:
        if learner.family == "sl":
            result = sl_train(model, list(train.samples), cfg.train, **kwargs)
        else:
            result = meta_train(model, learner, train, cfg.train, cfg.omni, cfg.sparsify, **kwargs)
    except DivergenceError as e:
        # the trainer has restored the last good epoch into `model`
        last_good = (e.epoch if e.epoch is not None else 0) - 1
        manifest = _manifest(cfg, model, epoch=last_good, val_iou=None).model_copy(update={"diverged_step": e.step})
        save_checkpoint(ctx.out_dir, model, manifest)
        raise

    manifest = _manifest(cfg, model, epoch=result.best_epoch, val_iou=result.best_val)
    save_checkpoint(ctx.out_dir, model, manifest)
    return manifest


def _manifest(cfg: RunConfig, model: MiniUNet, epoch: int, val_iou: float | None) -> CheckpointManifest:
    return CheckpointManifest(
        learner=cfg.train.learner, net=cfg.net, seed=cfg.train.seed, epoch=max(0, epoch),
        param_count=param_count(model), val_iou=finite_or_none(val_iou), fingerprint=cfg.training_fingerprint(),
    )


def stage_eval(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    model, manifest = load_checkpoint(ctx.out_dir, cfg)
    learner = get_learner(manifest.learner)
    records = []
    skipped = []
    for bundle in role_bundles(cfg, cfg.data.test_splits):
        records += evaluate_grid(model, learner, bundle, cfg.evaluation, cfg.sparsify, cfg.train,
                                 fingerprint=ctx.fingerprint, device=ctx.device, skipped=skipped)
    path = ctx.out_dir / config.METRICS_FILE
    write_jsonl(path, (r.model_dump() for r in records))
    write_jsonl(ctx.out_dir / config.SKIPPED_FILE, (s.model_dump() for s in skipped))
    if skipped:
        log.warning(f"⚠️ {len(skipped)} grid cells skipped, listed in {config.SKIPPED_FILE}")
    log.info(f"🟢 {len(records)} metric records written to {path} (mean IoU {mean_iou(records):.4f})")
    return path


def stage_profile(ctx: RunContext) -> list[Path]:
    cfg = ctx.cfg
    model, manifest = load_checkpoint(ctx.out_dir, cfg)
    bundles = role_bundles(cfg, cfg.data.test_splits)
    if not bundles:
        raise ConfigError("profiling needs a non-empty test split")
    inference, prediction = [], []
    for learner_id in cfg.profile.learners or [manifest.learner]:
        learner = get_learner(learner_id)
        inference += profile_inference(model, learner, bundles[0], cfg.profile, cfg.train, cfg.sparsify,
                                       ctx.fingerprint, ctx.device)
        prediction += profile_prediction(model, learner, bundles[0], cfg.profile, cfg.train, cfg.sparsify,
                                         ctx.fingerprint, ctx.device)
    paths = [ctx.out_dir / config.TIMINGS_FILE, ctx.out_dir / config.PREDICTION_TIMINGS_FILE]
    write_jsonl(paths[0], (r.model_dump() for r in inference))
    write_jsonl(paths[1], (r.model_dump() for r in prediction))
    return paths


def stage_report(ctx: RunContext) -> list[Path]:
    return build_report(
        ctx.out_dir / config.METRICS_FILE, ctx.out_dir / "report", ctx.fingerprint,
        timing_paths=[ctx.out_dir / config.TIMINGS_FILE, ctx.out_dir / config.PREDICTION_TIMINGS_FILE],
        skipped_path=ctx.out_dir / config.SKIPPED_FILE,
    )


STAGES = {
    "synth": stage_synth,
    "transform": stage_transform,
    "train": stage_train,
    "eval": stage_eval,
    "profile": stage_profile,
    "report": stage_report,
}


def run_pipeline(cfg: RunConfig, stages: Iterable[str] | None = None) -> Path:
    """Run the requested stages in pipeline order and return the output directory."""
    requested = set(stages if stages is not None else cfg.stages)
    unknown = requested - set(STAGE_ORDER)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}; expected a subset of {list(STAGE_ORDER)}")

    threads = config.get_num_threads()
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)

    out_dir = resolve_output_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = cfg.fingerprint()
    resolved = {"fingerprint": fingerprint, "training_fingerprint": cfg.training_fingerprint(),
                "config": cfg.model_dump(mode="json")}
    (out_dir / config.RESOLVED_CONFIG).write_text(json.dumps(resolved, indent=2, sort_keys=True))

    ctx = RunContext(cfg, out_dir, config.FWS_DEVICE, fingerprint)
    for stage in STAGE_ORDER:
        if stage in requested:
            log.info(f"🟢 Stage {stage} started for run {cfg.name}")
            STAGES[stage](ctx)
    log.info(f"🟢 Run {cfg.name} finished; outputs in {out_dir}")
    return out_dir
