"""Run configuration: a flat key-value text file mapped onto a dataclass.

Defaults are sized for the desk-scale synthetic experiments; the
full-scale training schedules remain reachable by overriding the epoch
and step counts.
"""
from dataclasses import dataclass, fields

from . import energies as en


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    marker_kind: str = "desk"
    fps: int = 30

    # dataset
    train_clips: int = 64
    val_clips: int = 8
    test_clips: int = 8
    clip_duration: float = 4.0
    clip_frames: int = 120

    # synthetic observations
    sigma_2d: float = 1.0
    sigma_3d: float = 0.005
    cloud_points: int = 150
    mask_kind: str = "lower-body"

    # prior training
    smooth_alpha: float = 1.0
    smooth_epochs: int = 12
    smooth_batch: int = 60
    smooth_lr: float = 1e-4
    infill_epochs: int = 60
    infill_batch: int = 120
    infill_lr: float = 1e-4
    finetune_steps: int = 100
    finetune_lr: float = 1e-4

    # stage fitting
    stage1_steps: int = 1500
    stage1_lr: float = 0.05
    stage2_steps: int = 900
    stage2_lr: float = 5e-3
    stage3_steps: int = 900
    stage3_lr: float = 5e-3
    fit_clips: int = 2
    swap_stages: bool = False  # diagnostic 1-3-2 order; not a supported path

    # energy weights
    weight_depth: float = 10.0
    weight_contact: float = 0.5
    weight_coll: float = 100.0
    weight_smooth: float = 1000.0
    weight_fric: float = 10.0
    weight_infill: float = 1.0

    def validate(self):
        plainly_positive = (
            "fps", "train_clips", "val_clips", "test_clips", "clip_duration",
            "clip_frames", "smooth_epochs", "smooth_batch", "infill_epochs",
            "infill_batch", "finetune_steps", "stage1_steps", "stage2_steps",
            "stage3_steps", "fit_clips", "cloud_points",
            "smooth_lr", "infill_lr", "finetune_lr",
            "stage1_lr", "stage2_lr", "stage3_lr", "smooth_alpha")
        for name in plainly_positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config {name} must be positive")
        if self.sigma_2d < 0 or self.sigma_3d < 0:
            raise ValueError("config noise sigmas must be non-negative")
        if self.mask_kind not in ("lower-body", "random-window"):
            raise ValueError(f"unknown mask_kind {self.mask_kind!r}")
        self.energy_weights()  # non-negativity
        return self

    def energy_weights(self):
        return en.EnergyWeights(
            depth=self.weight_depth, contact=self.weight_contact,
            coll=self.weight_coll, smooth=self.weight_smooth,
            fric=self.weight_fric, infill=self.weight_infill)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse(name, raw):
    kind = _FIELD_TYPES[name]
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config {name} wants a boolean, got {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def set_option(cfg, name, raw):
    """Assign one 'key value' pair with type coercion; unknown keys fail."""
    if name not in _FIELD_TYPES:
        raise ValueError(f"unknown config key {name!r}")
    setattr(cfg, name, _parse(name, str(raw)))
    return cfg


def load_config(path):
    cfg = RunConfig()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, _, raw = line.partition(" ")
            if not raw:
                raise ValueError(f"{path}:{lineno}: expected 'key value'")
            try:
                set_option(cfg, name, raw.strip())
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return cfg.validate()


def save_config(path, cfg):
    with open(path, "w") as f:
        for fld in fields(RunConfig):
            value = getattr(cfg, fld.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            elif value == "":
                continue  # empty strings reload as the field default
            f.write(f"{fld.name} {value}\n")
