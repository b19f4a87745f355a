"""Flat run configuration, model-size presets and the ablation variant tables.

Config files are flat YAML or JSON mappings whose keys are the field names of
:class:`RunConfig`. ``preset`` is applied first, explicit keys override it.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .denoising import DNConfig
from .geometry import VERB_BOX_VARIANTS

PRESETS = {
    "toy-S": dict(d_model=64, num_queries=16, num_layers=2, n_heads=4, n_levels=2, num_groups=3,
                  encoder_layers=0, backbone_width=16),
    # unit-test scale
    "tiny": dict(d_model=16, num_queries=6, num_layers=2, n_heads=2, n_levels=2, num_groups=1,
                 d_ffn=32, backbone_width=8, advisor_dim=8, n_points=2),
}


@dataclass(frozen=True)
class LossWeights:
    obj: float = 1.0
    verb: float = 1.0
    hoi: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for f in ("obj", "verb", "hoi", "l1", "giou"):
            if getattr(self, f) < 0:
                raise ValueError(f"loss weight {f} must be non-negative")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    rare_threshold: int = 10
    setting: str = "default"          # default | known-object
    score_mode: str = "auto"          # auto | hoi | verb
    ap_mode: str = "all-point"        # all-point | 11-point
    top_k: int = 64

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.rare_threshold < 1:
            raise ValueError("rare_threshold must be >= 1")
        if self.setting not in ("default", "known-object"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.score_mode not in ("auto", "hoi", "verb"):
            raise ValueError(f"unknown score_mode {self.score_mode!r}")
        if self.ap_mode not in ("all-point", "11-point"):
            raise ValueError(f"unknown ap_mode {self.ap_mode!r}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    preset: str = "toy-S"

    # model size
    d_model: int = 64
    num_queries: int = 16
    num_layers: int = 2
    n_heads: int = 4
    n_levels: int = 2
    n_points: int = 4
    d_ffn: int = 128
    encoder_layers: int = 0
    backbone_width: int = 16

    # denoising
    eta_o: float = 0.3
    eta_v: float = 0.3
    lambda_v: float = 0.4
    delta_b: float = 0.4
    num_groups: int = 3

    # loss / matching
    w_obj: float = 1.0
    w_verb: float = 1.0
    w_hoi: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # evaluation
    iou_threshold: float = 0.5
    rare_threshold: int = 10
    score_mode: str = "auto"
    ap_mode: str = "all-point"
    top_k: int = 64

    # optimization
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 2 / 3
    lr_drop_factor: float = 0.1
    batch_size: int = 16
    epochs: int = 50
    grad_clip: float = 0.1
    checkpoint_every: int = 10
    max_train_images: int = 0        # 0 = all
    max_test_images: int = 0
    eval_every: int = 1

    # ablation switches
    use_subject_decoder: bool = True
    use_verb_decoder: bool = True
    fusion: str = "so"               # so | sum
    use_stg: bool = True
    use_vla: bool = False
    verb_box: str = "asmbr"
    use_box_pe: bool = True
    use_text_init: bool = True
    use_vla_verb_prediction: bool = True

    # advisor
    provider: str = "stub"
    provider_seed: int = 0
    advisor_dim: int = 32

    def __post_init__(self):
        if self.fusion not in ("so", "sum"):
            raise ConfigError(f"fusion must be 'so' or 'sum', got {self.fusion!r}")
        if self.verb_box not in VERB_BOX_VARIANTS:
            raise ConfigError(f"verb_box must be one of {VERB_BOX_VARIANTS}, got {self.verb_box!r}")
        if not self.use_subject_decoder and self.fusion == "so":
            raise ConfigError("S-O attention needs the subject decoder (use fusion: sum when use_subject_decoder is off)")
        if self.d_model % 8 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a multiple of 8 and of n_heads")
        if min(self.num_queries, self.num_layers, self.n_levels, self.n_points, self.batch_size, self.epochs) < 1:
            raise ConfigError("sizes must be positive")
        if not 0 < self.lr_drop_fraction <= 1:
            raise ConfigError("lr_drop_fraction must lie in (0, 1]")
        # delegate range checks
        self.dn
        self.loss_weights
        self.eval_config

    @property
    def dn(self) -> DNConfig:
        return DNConfig(self.eta_o, self.eta_v, self.lambda_v, self.delta_b, self.num_groups)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_obj, self.w_verb, self.w_hoi, self.w_l1, self.w_giou,
                           self.focal_alpha, self.focal_gamma)

    @property
    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.iou_threshold, self.rare_threshold, "default", self.score_mode,
                          self.ap_mode, self.top_k)

    @property
    def lr_drop_epoch(self) -> int:
        return max(1, round(self.epochs * self.lr_drop_fraction))

    def switches(self) -> dict:
        names = ("use_subject_decoder", "use_verb_decoder", "fusion", "use_stg", "use_vla", "verb_box",
                 "use_box_pe", "use_text_init", "use_vla_verb_prediction", "eta_o", "eta_v", "delta_b")
        return {n: getattr(self, n) for n in names}

    def replace(self, **overrides) -> "RunConfig":
        _check_keys(overrides)
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        _check_keys(data)
        preset = data.get("preset", cls.preset)
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        merged = {**PRESETS[preset], **data}
        return cls(**merged)


def _check_keys(data: dict):
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")


def read_mapping(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping at top level")
    return data


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    data = read_mapping(path) if path else {}
    data.update(overrides)
    return RunConfig.from_dict(data)


# Ablation tables ---------------------------------------------------------
# Each row maps onto exactly one switch combination.

TABLE3 = {
    "t3-1_no-sdec": dict(use_subject_decoder=False, use_verb_decoder=True, fusion="sum", use_stg=True),
    "t3-2_no-vdec": dict(use_subject_decoder=True, use_verb_decoder=False, fusion="sum", use_stg=True),
    "t3-3_odec-only": dict(use_subject_decoder=False, use_verb_decoder=False, fusion="sum", use_stg=False),
    "t3-4_odec-sdec": dict(use_subject_decoder=True, use_verb_decoder=False, fusion="sum", use_stg=False),
    "t3-5_sov-sum": dict(use_subject_decoder=True, use_verb_decoder=True, fusion="sum", use_stg=False),
    "t3-6_sov-sum-stg": dict(use_subject_decoder=True, use_verb_decoder=True, fusion="sum", use_stg=True),
    "t3-7_sov-stg": dict(use_subject_decoder=True, use_verb_decoder=True, fusion="so", use_stg=True),
    "t3-8_vla-no-vdec": dict(use_subject_decoder=True, use_verb_decoder=False, fusion="so", use_stg=True,
                             use_vla=True),
    "t3-9_sov-stg-vla": dict(use_subject_decoder=True, use_verb_decoder=True, fusion="so", use_stg=True,
                             use_vla=True),
}

TABLE4 = {f"t4-{i + 1}_{v}": dict(verb_box=v) for i, v in enumerate(VERB_BOX_VARIANTS)}


def _dn_row(box: bool, obj: bool, verb: bool) -> dict:
    row = {}
    if not box:
        row["delta_b"] = 0.0
    if not obj:
        row["eta_o"] = 0.0
    if not verb:
        row["eta_v"] = 0.0
    return row


TABLE6 = {
    "t6-1_no-noise": _dn_row(False, False, False),
    "t6-2_box": _dn_row(True, False, False),
    "t6-3_box-verb": _dn_row(True, False, True),
    "t6-4_obj-verb": _dn_row(False, True, True),
    "t6-5_box-obj": _dn_row(True, True, False),
    "t6-6_all": _dn_row(True, True, True),
}

TABLE_VLA = {
    "vla-1_full": dict(use_vla=True, use_vla_verb_prediction=True, use_text_init=True, use_box_pe=True),
    "vla-2_no-pe": dict(use_vla=True, use_vla_verb_prediction=True, use_text_init=True, use_box_pe=False),
    "vla-3_no-text-init": dict(use_vla=True, use_vla_verb_prediction=True, use_text_init=False, use_box_pe=True),
    "vla-4_no-verb-pred": dict(use_vla=True, use_vla_verb_prediction=False, use_text_init=True, use_box_pe=True),
    "vla-5_no-verb-pred-no-text": dict(use_vla=True, use_vla_verb_prediction=False, use_text_init=False,
                                       use_box_pe=True),
}

VARIANT_SETS = {"table3": TABLE3, "table4": TABLE4, "table6": TABLE6, "vla": TABLE_VLA}
VARIANT_SETS["all"] = {k: v for table in list(VARIANT_SETS.values()) for k, v in table.items()}


def load_variants(spec: str | Path) -> dict[str, dict]:
    """A builtin set name (``table3``, ``table4``, ``table6``, ``vla``, ``all``) or a
    YAML/JSON file mapping variant names to override mappings."""
    if str(spec) in VARIANT_SETS:
        return dict(VARIANT_SETS[str(spec)])
    data = read_mapping(spec)
    for name, overrides in data.items():
        if not isinstance(overrides, dict):
            raise ConfigError(f"variant {name!r}: overrides must be a mapping")
        _check_keys(overrides)
    return data
