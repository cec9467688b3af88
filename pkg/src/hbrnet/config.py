"""Flat key=value run configuration.

One file (or ``--set key=value`` overrides) drives every tunable of the
pipeline through namespaced keys: ``cohort.*``, ``bias.*``, ``stage1.*``,
``patch.*``, ``stage2.*``, ``eval.*``, plus the global ``seed`` and the
output directory ``out``.  Values resolve in order defaults < file <
overrides, and the fully resolved table can be echoed back out in a fixed
key order so a run is reproducible from its own echo byte for byte.

All randomness flows from the single global ``seed``: it seeds cohort
synthesis (patient streams are derived per index), both training stages,
patch subsampling/augmentation draws, and fold shuffling; fold-indexed
offsets are applied downstream by the cross-validation driver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .biasfield import BiasSpec, NoiseSpec
from .detector import LossConfig, ResNetConfig, Stage2Hyper
from .evaluate import CVConfig
from .hunet import HUNetConfig, Stage1Hyper
from .patches import AugmentConfig, PatchConfig
from .phantom import CohortSpec

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_assignment", "DEFAULTS"]


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches, or invalid values; the
    message names the offending key and, when known, the source line."""


@dataclass(frozen=True)
class _Key:
    name: str
    kind: str
    default: object
    choices: tuple = ()


# The declaration order below is the canonical echo order.
DEFAULTS = (
    _Key("seed", "int", 0),
    _Key("out", "str", "hbrnet-out"),
    _Key("cohort.n_patients", "int", 24),
    _Key("cohort.cancer_fraction", "float", 0.5),
    _Key("cohort.dims", "ints", (20, 64, 64)),
    _Key("cohort.z_range", "opt_ints", (16, 24)),
    _Key("cohort.lesion_size_range", "ints", (150, 600)),
    _Key("cohort.lesion_count_range", "ints", (1, 3)),
    _Key("cohort.lesion_z_drift", "float", 0.0),
    _Key("cohort.texture_log_std", "float", 0.02),
    _Key("cohort.noise_sigma", "float", 0.01),
    _Key("bias.amplitude", "float", 0.1),
    _Key("bias.max_sequency", "int", 4),
    _Key("stage1.levels", "int", 3),
    _Key("stage1.widths", "ints", (16, 24, 32)),
    _Key("stage1.coeff_dropout", "float", 0.1),
    _Key("stage1.pad_target", "int", 64),
    _Key("stage1.lr", "float", 1e-3),
    _Key("stage1.epochs", "int", 30),
    _Key("stage1.batch", "int", 8),
    _Key("stage1.weight_decay", "float", 0.0),
    _Key("stage1.loss_mask_radius", "int", 0),
    _Key("stage1.lr_schedule", "str", "cosine", ("flat", "cosine")),
    _Key("stage1.lesion_weight", "float", 1.0),
    _Key("patch.size", "int", 11),
    _Key("patch.stride", "int", 2),
    _Key("patch.label_threshold", "float", 0.7),
    _Key("patch.dilate_radius", "int", 2),
    _Key("patch.max_per_patient", "opt_int", None),
    _Key("patch.p_hflip", "float", 0.5),
    _Key("patch.p_vflip", "float", 0.5),
    _Key("patch.p_rot90", "float", 0.5),
    _Key("patch.equalize", "pairs", ((0.10, 0.90), (0.15, 0.85), (0.20, 0.80))),
    _Key("stage2.blocks", "ints", (2, 2, 2, 2)),
    _Key("stage2.base_width", "int", 16),
    _Key("stage2.loss", "str", "focal", ("focal", "bce")),
    _Key("stage2.gamma", "float", 2.0),
    _Key("stage2.alpha", "float", 0.75),
    _Key("stage2.lr", "float", 1e-4),
    _Key("stage2.epochs", "int", 8),
    _Key("stage2.batch", "int", 32),
    _Key("stage2.weight_decay", "float", 0.0),
    _Key("eval.k", "int", 5),
    _Key("eval.rho", "float", 0.02),
    _Key("eval.p_threshold", "float", 0.5),
    _Key("eval.heatmap_threshold", "float", 0.5),
    _Key("eval.use_stage1", "bool", True),
    _Key("eval.two_d_only", "bool", False),
    _Key("eval.holdout_fraction", "float", 0.25),
    _Key("eval.heatmap_patient", "str", "P000"),
)

_BY_NAME = {k.name: k for k in DEFAULTS}


def _parse_value(key: _Key, text: str, where: str):
    def fail(expected):
        raise ConfigError(f"{where}: key '{key.name}' expects {expected}, got {text!r}")

    kind = key.kind
    if kind in ("opt_int", "opt_ints"):
        if text == "none":
            return None
        kind = kind[4:]
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            fail("an integer")
    elif kind == "float":
        try:
            return float(text)
        except ValueError:
            fail("a number")
    elif kind == "bool":
        if text == "true":
            return True
        if text == "false":
            return False
        fail("'true' or 'false'")
    elif kind == "str":
        if key.choices and text not in key.choices:
            fail("one of " + "/".join(key.choices))
        return text
    elif kind == "ints":
        try:
            items = tuple(int(p) for p in text.split(","))
        except ValueError:
            fail("comma-separated integers")
        if not items:
            fail("comma-separated integers")
        return items
    elif kind == "pairs":
        pairs = []
        for part in text.split(","):
            lo, sep, hi = part.partition(":")
            if not sep:
                fail("comma-separated lo:hi pairs")
            try:
                pair = (float(lo), float(hi))
            except ValueError:
                fail("comma-separated lo:hi pairs")
            if pair[0] >= pair[1]:
                raise ConfigError(
                    f"{where}: key '{key.name}' needs T_d < T_u in every pair, got {part.strip()!r}"
                )
            pairs.append(pair)
        return tuple(pairs)
    raise AssertionError(f"unhandled kind {key.kind}")


def _format_value(key: _Key, value) -> str:
    kind = key.kind
    if value is None:
        return "none"
    if kind in ("opt_int", "opt_ints"):
        kind = kind[4:]
    if kind == "int":
        return str(value)
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "str":
        return value
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "pairs":
        return ",".join(f"{repr(float(a))}:{repr(float(b))}" for a, b in value)
    raise AssertionError(f"unhandled kind {key.kind}")


def parse_assignment(line: str, where: str):
    """One ``key = value`` assignment -> (key name, typed value)."""
    text = line.split("#", 1)[0].strip()
    name, sep, value = text.partition("=")
    name = name.strip()
    value = value.strip()
    if not sep or not name or not value:
        raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
    key = _BY_NAME.get(name)
    if key is None:
        raise ConfigError(f"{where}: unknown key '{name}'")
    return name, _parse_value(key, value, where)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration; builders hand out the per-module
    config dataclasses with the global seed threaded through."""

    values: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key in DEFAULTS:
            self.values.setdefault(key.name, key.default)
        unknown = set(self.values) - set(_BY_NAME)
        if unknown:
            raise ConfigError(f"unknown key '{sorted(unknown)[0]}'")

    def __getitem__(self, name: str):
        return self.values[name]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> str:
        return self.values["out"]

    def resolved_text(self) -> str:
        lines = [f"{k.name} = {_format_value(k, self.values[k.name])}" for k in DEFAULTS]
        return "\n".join(lines) + "\n"

    def cohort_spec(self) -> CohortSpec:
        v = self.values
        return CohortSpec(
            n_patients=v["cohort.n_patients"],
            cancer_fraction=v["cohort.cancer_fraction"],
            dims=v["cohort.dims"],
            z_range=v["cohort.z_range"],
            lesion_size_range=v["cohort.lesion_size_range"],
            lesion_count_range=v["cohort.lesion_count_range"],
            lesion_z_drift=v["cohort.lesion_z_drift"],
            texture_log_std=v["cohort.texture_log_std"],
            bias=BiasSpec(
                amplitude=v["bias.amplitude"],
                max_sequency=v["bias.max_sequency"],
                seed=self.seed,
            ),
            noise=NoiseSpec(sigma=v["cohort.noise_sigma"], seed=self.seed),
            seed=self.seed,
        )

    def hunet_config(self) -> HUNetConfig:
        v = self.values
        return HUNetConfig(
            levels=v["stage1.levels"],
            widths=v["stage1.widths"],
            coeff_dropout_rate=v["stage1.coeff_dropout"],
            pad_target=v["stage1.pad_target"],
        )

    def stage1_hyper(self) -> Stage1Hyper:
        v = self.values
        return Stage1Hyper(
            lr=v["stage1.lr"],
            epochs=v["stage1.epochs"],
            batch=v["stage1.batch"],
            weight_decay=v["stage1.weight_decay"],
            loss_mask_radius=v["stage1.loss_mask_radius"],
            lr_schedule=v["stage1.lr_schedule"],
            lesion_weight=v["stage1.lesion_weight"],
            seed=self.seed,
        )

    def patch_config(self) -> PatchConfig:
        v = self.values
        return PatchConfig(
            patch_size=v["patch.size"],
            stride=v["patch.stride"],
            label_threshold=v["patch.label_threshold"],
            dilate_radius=v["patch.dilate_radius"],
            augment=AugmentConfig(
                p_hflip=v["patch.p_hflip"],
                p_vflip=v["patch.p_vflip"],
                p_rot90=v["patch.p_rot90"],
                presets=v["patch.equalize"],
            ),
            max_per_patient=v["patch.max_per_patient"],
            seed=self.seed,
        )

    def resnet_config(self) -> ResNetConfig:
        v = self.values
        return ResNetConfig(blocks=v["stage2.blocks"], base_width=v["stage2.base_width"])

    def stage2_hyper(self) -> Stage2Hyper:
        v = self.values
        return Stage2Hyper(
            lr=v["stage2.lr"],
            loss=LossConfig(
                kind=v["stage2.loss"], gamma=v["stage2.gamma"], alpha=v["stage2.alpha"]
            ),
            epochs=v["stage2.epochs"],
            batch=v["stage2.batch"],
            weight_decay=v["stage2.weight_decay"],
            seed=self.seed,
        )

    def cv_config(self) -> CVConfig:
        v = self.values
        return CVConfig(
            k=v["eval.k"],
            seed=self.seed,
            rho=v["eval.rho"],
            p_threshold=v["eval.p_threshold"],
            heatmap_threshold=v["eval.heatmap_threshold"],
            use_stage1=v["eval.use_stage1"],
            two_d_only=v["eval.two_d_only"],
            hunet=self.hunet_config(),
            stage1=self.stage1_hyper(),
            patch=self.patch_config(),
            resnet=self.resnet_config(),
            stage2=self.stage2_hyper(),
        )

    def validate(self) -> "RunConfig":
        """Instantiate every module config so cross-field rules fire now,
        attributing failures to their namespace."""
        for ns, build in (
            ("cohort", self.cohort_spec),
            ("stage1", self.stage1_hyper),
            ("stage1", self.hunet_config),
            ("patch", self.patch_config),
            ("stage2", self.stage2_hyper),
            ("stage2", self.resnet_config),
            ("eval", self.cv_config),
        ):
            try:
                build()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{ns}.*: {exc}") from exc
        frac = self.values["eval.holdout_fraction"]
        if not 0.0 < frac < 1.0:
            raise ConfigError(
                f"key 'eval.holdout_fraction' must lie strictly in (0, 1), got {frac}"
            )
        return self


def parse_config(path=None, sets=()) -> RunConfig:
    """Resolve defaults, then a key=value file, then override assignments.

    `sets` holds raw "key=value" strings (e.g. from repeated --set flags).
    Raises ConfigError naming the key and source location on any problem.
    """
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                stripped = raw.split("#", 1)[0].strip()
                if not stripped:
                    continue
                name, value = parse_assignment(raw, f"line {lineno}")
                values[name] = value
    for raw in sets:
        name, value = parse_assignment(raw, f"--set {raw}")
        values[name] = value
    return RunConfig(values).validate()
