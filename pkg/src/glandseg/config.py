"""Flat key=value run configuration.

One registry holds every tunable key with its type, default, and help
line. Config files are plain `key = value` lines ('#' comments allowed);
command-line --set overrides win over the file, which wins over defaults.
Unknown keys are rejected, and the canonical text rendering doubles as the
config snapshot written next to artifacts and hashed into the report
fingerprint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .msg import MsgConfig
from .spm import SpmConfig
from .synthgen import SynthConfig


class ConfigError(Exception):
    """Unknown key, unparsable value, or inconsistent configuration."""


@dataclass(frozen=True)
class _Key:
    name: str
    type: type
    default: object
    help: str


def _k(name, default, help_text):
    return _Key(name, type(default), default, help_text)


_KEYS = [
    _k("gray.invert", True, "invert luminance so darker pixels score higher gray levels"),
    _k("synth.height", 128, "generated image height"),
    _k("synth.width", 128, "generated image width"),
    _k("synth.count", 20, "items generated by the synth command"),
    _k("synth.min_glands", 1, "fewest glands per image"),
    _k("synth.max_glands", 4, "most glands per image"),
    _k("synth.min_radius", 12.0, "smallest gland semi-axis, px"),
    _k("synth.max_radius", 36.0, "largest gland semi-axis, px"),
    _k("synth.min_border", 2.0, "thinnest border ring, px"),
    _k("synth.max_border", 5.0, "thickest border ring, px"),
    _k("synth.border_low", 0.15, "darkest border intensity"),
    _k("synth.border_high", 0.35, "lightest border intensity"),
    _k("synth.interior_low", 0.45, "darkest interior intensity"),
    _k("synth.interior_high", 0.85, "lightest interior intensity"),
    _k("synth.background_low", 0.75, "darkest background intensity"),
    _k("synth.background_high", 0.95, "lightest background intensity"),
    _k("synth.hue_jitter", 0.06, "per-gland channel offset amplitude"),
    _k("synth.interior_ramp", 0.08, "within-gland intensity ramp amplitude"),
    _k("synth.interior_texture", 0.02, "interior texture noise sigma"),
    _k("synth.border_texture", 0.015, "border texture noise sigma"),
    _k("synth.background_speckle", 0.04, "background speckle noise sigma"),
    _k("synth.noise_sigma", 0.03, "global additive noise sigma"),
    _k("synth.margin", 4.0, "frame margin and inter-gland gap, px"),
    _k("synth.seed", 0, "base seed; item i uses seed+i"),
    _k("spm.feature_dim", 32, "encoder feature channels"),
    _k("spm.iterations", 50, "per-image self-supervised training iterations"),
    _k("spm.lr0", 0.01, "mining initial learning rate"),
    _k("spm.power", 0.9, "mining lr polynomial decay exponent"),
    _k("spm.sc_shift", 2, "largest continuity-loss shift"),
    _k("spm.sc_weight", 1.0, "continuity-loss weight"),
    _k("spm.kmeans_k", 5, "candidate region count"),
    _k("spm.kmeans_restarts", 5, "K-means restarts, best WCSS wins"),
    _k("spm.kmeans_max_iters", 100, "Lloyd iteration cap"),
    _k("spm.seed", 0, "encoder init seed; image i uses seed+i"),
    _k("spm.kmeans_seed", 0, "K-means seed; image i uses seed+i"),
    _k("spm.precision", "fast", "mining arithmetic: fast (f32) or check (f64)"),
    _k("msg.beta", 0.7, "similarity threshold for background relabeling"),
    _k("msg.lambda_v", 1.0, "variation-loss weight"),
    _k("msg.epochs", 20, "segmentation training epochs"),
    _k("msg.lr0", 0.005, "segmentation initial learning rate"),
    _k("msg.power", 0.9, "segmentation lr polynomial decay exponent"),
    _k("msg.batch", 16, "segmentation batch size"),
    _k("msg.patch", 128, "training/prediction patch extent"),
    _k("msg.stride", 128, "patch slicing stride"),
    _k("msg.refine_every", 1, "epochs between proposal refinements"),
    _k("msg.embed_dim", 64, "pixel embedding dimension"),
    _k("msg.seed", 0, "segmentation init/shuffle seed"),
    _k("msg.precision", "fast", "segmentation arithmetic: fast (f32) or check (f64)"),
    _k("msg.symmetric_anchor", False, "let the variation loss also move border embeddings"),
    _k("eval.iou_threshold", 0.5, "object-match IoU threshold"),
    _k("pipeline.train_count", 20, "synthetic training images for the pipeline"),
    _k("pipeline.eval_count", 10, "held-out synthetic images for the pipeline"),
    _k("pipeline.jobs", 1, "worker processes for per-image mining"),
]

REGISTRY: dict[str, _Key] = {k.name: k for k in _KEYS}


def _parse_value(key: _Key, text: str):
    text = text.strip()
    if key.type is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key.name}: expected a boolean, got {text!r}")
    try:
        if key.type is int:
            return int(text)
        if key.type is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"key {key.name}: expected {key.type.__name__}, "
                          f"got {text!r}") from None
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration: every registry key bound to a value."""

    values: tuple[tuple[str, object], ...]

    def __getitem__(self, key: str):
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def flat_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.values)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.flat_text().encode()).hexdigest()

    def with_overrides(self, **flat: object) -> "RunConfig":
        unknown = set(flat) - {k for k, _ in self.values}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(tuple((k, flat.get(k, v)) for k, v in self.values))

    def spm_config(self) -> SpmConfig:
        try:
            return SpmConfig(
                feature_dim=self["spm.feature_dim"],
                iterations=self["spm.iterations"],
                lr0=self["spm.lr0"],
                power=self["spm.power"],
                sc_shift=self["spm.sc_shift"],
                sc_weight=self["spm.sc_weight"],
                kmeans_k=self["spm.kmeans_k"],
                kmeans_restarts=self["spm.kmeans_restarts"],
                kmeans_max_iters=self["spm.kmeans_max_iters"],
                seed=self["spm.seed"],
                kmeans_seed=self["spm.kmeans_seed"],
                precision=self["spm.precision"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def msg_config(self) -> MsgConfig:
        try:
            return MsgConfig(
                beta=self["msg.beta"],
                lambda_v=self["msg.lambda_v"],
                epochs=self["msg.epochs"],
                lr0=self["msg.lr0"],
                power=self["msg.power"],
                batch=self["msg.batch"],
                patch=self["msg.patch"],
                stride=self["msg.stride"],
                refine_every=self["msg.refine_every"],
                embed_dim=self["msg.embed_dim"],
                seed=self["msg.seed"],
                precision=self["msg.precision"],
                symmetric_anchor=self["msg.symmetric_anchor"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(
                height=self["synth.height"],
                width=self["synth.width"],
                min_glands=self["synth.min_glands"],
                max_glands=self["synth.max_glands"],
                min_radius=self["synth.min_radius"],
                max_radius=self["synth.max_radius"],
                min_border=self["synth.min_border"],
                max_border=self["synth.max_border"],
                border_low=self["synth.border_low"],
                border_high=self["synth.border_high"],
                interior_low=self["synth.interior_low"],
                interior_high=self["synth.interior_high"],
                background_low=self["synth.background_low"],
                background_high=self["synth.background_high"],
                hue_jitter=self["synth.hue_jitter"],
                interior_ramp=self["synth.interior_ramp"],
                interior_texture=self["synth.interior_texture"],
                border_texture=self["synth.border_texture"],
                background_speckle=self["synth.background_speckle"],
                noise_sigma=self["synth.noise_sigma"],
                margin=self["synth.margin"],
                seed=self["synth.seed"])
        except ValueError as e:
            raise ConfigError(str(e)) from e


def default_config() -> RunConfig:
    return RunConfig(tuple((k.name, k.default) for k in _KEYS))


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse key = value lines into typed overrides."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        name, value = line.split("=", 1)
        name = name.strip()
        if name not in REGISTRY:
            raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
        out[name] = _parse_value(REGISTRY[name], value)
    return out


def parse_config_file(path: str) -> dict[str, object]:
    with open(path) as fh:
        return parse_config_text(fh.read(), source=path)


def parse_set_args(sets: list[str]) -> dict[str, object]:
    """Parse --set key=value overrides."""
    out: dict[str, object] = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        name, value = item.split("=", 1)
        name = name.strip()
        if name not in REGISTRY:
            raise ConfigError(f"--set: unknown config key {name!r}")
        out[name] = _parse_value(REGISTRY[name], value)
    return out


def make_config(config_path: str | None, sets: list[str]) -> RunConfig:
    """Defaults, then the config file, then --set overrides."""
    cfg = default_config()
    if config_path is not None:
        cfg = cfg.with_overrides(**parse_config_file(config_path))
    if sets:
        cfg = cfg.with_overrides(**parse_set_args(sets))
    return cfg


def config_help_text() -> str:
    lines = ["configuration keys (key = default):"]
    lines += [f"  {k.name} = {_format_value(k.default)}\n      {k.help}"
              for k in _KEYS]
    return "\n".join(lines)
