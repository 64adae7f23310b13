"""Flat dotted-key configuration shared by every CLI subcommand.

Files hold ``section.key = value`` lines with '#' comments; command-line
``--set key=value`` overrides file values. Every key must be registered
here: unknown keys and invalid values are collected and reported together
as one ConfigError, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

from .data import SynthConfig
from .errors import ConfigError
from .extractor import ExtractorConfig
from .flows import FlowConfig
from .training import TrainConfig


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{s}'")


def _parse_int_or_none(s):
    return None if s.strip().lower() == "none" else int(s)


def _parse_range(s):
    lo, hi = s.split(":")
    return (float(lo), float(hi))


def _parse_int_range(s):
    lo, hi = s.split(":")
    return (int(lo), int(hi))


def _parse_ints(s):
    return tuple(int(v) for v in s.split(","))


def _parse_rgb(s):
    vals = tuple(float(v) for v in s.split(","))
    if len(vals) != 3:
        raise ValueError("need three comma-separated values")
    return vals


def _parse_splits(s):
    out = []
    for part in s.split(","):
        tag, split, count = part.strip().split(":")
        out.append((tag, split, int(count)))
    return tuple(out)


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {options}, got '{s}'")
        return s

    return parse


# key -> (parser, default-as-string)
REGISTRY = {
    "flow.kind": (_choice("maf", "bnaf"), "maf"),
    "flow.n_flows": (int, None),          # default depends on flow.kind
    "flow.hidden_width": (int, None),     # default depends on flow.kind
    "flow.use_batchnorm": (_parse_bool, None),
    "flow.ordering": (_choice("natural", "reversed-per-flow"),
                      "reversed-per-flow"),

    "train.crop_size": (int, "46"),
    "train.batch_size": (int, "256"),
    "train.learning_rate": (float, "1e-3"),
    "train.max_epochs": (int, "200"),
    "train.patience": (int, "20"),
    "train.seed": (int, "0"),
    "train.val_fraction": (float, "0.1"),
    "train.svd_components": (_parse_int_or_none, "100"),
    "train.batches_per_epoch": (int, "200"),
    "train.val_crops": (int, "2048"),
    "train.dequantize": (_parse_bool, "true"),
    "train.whiten": (_parse_bool, "true"),
    "train.fit_sample_cap": (int, "20000"),

    "synth.seed": (int, "0"),
    "synth.splits": (_parse_splits, "y2017:train:48,y2015:test:16"),
    "synth.height": (int, "460"),
    "synth.width": (int, "640"),
    "synth.kernel_count": (_parse_int_range, "480:600"),
    "synth.kernel_radius": (_parse_range, "14:26"),
    "synth.kernel_aspect": (_parse_range, "0.5:0.8"),
    "synth.kernel_color": (_parse_rgb, "222,168,62"),
    "synth.contamination": (float, "0.15"),
    "synth.hue_shift_fraction": (float, "0.0"),
    "synth.leaf_rate": (float, "0.9"),
    "synth.stick_rate": (float, "0.7"),
    "synth.fragment_rate": (float, "1.1"),
    "synth.chaff_rate": (float, "0.9"),
    "synth.format": (_choice("ppm", "png"), "ppm"),

    "heatmap.window": (_parse_int_or_none, "none"),
    "heatmap.stride": (int, "8"),
    "heatmap.bin_width": (float, "10"),
    "heatmap.alpha": (float, "0.45"),
    "heatmap.split": (_choice("train", "val", "test", "all"), "all"),

    "extractor.crop_size": (int, "44"),
    "extractor.stage_widths": (_parse_ints, "16,32,64"),
    "extractor.blocks_per_stage": (int, "2"),
    "extractor.pre_linear_units": (int, "3"),
    "extractor.learning_rate": (float, "1e-3"),
    "extractor.batch_size": (int, "64"),
    "extractor.max_steps": (int, "3000"),
    "extractor.eval_interval": (int, "100"),
    "extractor.patience": (int, "8"),
    "extractor.seed": (int, "0"),
    "extractor.train_pool": (int, "8192"),
    "extractor.val_pool": (int, "1024"),
    "extractor.val_fraction": (float, "0.1"),

    "embed.count": (int, "512"),
    "embed.seed": (int, "0"),
    "embed.split": (_choice("train", "val", "test", "all"), "test"),
}


def parse_config_text(text, origin="<config>"):
    """Raw key/value strings from a flat config file."""
    out = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"{origin}:{lineno}: missing '='")
            continue
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    if errors:
        raise ConfigError("; ".join(errors))
    return out


def resolve(raw):
    """Validate raw key/value strings against the registry; returns a dict
    of typed values for every registered key. All violations are reported
    at once."""
    errors = []
    for key in sorted(raw):
        if key not in REGISTRY:
            errors.append(f"unknown config key '{key}'")
    values = {}
    merged = {key: spec[1] for key, spec in REGISTRY.items()}
    merged.update({k: v for k, v in raw.items() if k in REGISTRY})
    # kind-dependent flow defaults
    kind = merged.get("flow.kind") or "maf"
    if merged["flow.n_flows"] is None:
        merged["flow.n_flows"] = "5" if kind == "maf" else "6"
    if merged["flow.hidden_width"] is None:
        merged["flow.hidden_width"] = "100" if kind == "maf" else "12"
    if merged["flow.use_batchnorm"] is None:
        merged["flow.use_batchnorm"] = "true" if kind == "maf" else "false"
    for key, value in merged.items():
        parser = REGISTRY[key][0]
        try:
            values[key] = parser(value)
        except Exception as exc:
            errors.append(f"invalid value for '{key}': {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    return values


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw.update(parse_config_text(fh.read(), origin=str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append(f"override '{item}' is not key=value")
            continue
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    if errors:
        raise ConfigError("; ".join(errors))
    return resolve(raw), raw


def flow_config(values):
    kind = values["flow.kind"]
    return FlowConfig(
        kind=kind,
        input_dim=2,  # set by the trainer from the crop pipeline
        n_flows=values["flow.n_flows"],
        hidden_width=values["flow.hidden_width"],
        activation="relu" if kind == "maf" else "tanh",
        use_batchnorm=values["flow.use_batchnorm"],
        ordering=values["flow.ordering"],
    )


def train_config(values):
    return TrainConfig(
        crop_size=values["train.crop_size"],
        batch_size=values["train.batch_size"],
        learning_rate=values["train.learning_rate"],
        max_epochs=values["train.max_epochs"],
        patience=values["train.patience"],
        seed=values["train.seed"],
        val_fraction=values["train.val_fraction"],
        svd_components=values["train.svd_components"],
        batches_per_epoch=values["train.batches_per_epoch"],
        val_crops=values["train.val_crops"],
        dequantize=values["train.dequantize"],
        whiten=values["train.whiten"],
        fit_sample_cap=values["train.fit_sample_cap"],
    )


def synth_config(values):
    return SynthConfig(
        seed=values["synth.seed"],
        splits=values["synth.splits"],
        height=values["synth.height"],
        width=values["synth.width"],
        kernel_count=values["synth.kernel_count"],
        kernel_radius=values["synth.kernel_radius"],
        kernel_aspect=values["synth.kernel_aspect"],
        kernel_color=values["synth.kernel_color"],
        hue_shift_fraction=values["synth.hue_shift_fraction"],
        contamination=values["synth.contamination"],
        leaf_rate=values["synth.leaf_rate"],
        stick_rate=values["synth.stick_rate"],
        fragment_rate=values["synth.fragment_rate"],
        chaff_rate=values["synth.chaff_rate"],
        image_format=values["synth.format"],
    )


def extractor_config(values):
    return ExtractorConfig(
        crop_size=values["extractor.crop_size"],
        stage_widths=values["extractor.stage_widths"],
        blocks_per_stage=values["extractor.blocks_per_stage"],
        pre_linear_units=values["extractor.pre_linear_units"],
        learning_rate=values["extractor.learning_rate"],
        batch_size=values["extractor.batch_size"],
        max_steps=values["extractor.max_steps"],
        eval_interval=values["extractor.eval_interval"],
        patience=values["extractor.patience"],
        seed=values["extractor.seed"],
        train_pool=values["extractor.train_pool"],
        val_pool=values["extractor.val_pool"],
        val_fraction=values["extractor.val_fraction"],
    )
