"""Run configuration: key=value sections in a plain text file, strict keys,
flag overrides. Every run writes back its fully resolved configuration."""

from __future__ import annotations

import configparser
import copy

DEFAULTS = {
    "data": {
        "engines": 50,
        "cycles": 12,
        "channels": 32,
        "length": 600,
        "noise_scale": 0.1,
        "understanding": 500,
        "perception": 500,
        "reasoning": 500,
        "decision": 500,
        "train_fraction": 0.8,
    },
    "model": {
        "d": 64,
        "heads": 8,
        "layers": 2,
        "lit_length": 25,
        "encoder_layers": 4,
        "encoder_heads": 8,
        "lm_blocks": 2,
        "lm_heads": 4,
        "lm_ffn_mult": 4,
        "patch_len": 60,
        "stride": 60,
        "vocab_pad": 0,
    },
    "train": {
        "epochs": 2,
        "batch_size": 2,
        "learning_rate": 2e-3,
        "grad_clip": 1.0,
    },
    "eval": {
        "max_answer_len": 40,
        "limit": 0,
    },
    "bench": {
        "v_grid": "4,8,16,32,64",
        "l_grid": "10,25,50,100,200",
        "lq_grid": "16,64,256,1024",
        "reps": 30,
        "warmup": 5,
    },
}


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, values, seed=None):
        self.values = values
        self.seed = seed

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, raw):
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        self.values[section][key] = _coerce(raw, DEFAULTS[section][key], section, key)

    def int_list(self, section, key):
        try:
            return [int(x) for x in str(self.get(section, key)).split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: expected comma-separated integers") from exc

    def dump(self):
        lines = []
        if self.seed is not None:
            lines += ["[run]", f"seed = {self.seed}", ""]
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump())


def _coerce(raw, default, section, key):
    kind = type(default)
    try:
        if kind is bool:
            return str(raw).lower() in ("1", "true", "yes")
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}"
        ) from exc


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the file, then key=value overrides; unknown keys error."""
    values = copy.deepcopy(DEFAULTS)
    cfg = RunConfig(values, seed=seed)
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            if section == "run":
                if parser.has_option("run", "seed") and seed is None:
                    cfg.seed = int(parser.get("run", "seed"))
                    if set(parser.options("run")) - {"seed"}:
                        raise ConfigError("[run] accepts only the seed key")
                continue
            if section not in DEFAULTS:
                raise ConfigError(f"unknown configuration section [{section}]")
            for key in parser.options(section):
                cfg.set(section, key, parser.get(section, key))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        cfg.set(section.strip(), key.strip(), value.strip())
    return cfg


def model_config_from(cfg: RunConfig):
    from .model import ModelConfig

    m = cfg["model"]
    d = cfg["data"]
    return ModelConfig(
        d=m["d"],
        heads=m["heads"],
        layers=m["layers"],
        lit_length=m["lit_length"],
        encoder_layers=m["encoder_layers"],
        encoder_heads=m["encoder_heads"],
        lm_blocks=m["lm_blocks"],
        lm_heads=m["lm_heads"],
        lm_ffn_mult=m["lm_ffn_mult"],
        patch_len=m["patch_len"],
        stride=m["stride"],
        channels=d["channels"],
        segment_length=d["length"],
    )
