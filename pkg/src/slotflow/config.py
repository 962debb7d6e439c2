"""Flat key = value config files (sections per module) <-> TrainConfig."""

import configparser
import dataclasses

from .training import TrainConfig

SECTIONS = {
    "training": ["steps", "batch_size", "learning_rate", "pretrain_steps",
                 "pretrain_lr", "seed", "ablation", "precision", "grad_clip",
                 "dropout_p", "gate_schedule"],
    "data": ["n_identities", "clips_per_identity", "frames", "height", "width",
             "latent_channels", "latent_target_std"],
    "model": ["dim", "n_slots", "n_refine", "stsa_layers", "heads", "n_blocks",
              "anchor_tokens", "lora_rank", "lora_alpha", "adapt_output"],
    "sinkhorn": ["tau_start", "tau_end", "decay_steps", "sinkhorn_iters", "sinkhorn_eps"],
}

_FIELD_TYPES = {
    f.name: f.type if isinstance(f.type, str) else f.type.__name__
    for f in dataclasses.fields(TrainConfig)
}


def save_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, names in SECTIONS.items():
        parser[section] = {name: str(getattr(cfg, name)) for name in names}
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path, **overrides) -> TrainConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    values = {}
    for section, names in SECTIONS.items():
        if section not in parser:
            continue
        for name in names:
            if name not in parser[section]:
                continue
            kind = _FIELD_TYPES[name]
            if kind == "bool":
                values[name] = parser[section].getboolean(name)
            elif kind == "int":
                values[name] = parser[section].getint(name)
            elif kind == "float":
                values[name] = parser[section].getfloat(name)
            else:
                values[name] = parser[section][name]
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def default_config_text() -> str:
    """Default config with every key present, for `--config` templates."""
    import io

    parser = configparser.ConfigParser()
    cfg = TrainConfig()
    for section, names in SECTIONS.items():
        parser[section] = {name: str(getattr(cfg, name)) for name in names}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
