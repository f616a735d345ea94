"""Flat ``section.key = value`` experiment configs.

Values are JSON literals (numbers, ``true``/``false``, ``null``, quoted
strings, lists); anything that does not parse as JSON is kept as a bare
string. Lines starting with ``#`` are comments. Files are written with sorted
keys so two configs diff cleanly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .data import LabeledDataset, load_cifar10_binary, subset_classes, subset_size, synth_dataset
from .models import ModelSpec, tiny_conv, tiny_mlp
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "model.arch": "mlp",
    "model.activation": "tanh",
    "model.hidden": [64, 64],
    "model.channels": [8, 16],
    "model.kernel": 5,
    "model.seed": 0,
    "model.tanh_gain": 5.0 / 3.0,
    "data.source": "synthetic",
    "data.n_D": 256,
    "data.n_c": 2,
    "data.dim": 20,
    "data.separation": 3.0,
    "data.seed": 0,
    "data.offset": 0.0,
    "data.paths": [],
    "data.standardize": False,
    "data.image_shape": None,
    "data.classes": None,
    "data.subset_n_D": None,
    "data.subset_seed": 0,
    "train.eta": 0.01,
    "train.max_iters": None,
    "train.stop_loss": 0.1,
    "train.telemetry_every": None,
    "train.snapshot_every": 100,
    "train.k": 20,
    "train.k_top": None,
    "train.seed": 0,
    "train.mode": "fixed_lr",
    "train.eta_max": 0.001,
    "train.flow_safety": 0.5,
    "train.max_time": None,
    "train.eig_tol": 1e-6,
    "train.eig_max_iters": 1000,
    "train.flow_eig_tol": 1e-4,
    "train.flow_eig_max_iters": 200,
    "train.attribution": True,
    "output.snapshots_to_disk": False,
    # experiment grids (read by the CLI; ignored when building a single run)
    "sweep.etas": [0.01, 0.003, 0.001],
    "sweep.activations": ["relu", "tanh"],
    "sweep.archs": ["mlp"],
    "classes.n_cs": [2, 3, 5],
    "classes.include_full": True,
    "entry.every": 10,
    "entry.iters": 2000,
    "flow.n_Ds": [32, 128, 512],
    "cusp.n_delta": 121,
    "cusp.half_width": 0.003,
    "cusp.run_dir": None,
    "table.gate": 0.7,
}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def resolve(*layers: dict) -> dict:
    """Defaults, then each layer in order; later layers win. Unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    return cfg


def dumps(cfg: dict) -> str:
    lines = [f"# eosprobe {__version__} resolved config"]
    lines += [f"{key} = {json.dumps(cfg[key])}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    body = "\n".join(f"{k}={json.dumps(cfg[k])}" for k in sorted(cfg))
    return hashlib.sha256(body.encode()).hexdigest()[:16]


def section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def build_dataset(cfg: dict) -> LabeledDataset:
    d = section(cfg, "data")
    if d["source"] == "synthetic":
        data = synth_dataset(int(d["n_D"]), int(d["n_c"]), int(d["dim"]),
                             float(d["separation"]), int(d["seed"]), float(d["offset"]))
    elif d["source"] == "cifar10":
        if not d["paths"]:
            raise ConfigError("data.paths must list CIFAR-10 binary batch files")
        data = load_cifar10_binary(d["paths"], bool(d["standardize"]))
    else:
        raise ConfigError(f"unknown data.source {d['source']!r}")
    if d["classes"] is not None:
        data = subset_classes(data, d["classes"])
    if d["subset_n_D"] is not None:
        data = subset_size(data, int(d["subset_n_D"]), int(d["subset_seed"]))
    return data


def build_model(cfg: dict, data: LabeledDataset) -> ModelSpec:
    m = section(cfg, "model")
    n_in = int(data.inputs[0].size)
    if m["arch"] == "mlp":
        return tiny_mlp(n_in, data.n_c, tuple(m["hidden"]), m["activation"],
                        int(m["seed"]), float(m["tanh_gain"]))
    if m["arch"] == "conv":
        shape = cfg["data.image_shape"]
        if shape is None:
            shape = (3, 32, 32) if cfg["data.source"] == "cifar10" else None
        if shape is None or int(shape[0] * shape[1] * shape[2]) != n_in:
            raise ConfigError("conv arch needs data.image_shape matching the input size")
        hidden = m["hidden"][0] if isinstance(m["hidden"], list) else int(m["hidden"])
        return tiny_conv(tuple(shape), data.n_c, tuple(m["channels"]), int(m["kernel"]),
                         hidden, m["activation"], int(m["seed"]), float(m["tanh_gain"]))
    raise ConfigError(f"unknown model.arch {m['arch']!r}")


def build_train(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**section(cfg, "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train settings: {exc}") from None


def build(cfg: dict) -> tuple[ModelSpec, LabeledDataset, TrainConfig]:
    data = build_dataset(cfg)
    return build_model(cfg, data), data, build_train(cfg)
