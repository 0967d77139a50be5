"""Pipeline configuration: packaged defaults overlaid with a user TOML file."""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli

from .dynamics import DiscreteModel, FurutaParams
from .mpc import build_mpc_config
from .nn import MlpArchitecture

SECTIONS = ("physics", "mpc", "generation", "architecture", "training",
            "validation", "certification", "simulation")


def default_config() -> dict:
    text = resources.files("deepempc").joinpath("default.toml").read_text()
    return tomli.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "state_bounds":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None) -> dict:
    """Defaults, overridden section by section by the TOML file at ``path``.

    The physics section is replaced wholesale when given, so a user file
    cannot silently mix two parameter sets.
    """
    cfg = default_config()
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        user = tomli.load(fh)
    unknown = set(user) - set(SECTIONS)
    if unknown:
        raise KeyError(f"unknown config sections: {', '.join(sorted(unknown))}")
    if "physics" in user:
        cfg["physics"] = user.pop("physics")
    return _merge(cfg, user)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_model(cfg: dict) -> DiscreteModel:
    return DiscreteModel(FurutaParams.from_dict(cfg["physics"]), float(cfg["mpc"]["dt"]))


def build_mpc(cfg: dict, model=None):
    model = model or build_model(cfg)
    return build_mpc_config(model, cfg["mpc"])


def build_architecture(cfg: dict) -> MlpArchitecture:
    a = cfg["architecture"]
    scale = a.get("input_scale")
    return MlpArchitecture(hidden_layers=int(a["hidden_layers"]), hidden_width=int(a["hidden_width"]),
                           activation=a.get("activation", "tanh"),
                           input_scale=None if scale is None else tuple(scale))
