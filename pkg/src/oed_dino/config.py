"""Flat ``section.key = value`` run configuration with strict validation."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "OED_DINO_SEED"


def _int_list(s):
    return tuple(int(x) for x in str(s).replace(" ", "").split(",") if x != "")


def _opt_int(s):
    return None if str(s).strip().lower() in ("", "none") else int(s)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "problem.kind": (str, "linear_diffusion"),
    "mesh.n": (int, 16),
    "prior.gamma": (float, 0.1),
    "prior.kappa": (float, 0.5),
    "prior.alpha": (int, 2),
    "sensors.layout": (str, "lower"),
    "sensors.d_s": (int, 50),
    "noise.sigma": (float, 0.1),
    "noise.cov_file": (str, ""),
    "reduce.input_kind": (str, "DIS"),
    "reduce.r_m": (int, 32),
    "reduce.output_kind": (str, "PCA"),
    "reduce.r_f": (int, 25),
    "reduce.n_saa_basis": (int, 128),
    "train.n_train": (int, 1024),
    "train.epochs": (_opt_int, None),
    "train.lr": (float, 1e-3),
    "train.lambda_jac": (float, 1.0),
    "train.batch": (int, 32),
    "train.seeds": (_int_list, (0,)),
    "train.width": (int, 100),
    "train.n_resnet": (int, 3),
    "oed.criterion": (str, "DOpt"),
    "oed.backend": (str, "surrogate"),
    "oed.n_saa": (int, 128),
    "oed.r_s": (int, 5),
    "oed.k_max": (int, 3),
    "oed.eps_min": (float, 0.01),
    "oed.design": (_int_list, ()),
    "oed.a_opt": (str, "simplified"),
    "oed.warmstart": (str, ""),
}

CHOICES = {
    "problem.kind": ("linear_diffusion", "semilinear_reaction"),
    "sensors.layout": ("lower", "full"),
    "reduce.input_kind": ("DIS", "KLE"),
    "reduce.output_kind": ("PCA", "DOS"),
    "oed.criterion": ("AOpt", "DOpt", "EIG"),
    "oed.backend": ("hifi", "surrogate"),
    "oed.a_opt": ("simplified", "weighted"),
}

POSITIVE = (
    "mesh.n", "prior.gamma", "prior.kappa", "sensors.d_s", "noise.sigma", "reduce.r_m", "reduce.r_f",
    "reduce.n_saa_basis", "train.n_train", "train.lr", "train.batch", "train.width", "oed.n_saa",
)


@dataclass
class RunConfig:
    values: dict
    source: str = ""
    explicit: set = field(default_factory=set)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def digest(self, prefixes=("",)) -> str:
        """Stable hash of the configuration keys starting with any of ``prefixes``."""
        keys = sorted(k for k in self.values if any(k.startswith(p) for p in prefixes))
        text = "\n".join(f"{k}={self.values[k]!r}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def epochs(self) -> int:
        if self.values["train.epochs"] is not None:
            return self.values["train.epochs"]
        from .surrogate import DEFAULT_EPOCHS

        return DEFAULT_EPOCHS[(self.values["problem.kind"], self.values["train.lambda_jac"] != 0)]


def parse_config(text: str, source: str = "<string>", env=None) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    explicit = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}' ({source}:{lineno})")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {value!r} ({exc})") from exc
        explicit.add(key)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg = RunConfig(values, source, explicit)
    validate(cfg)
    return cfg


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, str(path), env)
    cov = cfg["noise.cov_file"]
    if cov:
        cov_path = (path.parent / cov) if not Path(cov).is_absolute() else Path(cov)
        if not cov_path.exists():
            raise ConfigError(f"noise.cov_file {cov_path} does not exist")
        cfg.values["noise.cov_file"] = str(cov_path)
    return cfg


def validate(cfg: RunConfig):
    v = cfg.values
    for key, options in CHOICES.items():
        if v[key] not in options:
            raise ConfigError(f"'{key}' must be one of {options}, got {v[key]!r}")
    for key in POSITIVE:
        if not v[key] > 0:
            raise ConfigError(f"'{key}' must be positive, got {v[key]}")
    if v["prior.alpha"] != 2:
        raise ConfigError("'prior.alpha' must be 2")
    if v["mesh.n"] < 2:
        raise ConfigError("'mesh.n' must be at least 2")
    if not 0 < v["oed.r_s"] <= v["sensors.d_s"]:
        raise ConfigError(f"'oed.r_s' must satisfy 0 < r_s <= d_s = {v['sensors.d_s']}")
    if v["oed.k_max"] < 0 or v["oed.eps_min"] < 0:
        raise ConfigError("'oed.k_max' and 'oed.eps_min' must be nonnegative")
    if v["train.epochs"] is not None and v["train.epochs"] < 0:
        raise ConfigError("'train.epochs' must be nonnegative")
    if v["reduce.r_f"] > v["sensors.d_s"]:
        raise ConfigError("'reduce.r_f' cannot exceed 'sensors.d_s'")
    if v["reduce.r_m"] > (v["mesh.n"] + 1) ** 2:
        raise ConfigError("'reduce.r_m' cannot exceed the number of mesh nodes")
    if not v["train.seeds"]:
        raise ConfigError("'train.seeds' needs at least one seed")
    if any(s < 0 or s >= v["sensors.d_s"] for s in v["oed.design"]) or len(set(v["oed.design"])) != len(v["oed.design"]):
        raise ConfigError("'oed.design' must list distinct sensor indices in [0, d_s)")
    if v["oed.warmstart"]:
        parts = v["oed.warmstart"].split(":")
        if len(parts) != 3 or parts[0] != "adam":
            raise ConfigError("'oed.warmstart' must look like adam:ITERS:LR")
