"""Sectioned run configuration: INI on disk, strict keys, stable hash.

Unknown sections or keys are rejected so a typo cannot silently fall back to
a default; every stage logs the fully resolved document and stamps its
artifacts with the config hash and seed.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from pathlib import Path

from .autoencoder import AEConfig
from .policy import PPOConfig
from .reward import RewardConfig
from .sim import TaskParams

DEFAULTS = {
    "run": {
        "seed": 0,
        "workdir": "runs/desk",
    },
    "task": {
        "n_points": 2,
        "sphere_radius": 0.01,
        "reach_radius": 0.02,
        "d_max": 0.02,
        "horizon": 30,
        "epsilon": 1e-4,
        "pts_per_sphere": 256,
        "cloud_points": 64,
        "workspace_min": (0.0, 0.0, 0.0),
        "workspace_max": (0.2, 0.2, 0.2),
        "camera_position": (0.1, -0.25, 0.32),
    },
    "autoencoder": {
        "input_points": 64,
        "latent_dim": 32,
        "conv_channels": (32, 64, 64, 128, 32),
        "decoder_hidden": (256, 512),
        "group_norm_groups": 4,
        "lambda_emd": "auto",
        "n_clouds": 2000,
        "epochs": 25,
        "batch_size": 16,
        "learning_rate": 1e-3,
    },
    "demos": {
        "n_sets": 40,
        "per_set": 40,
        "pairs_m": 6525,
        "with_replacement": False,
        "test_fraction": 0.1,
    },
    "reward": {
        "hidden": (128, 128, 128),
        "learning_rate": 3e-3,
        "epochs": 250,
        "patience": 15,
        "eval_every": 5,
        "batch_pairs": 0,  # 0 means full-batch epochs
        "output_link": "linear",
    },
    "policy": {
        "n_workers": 32,
        "steps_per_update": 64,
        "epochs_per_update": 4,
        "minibatch_size": 512,
        "clip_ratio": 0.2,
        "gamma": 0.99,
        "gae_lambda": 0.95,
        "entropy_coef": 0.01,
        "value_coef": 0.5,
        "learning_rate": 3e-4,
        "total_updates": 120,
        "action_mode": "position",
        "normalize_rewards": True,
        "hidden": (64, 64),
        "init_log_std": -0.5,
        "n_seeds": 3,
        "eval_episodes": 100,
    },
    "labeling": {
        "port": 8765,
    },
}


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_like(default, raw: str, where: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = default[0] if default else 0.0
        return tuple(_parse_like(elem, p, where) for p in parts)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{where}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{where}: expected a number, got {raw!r}")
    return raw


class PipelineConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def defaults(cls) -> "PipelineConfig":
        return cls({s: dict(kv) for s, kv in DEFAULTS.items()})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        with open(path) as f:
            parser.read_file(f)
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ValueError(f"{path}: unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
                values[section][key] = _parse_like(DEFAULTS[section][key], raw,
                                                   f"{path} [{section}] {key}")
        return cls(values)

    def dump(self) -> str:
        out = io.StringIO()
        for section, kv in self.values.items():
            out.write(f"[{section}]\n")
            for key, v in kv.items():
                out.write(f"{key} = {_format_value(v)}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path):
        Path(path).write_text(self.dump())

    def config_hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    # typed views -----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def workdir(self) -> Path:
        return Path(self.values["run"]["workdir"])

    def task(self) -> TaskParams:
        t = self.values["task"]
        return TaskParams(
            n_points=t["n_points"], sphere_radius=t["sphere_radius"],
            reach_radius=t["reach_radius"], d_max=t["d_max"], horizon=t["horizon"],
            epsilon=t["epsilon"], pts_per_sphere=t["pts_per_sphere"],
            cloud_points=t["cloud_points"], workspace_min=t["workspace_min"],
            workspace_max=t["workspace_max"], camera_position=t["camera_position"])

    def ae_config(self) -> AEConfig:
        a = self.values["autoencoder"]
        lam = a["lambda_emd"]
        return AEConfig(
            input_points=a["input_points"], latent_dim=a["latent_dim"],
            conv_channels=tuple(a["conv_channels"]),
            decoder_hidden=tuple(a["decoder_hidden"]),
            group_norm_groups=a["group_norm_groups"],
            lambda_emd=lam if lam == "auto" else float(lam))

    def reward_config(self) -> RewardConfig:
        r = self.values["reward"]
        return RewardConfig(
            hidden=tuple(r["hidden"]), learning_rate=r["learning_rate"],
            batch_pairs=r["batch_pairs"] or None, epochs=r["epochs"],
            patience=r["patience"], eval_every=r["eval_every"], seed=self.seed)

    def ppo_config(self, action_mode=None, total_updates=None) -> PPOConfig:
        p = self.values["policy"]
        return PPOConfig(
            n_workers=p["n_workers"], steps_per_update=p["steps_per_update"],
            epochs_per_update=p["epochs_per_update"], minibatch_size=p["minibatch_size"],
            clip_ratio=p["clip_ratio"], gamma=p["gamma"], gae_lambda=p["gae_lambda"],
            entropy_coef=p["entropy_coef"], value_coef=p["value_coef"],
            learning_rate=p["learning_rate"],
            total_updates=total_updates or p["total_updates"],
            action_mode=action_mode or p["action_mode"],
            normalize_rewards=p["normalize_rewards"], hidden=tuple(p["hidden"]),
            init_log_std=p["init_log_std"])


def write_default_config(path):
    PipelineConfig.defaults().save(path)
