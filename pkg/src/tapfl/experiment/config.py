"""YAML configuration: packaged defaults overlaid with a user file."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ..federation import RoundConfig, WarmupSchedule
from ..model import ModalitySpec, ModelSpec, TaskSpec
from ..tap import KDConfig
from .data import SynthDatasetSpec

MODES = ("local", "fedavg", "fedavg-post", "tap", "tap-nokd")

_FAMILY = {
    ("vector-image", "classification"): "image_classification",
    ("vector-image", "reconstruction"): "image_generation",
    ("token-text", "classification"): "text_classification",
    ("token-text", "sequence-generation"): "text_generation",
}


class ConfigError(ValueError):
    pass


def packaged_config(name: str) -> dict:
    text = resources.files("tapfl.configs").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text) or {}


def deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, **overrides: Any) -> "ExperimentConfig":
    """Defaults, then ``path`` (a file, or the name of a packaged config), then overrides."""
    raw = packaged_config("default")
    if path is not None:
        p = Path(path)
        user = yaml.safe_load(p.read_text()) if p.exists() else packaged_config(str(path))
        raw = deep_merge(raw, user or {})
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    return ExperimentConfig(raw)


@dataclass
class ExperimentConfig:
    raw: dict

    def __post_init__(self) -> None:
        self.validate()

    # -- plain fields ------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw.get("output_dir", "runs"))

    @property
    def clients(self) -> list[tuple[list[str], list[str]]]:
        return [(list(c["modalities"]), list(c["tasks"])) for c in self.raw["clients"]]

    def with_updates(self, **changes: Any) -> "ExperimentConfig":
        """Copy with dotted-path updates, e.g. ``{"tap.kd_weight": 0.0}``."""
        raw = copy.deepcopy(self.raw)
        for dotted, value in changes.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for k in parents:
                node = node.setdefault(k, {})
            node[leaf] = value
        return ExperimentConfig(raw)

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha1(canon.encode()).hexdigest()[:10]

    # -- derived objects -------------------------------------------------------

    def model_spec(self) -> ModelSpec:
        m = self.raw["model"]
        lora = m.get("lora", {})
        return ModelSpec(
            modalities={k: ModalitySpec(v["kind"], int(v.get("input_dim", 0)),
                                        int(v.get("seq_len", 0)), int(v.get("vocab", 0)))
                        for k, v in self.raw["modalities"].items()},
            tasks={k: TaskSpec(v["kind"], v["modality"], int(v.get("num_classes", 0)))
                   for k, v in self.raw["tasks"].items()},
            d_model=int(m["d_model"]),
            layers_mote=int(m["layers_mote"]),
            layers_mome=int(m["layers_mome"]),
            lora_ranks={"encoder": int(lora["encoder_attention_rank"]),
                        "mix": int(lora["backbone_attention_rank"]),
                        "expert": int(lora["backbone_expert_rank"])},
            expert_hidden=int(m["expert_hidden"]),
            base_std=float(m["base_std"]),
            lora_dropout=float(lora.get("dropout", 0.0)),
            head_dropout=float(m.get("head_dropout", 0.0)),
            seed=self.seed,
        )

    def round_config(self) -> RoundConfig:
        f = self.raw["federation"]
        return RoundConfig(
            clients_per_round=int(f["clients_per_round"]),
            local_iters=int(f["local_iters"]),
            rounds=int(f["rounds"]),
            batch_size=int(f["batch_size"]),
            lr=WarmupSchedule(float(f["lr_initial"]), float(f["lr_post_warmup"]),
                              int(f["warmup_rounds"])),
            seed=self.seed,
        )

    @property
    def weight_decay(self) -> float:
        return float(self.raw["federation"]["weight_decay"])

    def kd_config(self) -> KDConfig:
        t = self.raw["tap"]
        beta = 0.0 if self.mode == "tap-nokd" else float(t["kd_weight"])
        return KDConfig(temperature=float(t["kd_temperature"]), default_beta=beta,
                        post_iters=int(t["post_iters"]))

    @property
    def post_iters(self) -> int:
        return int(self.raw["tap"]["post_iters"])

    def task_family(self, task: str) -> str:
        t = self.raw["tasks"][task]
        kind = self.raw["modalities"][t["modality"]]["kind"]
        return _FAMILY[(kind, t["kind"])]

    def margin(self, client: int, task: str) -> float:
        t = self.raw["tap"]
        override = (t.get("margin_overrides") or {}).get(f"{client}/{task}")
        value = override if override is not None else t["margins"][self.task_family(task)]
        return float(value)

    def dataset_spec(self, task: str) -> SynthDatasetSpec:
        t = self.raw["tasks"][task]
        mod = self.raw["modalities"][t["modality"]]
        d = self.raw["data"]
        index = sorted(self.raw["tasks"]).index(task)
        return SynthDatasetSpec(
            modality=mod["kind"], task=t["kind"],
            input_dim=int(mod.get("input_dim", 0)), seq_len=int(mod.get("seq_len", 0)),
            vocab=int(mod.get("vocab", 0)), num_classes=int(t.get("num_classes", 0)),
            label_skew=float(d["label_skew"]), center_shift=float(d["center_shift"]),
            noise=float(d["noise"]), separation=float(d.get("separation", 3.0)),
            samples_per_client=int(d["samples_per_client"]), val_samples=int(d["val_samples"]),
            seed=self.seed * 1000 + index,
        )

    # -- checks ------------------------------------------------------------------

    def validate(self) -> None:
        r = self.raw
        for key in ("seed", "mode", "model", "modalities", "tasks", "data", "clients",
                    "federation", "tap"):
            if key not in r:
                raise ConfigError(f"missing key {key!r}")
        if r["mode"] not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {r['mode']!r}")
        for name, t in r["tasks"].items():
            if t.get("modality") not in r["modalities"]:
                raise ConfigError(f"task {name} references unknown modality {t.get('modality')!r}")
            kind = r["modalities"][t["modality"]]["kind"]
            if (kind, t["kind"]) not in _FAMILY:
                raise ConfigError(f"task {name}: {t['kind']} on {kind} is not supported")
        if not r["clients"]:
            raise ConfigError("at least one client is required")
        for i, c in enumerate(r["clients"]):
            for m in c["modalities"]:
                if m not in r["modalities"]:
                    raise ConfigError(f"client {i}: unknown modality {m!r}")
            for o in c["tasks"]:
                if o not in r["tasks"]:
                    raise ConfigError(f"client {i}: unknown task {o!r}")
                if r["tasks"][o]["modality"] not in c["modalities"]:
                    raise ConfigError(f"client {i}: task {o} needs modality "
                                      f"{r['tasks'][o]['modality']}")
        if r["mode"] in ("tap", "tap-nokd"):
            for i, (_, tasks) in enumerate(self.clients):
                for o in tasks:
                    try:
                        m = self.margin(i, o)
                    except KeyError as exc:
                        raise ConfigError(f"no margin for client {i}, task {o}") from exc
                    if math.isnan(m):
                        raise ConfigError(f"margin for client {i}, task {o} is NaN")
        self.model_spec().validate()
        self.round_config().validate(len(r["clients"]))
