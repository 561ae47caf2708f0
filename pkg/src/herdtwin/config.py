"""One declarative configuration file for the whole pipeline.

Flat INI sections, one per module. Precedence: CLI flags override the config
file, which overrides the TWIN_SEED environment fallback, which overrides
built-in defaults. Unknown sections or keys are rejected, and the effective
configuration (every key, fully materialized) can be dumped for reproducible
reruns.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path

from .evaluation import PipelineConfig
from .gbdt import GbdtConfig
from .ingest import IngestConfig
from .synth import DEFAULT_DROPOUT, DEFAULT_NOISE, DiurnalThi, DropoutSpec, HeatWave, SynthConfig
from .timeseries import Modality
from .twin import TwinRunConfig

ENV_SEED = "TWIN_SEED"


class ConfigError(Exception):
    """Unknown key/section or unparseable value."""


def _default_heat_waves_text() -> str:
    return ",".join(
        f"{w.start_day}:{w.duration_days}:{w.amplitude}" for w in DiurnalThi().heat_waves
    )


# section -> key -> (type tag, default). Types: int, float, bool, str.
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "global": {
        "seed": ("int", 42),
        "jobs": ("int", 1),
    },
    "synth": {
        "n_cows": ("int", 8),
        "days": ("int", 14),
        "start": ("str", "2024-06-01T00:00"),
        "tz_offset_minutes": ("int", 0),
        "param_spread": ("float", 1.0),
        "thi_base": ("float", 70.0),
        "thi_amplitude": ("float", 7.0),
        "thi_phase_hour": ("float", 8.0),
        "heat_waves": ("str", _default_heat_waves_text()),
        **{f"noise_{name}": ("float", std) for name, std in DEFAULT_NOISE.items()},
        **{f"dropout_rate_{name}": ("float", spec.rate) for name, spec in DEFAULT_DROPOUT.items()},
        **{
            f"dropout_gap_{name}": ("float", spec.mean_gap_minutes)
            for name, spec in DEFAULT_DROPOUT.items()
        },
    },
    "ingest": {
        "max_gap_seconds": ("int", 60),
        "step_minutes": ("int", 1),
        **{f"agg_{m.key}": ("str", "last" if m is Modality.ANKLE else "mean")
           for m in (Modality.UWB, Modality.IMMU, Modality.PRESSURE, Modality.CBT,
                     Modality.ANKLE, Modality.THI, Modality.WEATHER, Modality.MILK)},
    },
    "twin": {
        "alpha_theta": ("float", 0.01),
        "beta_stress": ("float", 5.0),
        "gp_stride": ("int", 10),
        "feedback": ("bool", True),
        "gp_refit_daily": ("bool", False),
    },
    "features": {
        "horizon_minutes": ("int", 120),
    },
    "gbdt": {
        "n_trees": ("int", 120),
        "learning_rate": ("float", 0.1),
        "max_leaves": ("int", 31),
        "min_samples_leaf": ("int", 20),
        "feature_fraction": ("float", 1.0),
        "bagging_fraction": ("float", 1.0),
        "n_bins": ("int", 63),
    },
    "ensemble": {
        "k_folds": ("int", 5),
        "tuner_budget": ("int", 6),
        "meta_trees_cap": ("int", 0),  # 0 disables the cap
        "include_env_milk_in_global": ("bool", False),
    },
    "uncertainty": {
        "bootstrap_b": ("int", 30),
        "replica_trees_cap": ("int", 150),
        "sigma_min": ("float", 0.03),
        "target_coverage": ("float", 0.95),
        "z_alpha": ("float", 1.96),
    },
    "heads": {
        "theta": ("float", 38.8),
    },
    "eval": {
        "k_folds": ("int", 5),
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"true": True, "false": False, "1": True, "0": False}[s.lower()],
}


class RunConfig:
    """All sections materialized; tracks which keys came from the file."""

    def __init__(self, values: dict[str, dict[str, object]], explicit: set[tuple[str, str]]):
        self.values = values
        self.explicit = explicit

    def get(self, section: str, key: str):
        return self.values[section][key]

    def override(self, section: str, key: str, value) -> None:
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        self.values[section][key] = value
        self.explicit.add((section, key))

    @property
    def seed(self) -> int:
        return int(self.values["global"]["seed"])

    @property
    def jobs(self) -> int:
        return int(self.values["global"]["jobs"])

    def dump(self) -> str:
        """Effective configuration: every key, current value, fixed order."""
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                value = self.values[section][key]
                if isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    # -- typed views ---------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        v = self.values["synth"]
        waves = []
        text = str(v["heat_waves"]).strip()
        if text:
            for item in text.split(","):
                try:
                    start, duration, amp = item.split(":")
                    waves.append(HeatWave(float(start), float(duration), float(amp)))
                except ValueError as exc:
                    raise ConfigError(f"bad heat wave spec {item!r}") from exc
        from .timeseries import Timestamp

        return SynthConfig(
            n_cows=int(v["n_cows"]),
            days=int(v["days"]),
            seed=self.seed,
            start=Timestamp.from_iso(str(v["start"])),
            noise={name: float(v[f"noise_{name}"]) for name in DEFAULT_NOISE},
            dropout={
                name: DropoutSpec(float(v[f"dropout_rate_{name}"]), float(v[f"dropout_gap_{name}"]))
                for name in DEFAULT_DROPOUT
            },
            diurnal_thi=DiurnalThi(
                base=float(v["thi_base"]),
                amplitude=float(v["thi_amplitude"]),
                phase_hour=float(v["thi_phase_hour"]),
                heat_waves=tuple(waves),
            ),
            param_spread=float(v["param_spread"]),
            tz_offset_minutes=int(v["tz_offset_minutes"]),
        )

    def ingest_config(self) -> IngestConfig:
        v = self.values["ingest"]
        aggregation = {}
        for m in Modality:
            key = f"agg_{m.key}"
            if key in v:
                aggregation[m] = str(v[key])
        return IngestConfig(
            max_gap_seconds=int(v["max_gap_seconds"]),
            step_minutes=int(v["step_minutes"]),
            aggregation=aggregation,
        )

    def gbdt_config(self) -> GbdtConfig:
        v = self.values["gbdt"]
        return GbdtConfig(
            n_trees=int(v["n_trees"]),
            learning_rate=float(v["learning_rate"]),
            max_leaves=int(v["max_leaves"]),
            min_samples_leaf=int(v["min_samples_leaf"]),
            feature_fraction=float(v["feature_fraction"]),
            bagging_fraction=float(v["bagging_fraction"]),
            n_bins=int(v["n_bins"]),
            seed=self.seed,
        )

    def pipeline_config(self) -> PipelineConfig:
        tw = self.values["twin"]
        theta = float(self.values["heads"]["theta"])
        horizon = int(self.values["features"]["horizon_minutes"])
        twin_cfg = TwinRunConfig(
            horizon_minutes=horizon,
            theta_stress=theta,
            beta_stress=float(tw["beta_stress"]),
            alpha_theta=float(tw["alpha_theta"]),
            gp_stride=int(tw["gp_stride"]),
            feedback=bool(tw["feedback"]),
            gp_refit_daily=bool(tw["gp_refit_daily"]),
        )
        ens = self.values["ensemble"]
        unc = self.values["uncertainty"]
        cap = int(ens["meta_trees_cap"])
        return PipelineConfig(
            seed=self.seed,
            k_folds=int(self.values["eval"]["k_folds"]),
            expert=self.gbdt_config(),
            tuner_budget=int(ens["tuner_budget"]),
            meta_trees_cap=None if cap == 0 else cap,
            bootstrap_b=int(unc["bootstrap_b"]),
            replica_trees_cap=int(unc["replica_trees_cap"]),
            target_coverage=float(unc["target_coverage"]),
            sigma_min=float(unc["sigma_min"]),
            z_alpha=float(unc["z_alpha"]),
            theta_stress=theta,
            horizon_minutes=horizon,
            twin=twin_cfg,
            include_env_milk_in_global=bool(ens["include_env_milk_in_global"]),
            jobs=self.jobs,
        )


def load_config(path=None) -> RunConfig:
    """Parse the INI file (or defaults), applying the TWIN_SEED fallback."""
    values = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    explicit: set[tuple[str, str]] = set()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as handle:
                parser.read_file(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key [{section}] {key}")
                type_tag, _ = SCHEMA[section][key]
                try:
                    values[section][key] = _PARSERS[type_tag](raw)
                except (ValueError, KeyError) as exc:
                    raise ConfigError(
                        f"bad value for [{section}] {key}: {raw!r} (expected {type_tag})"
                    ) from exc
                explicit.add((section, key))
    if ("global", "seed") not in explicit and ENV_SEED in os.environ:
        try:
            values["global"]["seed"] = int(os.environ[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    return RunConfig(values, explicit)


def write_effective_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.dump(), encoding="utf-8")
