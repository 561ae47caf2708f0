"""herdtwin: physics-informed digital-twin forecasting of cattle core body temperature."""

from .ensemble import (
    EnsembleBundle,
    EnsembleModel,
    group_kfold,
    predict_ensemble,
    read_bundle,
    train_ensemble,
    write_bundle,
)
from .evaluation import (
    PipelineConfig,
    ablate_digital_twin,
    ablate_feature_groups,
    compute_metrics,
    features_from_frames,
    run_cv,
    run_cv_detailed,
    train_bundle,
)
from .features import FeatureMatrix, PooledMatrix, assemble
from .frameio import read_frame, write_frame
from .gbdt import GbdtConfig, GbdtModel
from .heads import ForecastRecord, forecast, stress_label, stress_probability
from .ingest import IngestConfig, ingest_directory
from .synth import SynthConfig, simulate_herd
from .timeseries import (
    AlignedFrame,
    Channel,
    CowId,
    Modality,
    Timestamp,
    merge_frames,
    slice_window,
)
from .twin import (
    BehaviorModel,
    GpResidualModel,
    NoiseModel,
    TwinParams,
    TwinRunConfig,
    run_twin,
)
from .uncertainty import BootstrapSet, CalibrationConstants, bootstrap_fit, interval, picp

__all__ = [
    "AlignedFrame",
    "BehaviorModel",
    "BootstrapSet",
    "CalibrationConstants",
    "Channel",
    "CowId",
    "EnsembleBundle",
    "EnsembleModel",
    "FeatureMatrix",
    "ForecastRecord",
    "GbdtConfig",
    "GbdtModel",
    "GpResidualModel",
    "IngestConfig",
    "Modality",
    "NoiseModel",
    "PipelineConfig",
    "PooledMatrix",
    "SynthConfig",
    "Timestamp",
    "TwinParams",
    "TwinRunConfig",
    "ablate_digital_twin",
    "ablate_feature_groups",
    "assemble",
    "bootstrap_fit",
    "compute_metrics",
    "features_from_frames",
    "forecast",
    "group_kfold",
    "ingest_directory",
    "interval",
    "merge_frames",
    "picp",
    "predict_ensemble",
    "read_bundle",
    "read_frame",
    "run_cv",
    "run_cv_detailed",
    "run_twin",
    "simulate_herd",
    "slice_window",
    "stress_label",
    "stress_probability",
    "train_bundle",
    "train_ensemble",
    "write_bundle",
    "write_frame",
]

__version__ = "0.1.0"
