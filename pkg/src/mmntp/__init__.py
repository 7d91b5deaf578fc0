"""Multimodal manoeuvre and trajectory prediction for highway driving.

Library layout:

- manoeuvre: label sequences, the (U, V) manoeuvre-vector codec, auto-labelling
- scene / frenet / features / dataset: synthetic highway scenes, coordinate
  transforms, interaction features, sliding-window samples
- model: transformer encoder-decoder with manoeuvre-specific Gaussian heads
- training: loss stack, winner-takes-all mode selection, Adam training loop
- metrics: minRMSE-K, meanNLL, maxACC-K, div-K, collision/offroad rates
- planner: contingency planner with a shared first control across branches
- cli: batch pipeline (gen-data, label, train, eval, plan, plot)
"""

from .errors import (
    ConfigError,
    DataError,
    FrenetRangeError,
    InfeasibleSceneConfig,
    MmntpError,
    MultipleTransitionsInPeriod,
    NumericalError,
)
from .manoeuvre import (
    HorizonConfig,
    ManoeuvreType,
    ManoeuvreVector,
    auto_label_trajectory,
    decode_manoeuvre_vector,
    encode_manoeuvre_vector,
    num_change_periods,
)
from .frenet import Centerline, cartesian_to_frenet, frenet_to_cartesian
from .scene import (
    GeneratorConfig,
    LaneGeometry,
    Scene,
    Track,
    VehicleState,
    generate_scene,
    scene_from_csv,
    scene_to_csv,
    select_svs,
)
from .features import FeatureScaler, extract_features
from .dataset import (
    DatasetConfig,
    DatasetSample,
    balance_dataset,
    build_dataset,
    read_samples_jsonl,
    split_dataset,
    write_samples_jsonl,
)
from .model import (
    GaussianParams,
    ManoeuvrePrediction,
    ManoeuvreTrajectoryPredictor,
    ModelConfig,
    ModePrediction,
    desk_config,
    load_checkpoint,
    new_model,
    save_checkpoint,
)
from .training import (
    LossBreakdown,
    TrainConfig,
    bvn_nll,
    fit,
    manoeuvre_type_nll,
    select_mode_mmp,
    select_mode_mtp,
    total_loss,
    traj_loss,
    transition_time_loss,
)
from .metrics import (
    EvaluationBatch,
    EvalSample,
    MetricsReport,
    build_evaluation_batch,
    build_report,
    collision_rate,
    div_k,
    max_acc_k,
    mean_nll,
    min_rmse_k,
    offroad_rate,
)
from .planner import (
    ContingencyPlan,
    EgoState,
    PlannerConfig,
    plan_contingency,
    select_target_vehicle,
)

__version__ = "0.1.0"
