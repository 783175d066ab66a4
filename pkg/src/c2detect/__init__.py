"""Botnet C2 host detection from NetFlow records.

Flows are pivoted per external host, summarised into flow-size and beaconing
features, classified with a down-sampled balanced random forest, and
explained with permutation importance, minimal depth and partial dependence.
"""

__version__ = "0.1.0"

from .aggregate import (
    BinnedCounts,
    HostTrafficView,
    Initiator,
    bin_flows,
    group_by_external_host,
    infer_initiator,
)
from .explain import (
    ImportanceReport,
    PDPCurve,
    export_multiway_importance,
    importance_report,
    minimal_depth_stats,
    partial_dependence,
    permutation_importance,
)
from .features import (
    FEATURE_NAMES,
    FeatureVector,
    dominant_flow_count,
    dominant_ratio_count,
    export_timeseries_matrix,
    extract_features,
    interarrival_stats,
    run_lengths,
)
from .flows import (
    EndpointRole,
    FlowRecord,
    FlowTable,
    NetworkConfig,
    classify_endpoint,
    parse_flow_csv,
)
from .forest import (
    ConfusionMatrix,
    DecisionTree,
    ForestModel,
    TrainConfig,
    balanced_bootstrap,
    oob_evaluate,
    predict,
    train_forest,
    train_tree,
    tune_mtry,
)
from .labels import (
    LabeledDataset,
    LabelSet,
    build_training_set,
    load_blacklist,
    match_predictions,
)
from .synth import SynthProfile, bot_profile, generate_day, normal_profile
