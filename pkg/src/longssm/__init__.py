"""Selective state-space scan kernels with per-channel receptive-field
analysis and calibrated token filtering for long-context inference."""

__version__ = "0.1.0"

from .attention import (
    AttentionSlice,
    DecayCurve,
    ReceptiveFieldProfile,
    attention_scores,
    decay_curve,
    export_heatmap,
    receptive_field,
)
from .channels import (
    ChannelClassification,
    DeltaDistribution,
    ThresholdTable,
    build_threshold_table,
    classify_channels,
    cumulative_decay_at_length,
    lookup,
    solve_threshold,
    winsorize,
)
from .evalharness import (
    PasskeyConfig,
    PasskeyInstance,
    emit_report,
    gen_passkey,
    perplexity,
    score_passkey,
)
from .manifest import LayerWeights, ManifestError, ModelBundle, ModelConfig, load_model, save_model
from .pipeline import calibrate, classify_layers, collect_delta_stats
from .runtime import RunMode, VANILLA, forward, generate_greedy, trace_ssm_inputs
from .ssm import (
    FilterPolicy,
    NumericsError,
    SsmInputs,
    discretize,
    expand_hidden_state,
    filtered_scan,
    scan_step,
    selective_scan,
    softplus,
)
from .synth import DeltaProfile, synth_model
from .tokens import read_tokens, write_tokens

__all__ = [
    "AttentionSlice",
    "ChannelClassification",
    "DecayCurve",
    "DeltaDistribution",
    "DeltaProfile",
    "FilterPolicy",
    "LayerWeights",
    "ManifestError",
    "ModelBundle",
    "ModelConfig",
    "NumericsError",
    "PasskeyConfig",
    "PasskeyInstance",
    "ReceptiveFieldProfile",
    "RunMode",
    "SsmInputs",
    "ThresholdTable",
    "VANILLA",
    "attention_scores",
    "build_threshold_table",
    "calibrate",
    "classify_channels",
    "classify_layers",
    "collect_delta_stats",
    "cumulative_decay_at_length",
    "decay_curve",
    "discretize",
    "emit_report",
    "expand_hidden_state",
    "export_heatmap",
    "filtered_scan",
    "forward",
    "gen_passkey",
    "generate_greedy",
    "load_model",
    "lookup",
    "perplexity",
    "read_tokens",
    "receptive_field",
    "save_model",
    "scan_step",
    "score_passkey",
    "selective_scan",
    "softplus",
    "solve_threshold",
    "synth_model",
    "trace_ssm_inputs",
    "winsorize",
    "write_tokens",
]
