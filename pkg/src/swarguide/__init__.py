"""Guidance schemes and diagnostics for scale-wise token sampling."""

from .core import (
    FIXED,
    RATIO,
    SCHEME_KINDS,
    GuidanceField,
    LogitTensor,
    RunRecord,
    ScaleSchedule,
    SegMask,
    StepEntry,
    TokenMap,
    VocabSpec,
    validate_pair,
)
from .errors import SwarGuideError
from .formats import (
    LogitDump,
    export_heatmaps,
    read_dump,
    read_mask,
    read_record,
    write_dump,
    write_mask_pgm,
    write_record,
)
from .guidance import (
    AttentionMatrix,
    GuidanceScheme,
    apply_attention,
    attention_weights,
    cfg_guide,
    default_window_rule,
    guided_logits,
    igg_guide,
    igg_guide_windowed,
    mixed_guide,
    nudge,
)
from .metrics import (
    StepScores,
    TokenGuidanceDist,
    divergence_breakdown,
    divergence_score,
    downsample_mask,
    guidance_magnitudes,
    jsd,
    pielou_evenness,
    weighted_mean_scores,
)
from .sim import (
    FgShape,
    ModelOracle,
    ReplayOracle,
    SamplerConfig,
    SceneOracle,
    SceneOracleConfig,
    capture_dump,
    default_scene,
    default_schedule,
    replay_oracle,
    run_sampling,
    sample_step,
    scene_logits,
    scene_mask,
)

__version__ = "0.1.0"
