"""Context-sensing channel attention and contrastive temporal aggregation.

A small numpy-backed library for building, training and evaluating a video
feature head at desk scale: per-frame channel attention gated by sequence
context, consistency-based contrastive frame weighting, a minimal
reverse-mode tape for training, a synthetic corrupted-sequence benchmark,
and CMC/mAP retrieval evaluation.
"""

from .tensor import (
    ContractError,
    DegenerateInputError,
    GradCheckReport,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    cosine,
    grad_check,
    matvec,
    reduce_mean,
    sigmoid_map,
    tape_backward,
)
from .csca import (
    CscaParams,
    attend_frame,
    csca_forward,
    csca_v_weights,
    refine,
    se_frame_weights,
    se_video_weights,
    sequence_gate,
    squeeze_frame,
)
from .cfa import (
    CfaParams,
    QanParams,
    QualityScores,
    aggregate,
    cfa_forward,
    cfa_v_weights,
    contrastive_weights,
    propagate,
    qan_weights,
    quality_scores,
    similarity_matrix,
)
from .model import (
    METHODS,
    Batch,
    HeadParams,
    HyperParams,
    TrainingDivergedError,
    init_head,
    load_checkpoint,
    method_head,
    param_store,
    sample_frames,
    save_checkpoint,
    total_loss,
    train,
    video_feature,
)
from .synthdata import (
    ConfigError,
    CorruptionSpec,
    DatasetConfig,
    IdentityBank,
    SequenceBatch,
    SyntheticDataset,
    make_dataset,
    make_identity_bank,
    make_sequence,
    read_sequence,
    write_sequence,
)
from .evaluation import (
    AblationRow,
    EvalReport,
    ProtocolError,
    Ranking,
    WeightReport,
    ablate,
    cmc,
    dump_weights,
    evaluate_head,
    mean_ap,
    retrieve,
)

__version__ = "0.1.0"
