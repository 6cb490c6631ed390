"""A desk-scale laboratory for class-incremental sequence labeling.

Builds class-incremental task streams from CoNLL-style corpora (or
synthetic ones), trains a small token encoder with entity-aware contrastive
objectives, recovers old-class entities hidden in "O" by distance-based
relabeling, rehearses exemplars, and classifies with nearest class means.
"""

from .classifier import (
    MetricsReport,
    NcmModel,
    build_ncm,
    classify,
    classify_batch,
    evaluate,
    extract_spans,
    metrics_from_predictions,
    per_class_f1,
    span_prf,
    token_prf,
)
from .contrastive import (
    AnchorSets,
    EntityThreshold,
    TrainSettings,
    class_similarity,
    entity_threshold,
    entity_threshold_from_memory,
    joint_loss,
    mean_pairwise_cosine,
    select_all_anchors,
    select_entity_anchors,
    select_o_anchors,
    supcon_loss,
    train_contrastive,
)
from .corpus import (
    O_LABEL,
    Corpus,
    Sentence,
    Task,
    TaskSpec,
    TaskStream,
    Token,
    build_task_stream,
    load_task_stream,
    mask_labels,
    parse_conll,
    read_conll,
    save_task_stream,
    synthesize_corpus,
    task_statistics,
    validate_task_stream,
    write_conll,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    EncoderSnapshot,
    TokenRep,
    backprop,
    cosine,
    cosine_matrix,
    encode,
    encode_batch,
    init_encoder,
    load_params,
    load_snapshot,
    make_snapshot,
    save_params,
    save_snapshot,
    sgd_step,
)
from .errors import (
    ConfigurationError,
    ContractError,
    EmptyCorpusError,
    IncrelabError,
    InsufficientExemplarsError,
    MissingClassError,
    ParseError,
    ProtocolError,
    TrainingError,
)
from .memory import (
    Exemplar,
    ExemplarMemory,
    build_exemplars,
    exemplar_projs,
    exemplar_reps,
    prototypes,
)
from .protocol import RunConfig, RunState, initial_state, new_class_probe, run_step, run_stream
from .relabel import (
    BetaConfig,
    RelabelOutcome,
    RelabelThresholds,
    apply_relabeling,
    beta_schedule,
    build_thresholds,
    nn_threshold,
    proto_threshold,
    relabel_nn,
    relabel_proto,
    relabel_stats,
    scheduled_beta,
)

__version__ = "0.1.0"
