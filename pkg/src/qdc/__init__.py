"""Continual dense retrieval with query drift compensation.

Train a small hashed bag-of-tokens encoder over a task sequence, index
each task's corpus once, and keep old indexes searchable by subtracting
the accumulated query embedding drift instead of re-indexing.
"""
from .config import (
    METHODS,
    RunConfig,
    apply_overrides,
    derive_rng,
    derive_seed,
    load_config,
    parse_method,
    save_config,
    seed_chain,
)
from .datagen import (
    StreamSpec,
    TaskDataset,
    export_stream,
    generate_task_stream,
    load_beir_dataset,
    validate_dataset,
)
from .drift import (
    DriftLedger,
    DriftVector,
    MultiDriftRecord,
    accumulate_drift,
    append_record,
    compensate_query,
    compensate_query_multi,
    compensate_query_path,
    estimate_drift,
    estimate_multi_drift,
    kmeans_pp_init,
    ledger_from_dict,
    ledger_to_dict,
    lloyd_kmeans,
    load_ledger,
    predict_task_id,
    save_ledger,
)
from .encoder import (
    EncoderParams,
    TokenFeatures,
    contrastive_loss,
    distill_loss,
    encode,
    encode_batch,
    grad_check,
    init_params,
    load_snapshot,
    save_snapshot,
    sgd_step,
    tokenize,
)
from .errors import QdcError
from .index import (
    CorpusIndex,
    DocRecord,
    build_index,
    doc_encoding_text,
    load_index,
    save_index,
    search_topk,
    search_topk_batch,
)
from .metrics import (
    MetricReport,
    PDReport,
    compute_metrics,
    drift_report,
    drift_report_csv,
    performance_drop,
)
from .pipeline import (
    ContinualState,
    RetrievalRun,
    RunResult,
    bench,
    evaluate_matrix,
    init_state,
    joint_train,
    mine_hard_negatives,
    old_task_average,
    retrieve_eval,
    run_continual,
    train_task,
    train_trajectory,
    zero_shot_run,
)
from .vecops import cosine_sim, l2_normalize, mean_embedding

__version__ = "0.1.0"
