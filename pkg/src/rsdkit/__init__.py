"""Coordinated teacher/student decoding and distillation dataset tooling.

The teacher proposes each token; the student accepts it only when its own
probability for that token clears a threshold, otherwise the student samples
the token itself. Verified traces (plus salvage prefixes for unsolved
problems) become training datasets, with full per-token information-theoretic
annotations along the way.
"""

from .decoding import (
    GenerationConfig,
    TokenRecord,
    Trace,
    decode,
    read_traces_jsonl,
    rsd_decode,
    skd_decode,
    solo_decode,
    write_traces_jsonl,
)
from .metrics import (
    DatasetReport,
    dataset_report,
    fallback_rate,
    low_prob_token_tally,
    step_entropy,
    sub_threshold_ratio,
    token_surprisal,
    trace_perplexity,
)
from .models import (
    ContextOverflowError,
    Distribution,
    EmptySupportError,
    GenerationContext,
    LanguageModel,
    NgramModel,
    SerializedModel,
    TableModel,
    apply_temperature,
    greedy,
    sample,
)
from .pipeline import (
    AttemptOutcome,
    DatasetFormatError,
    DatasetRecord,
    Problem,
    RejectionResult,
    Verifier,
    assemble_dataset,
    export_dataset,
    import_dataset,
    rejection_sample,
    run_generation,
    score_external_traces,
    upft_prefix,
)
from .remote import (
    BackendEndpoint,
    BackendError,
    BackendUnavailableError,
    CapabilityMismatchError,
    RemoteModel,
    RetryPolicy,
    handshake,
)
from .seeding import StepStream, derive_seed
from .stub_server import StubServer
from .vocab import (
    DualContext,
    VocabularyAlignmentError,
    VocabularyMap,
    build_vocab_map,
    replay_student_context,
    suppress,
)

__version__ = "0.1.0"
