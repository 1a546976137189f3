"""Smart-contract vulnerability detection with LLM-assisted feature fusion.

The pipeline: extract labeled Solidity functions into a corpus, run
vulnerability-specific prompts through a chat-completion endpoint with
majority voting, embed the code, the model's explanation, and its verdict
into a feature triple, and train an adaptive mixture-of-experts classifier
that fuses the three.
"""

from .corpus import (
    AlreadySplit,
    Corpus,
    DuplicateId,
    FunctionRecord,
    MalformedRecord,
    MissingLabel,
    Split,
    UnbalancedBraces,
    VulnType,
    extract_functions,
    load_corpus,
    load_label_manifest,
    save_corpus,
    split_corpus,
)
from .evaluate import (
    Dataset,
    EmptyInput,
    EvalReport,
    LengthMismatch,
    compare_gate_drift,
    compute_metrics,
    run_ablation,
    sweep,
    sweep_to_csv,
)
from .features import (
    ClozeTemplate,
    DimensionMismatch,
    FeatureBundle,
    MockProvider,
    ProviderUnavailable,
    RemoteProvider,
    Verbalizer,
    build_bundle,
    embed_expl,
    embed_pred,
    embed_raw,
    mock_provider,
    remote_provider,
)
from .llm import (
    AllAbstained,
    BudgetExceeded,
    CacheCorrupt,
    EndpointRejected,
    HttpTransport,
    InferenceParams,
    LlmVerdict,
    StubTransport,
    TransportError,
    Verdict,
    VerdictCache,
    cached_detect,
    complete,
    detect_with_vote,
    parse_verdict,
)
from .moe import (
    Batch,
    CheckpointError,
    EmptyBatch,
    MoeConfig,
    MoeModel,
    NonFiniteLoss,
    Prediction,
    assemble_matrix,
    expert_forward,
    fit,
    fuse,
    gate_forward,
    init_model,
    load_model,
    loss_and_grads,
    loss_total,
    make_batches,
    mhsa_enhance,
    predict,
    save_model,
    train_step,
)
from .nn import (
    AllMasked,
    GradCheckReport,
    KTooLarge,
    NotASimplex,
    Param,
    ShapeMismatch,
    TargetOutOfRange,
    attention,
    cross_entropy,
    grad_check,
    linear,
    softmax,
    topk_mask,
)
from .prompts import (
    CodeTooLong,
    PromptTemplate,
    builtin_templates,
    load_templates,
    render_prompt,
)

__version__ = "0.1.0"
