"""slimnas: a desk-scale lab for slimmable weight-sharing supernets.

Train a supernet with balanced sandwich sampling, in-place distillation,
and a prior-guided pairwise rank loss; then measure how well its ranking
of subnets agrees with stand-alone-trained ground truth.
"""

__version__ = "0.1.0"

from .space import (  # noqa: F401
    ArchParseError,
    ArchSpec,
    SamplerKind,
    SpaceConfig,
    SpaceError,
    block_width,
    block_widths,
    decode_arch,
    encode_arch,
    enumerate_space,
    make_divisible,
    maximum_arch,
    minimum_arch,
    resnet48_space,
    sample,
    space_size,
    tiny_space,
)
from .layers import Activation, ActivationKind, apply_activation  # noqa: F401
from .network import (  # noqa: F401
    CheckpointError,
    ContractError,
    SlimResNet,
    Supernet,
    SupernetConfig,
    build_supernet,
    extract_subnet,
    forward_subnet,
    load_checkpoint,
    save_checkpoint,
    subnet_plan,
    supernet_plan,
)
from .proxies import (  # noqa: F401
    NonFiniteScoreError,
    ProxyKind,
    ProxyScore,
    ZenScoreResult,
    count_flops,
    count_params,
    score_proxy,
    zen_score,
    zen_score_result,
)
from .training import (  # noqa: F401
    PriorCache,
    ScheduleKind,
    ScheduleSpec,
    SGD,
    TrainConfig,
    TrainStepLog,
    TrainStrategy,
    TrainingError,
    distill_loss,
    lambda_at,
    rank_loss,
    train_step,
    train_supernet,
)
from .evaluation import (  # noqa: F401
    CorrelationReport,
    EvaluationError,
    TrialRecord,
    UndefinedCorrelationError,
    consistency_report,
    correlation,
    evaluate_subnet,
    read_records,
    recalibrate_bn,
    train_standalone,
    write_summary_csv,
)
from .data import Dataset, DatasetSpec, DataSource, ingest_dataset  # noqa: F401
from .experiments import (  # noqa: F401
    ExperimentConfig,
    ExperimentKind,
    emit_plots,
    load_experiment_config,
    run_experiment,
    tiny_consistency_config,
)
