"""Online Bayesian probit networks for sparse binary prediction.

Weights are univariate Gaussian beliefs updated one example at a time by
moment matching; sparse categorical inputs pass through an embedding table
and one of four combination ops (copy, dimension-aware sum, pairwise
product, field-aware pairwise product) into a small dense stack with a
probit head. Training can run sequentially or over simulated parallel
workers that exchange Gaussian likelihood messages with a parameter server.
"""

from .data import (
    SparseInstance,
    StreamStats,
    instance_to_line,
    minibatch,
    negative_sample,
    parse_line,
    read_instances,
    sample_rate_for_ratio,
)
from .errors import (
    BadRate,
    CorruptCheckpoint,
    FieldOutOfRange,
    ImproperGaussian,
    InvalidConfig,
    ParseError,
    ProbitnetError,
    ShapeMismatch,
    StaleTape,
    StepTooLarge,
    UnknownFeature,
)
from .gaussians import (
    DEFAULT_VARIANCE_CEILING,
    DEFAULT_VARIANCE_FLOOR,
    AdfGradient,
    Gaussian,
    NaturalGaussian,
    adf_update,
    adf_update_arrays,
    from_natural,
    inverse_mills,
    natural_divide,
    natural_multiply,
    normal_cdf,
    normal_log_cdf,
    normal_pdf,
    to_natural,
    weight_decay,
)
from .layers import (
    BackwardTape,
    DenseLayerWeights,
    EmbeddingOp,
    EmbeddingTable,
    GradientMap,
    MomentVector,
    backward,
    copy_op_forward,
    count_operations,
    das_forward,
    dense_forward,
    embed_forward,
    ffm_forward,
    ffm_forward_bruteforce,
    fm_forward,
    fm_forward_bruteforce,
    forward_pass,
    probit_log_z,
    relu_moments,
)
from .model import (
    Model,
    ModelConfig,
    UpdateReport,
    calibrate,
    decay_all,
    init_model,
    load_checkpoint,
    log_evidence,
    predict,
    save_checkpoint,
    update,
)
from .oracles import (
    McEstimate,
    finite_diff_gradients,
    mc_layer_moments,
    quadrature_probit_log_evidence,
    quadrature_probit_posterior,
)
from .parallel import (
    LikelihoodMessage,
    MultipleDataPlan,
    ServerState,
    TrainingReport,
    multiple_data_mode,
    run_parallel_training,
    server_apply,
    split_stream,
    worker_process_batch,
)
from .synth import GroundTruth, make_generator, sample_stream

__version__ = "0.1.0"
