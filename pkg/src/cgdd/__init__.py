"""Conditional generative data-free knowledge distillation in PyTorch."""

__version__ = "0.1.0"

from .errors import (
    CGDDError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    FormatError,
    NumericError,
    RoleError,
    UndefinedMetricError,
)
from .losses import (
    LossWeights,
    MetricsReport,
    PresetLabelBatch,
    attention_energy,
    attention_transfer_loss,
    class_matching_loss,
    discrepancy_estimation_loss,
    distillation_loss,
    generator_loss,
    ground_truth_loss,
    information_entropy_loss,
    one_hot_loss,
    relative_accuracy,
    unsupervised_loss,
)
from .models import (
    ConditionalGenerator,
    ConditionedNoiseBatch,
    ForwardRecord,
    GeneratorSpec,
    LeNet5,
    LeNet5Half,
    ResNet18,
    ResNet34,
    bn_statistics_penalty,
    build_classifier,
    classify,
    generate,
    load_checkpoint,
    sample_conditioned_noise,
    save_checkpoint,
    uniform_distribution,
)
from .trainer import (
    CandidateSetting,
    Distiller,
    RunState,
    TeacherSchedule,
    TrainSchedule,
    run_distillation,
    talent_select,
    train_teacher,
)
from .data import EvalDataset, evaluate, export_sklearn_digits, load_eval_dataset
from .config import RunConfig, parse_config
from .viz import dump_image_grid, export_attention_heatmaps
