"""Active domain adaptation under label distribution shift.

Density-aware greedy prototype sampling with margin-gated oracle/pseudo
labeling, target label-distribution estimation, class-weighted source
sampling, and label-matched adversarial training with a cosine classifier.
"""

from ._backend import backend_name
from .config import ExperimentConfig
from .datasets import (
    Domain,
    FeatureDataset,
    LabelDistribution,
    RoundState,
    empirical_label_distribution,
    load_feature_dataset,
    save_feature_dataset,
)
from .harness import (
    RoundReport,
    SyntheticDomainSpec,
    compare_samplers,
    generate_domains,
    run_experiment,
)
from .kernels import (
    KernelCache,
    build_kernel_cache,
    commit_selection,
    marginal_gain,
    mmd_squared,
    objective_j,
    rbf_kernel,
)
from .matching import (
    ClassCounts,
    class_counts,
    count_oracle,
    count_pseudo,
    estimate_target_distribution,
    jsd,
    source_sampling_probs,
)
from .model import ToyModel, grl_coefficient
from .sampling import (
    Gate,
    MappingOracle,
    Oracle,
    PrototypeState,
    margin_gate,
    pseudo_label,
    run_sampling_round,
    sample_entropy,
    sample_margin,
    sample_random,
)

__version__ = "0.1.0"
