"""attnctl: a desk-scale attention-control engine.

Learns per-instance token embeddings from a single latent with staged
reward/penalty cross-attention losses, steers synthesis with box-level
attention control (latent optimization, masking, cluster-refined masks), and
cross-checks the optimization behavior against closed-form per-pixel optima.
"""

__version__ = "0.1.0"

from .core import (
    AttentionMap,
    AttentionRecord,
    BinaryMask,
    LayerAttention,
    downsample_mask,
    scaled_dot_attention,
    softmax_rows,
)
from .denoiser import (
    DenoiserParams,
    NoiseSchedule,
    TokenEmbedding,
    ddim_add_noise,
    ddim_step,
    forward_denoise,
    predict_clean,
    toy_schedule,
)
from .errors import (
    ConfigurationError,
    DegenerateInputWarning,
    DivergenceError,
    ResampleError,
    ShapeError,
)
from .kkt import (
    PixelAttentionProblem,
    oracle_report,
    penalty_optimum,
    projected_descent,
    reward_stationary_point,
    simplex_project,
    standard_problem,
)
from .learning import (
    InstanceSet,
    LearningConfig,
    SampleDraw,
    joint_sample,
    masked_reconstruction_loss,
    penalty_ca_loss,
    reward_ca_loss,
    run_semantic_learning,
    staged_attn_loss,
    total_learning_loss,
)
from .refine import (
    ClusterState,
    RefinementConfig,
    assign_clusters,
    compute_ca_masks,
    kmeans_self_attention,
)
from .scenario import (
    Scenario,
    attention_argmax_iou,
    generate_scenario,
    leakage_mass,
    pca_project,
    synthesis_tokens,
)
from .synthesis import (
    BoxSpec,
    ScheduleParams,
    SynthesisConfig,
    alpha_decay,
    apply_attention_masking,
    combined_attn_loss,
    fg_bg_energies,
    latent_opt_step,
    mean_energies,
    penalty_box_score,
    reward_box_score,
    run_synthesis,
)
from .harness import ControlConfig, parse_config, report, run_experiment
