"""Flow-matching policies fine-tuned with PPO through a closed-form score drift and a learned noise level."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, defaults, load_config, parse_config, preset_path
from .env import EnvConfig, PointMassEnv, collect_demos
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigurationError,
    DomainError,
    NonFiniteError,
    ScoreFlowError,
    ShapeError,
    TrainingDiverged,
    TruncatedCheckpointError,
    UsageError,
    VersionMismatchError,
)
from .finetune import FinetuneConfig, ToyConfig, evaluate_policy, finetune, run_toy
from .flow import DemoDataset, PretrainConfig, fm_loss, init_velocity, linear_interpolate, ode_sample, pretrain, velocity
from .nn import (
    MLPSpec,
    OptimizerState,
    ParamBundle,
    adam_step,
    backprop,
    cosine_warm_restart_lr,
    finite_diff_check,
    mlp_forward,
    mlp_init,
)
from .oracles import GaussianData, MixtureData, gaussian_marginal_score, mc_posterior_score, mixture_score
from .ppo import FlowPolicy, PPOConfig, gae, init_critic, ppo_update
from .sampler import (
    VARIANTS,
    ClipPolicy,
    ControlHeads,
    FlowTrajectory,
    chain_entropy,
    sample_action,
    score_sde_step,
    scoreflow_step,
    trajectory_log_prob,
)
from .score import (
    NoiseBoundSchedule,
    VariancePredictor,
    alpha_scaled,
    closed_form_score,
    effective_sigma_max,
    init_scheduler,
    init_variance,
)
from .stats import welch_t_test

__version__ = "0.1.0"
