"""The MAHALO game: losses, trainers, and the exact follower."""

from .losses import (
    BellmanErrorEstimate,
    actor_loss,
    dqra_loss,
    empirical_bellman_error,
    pessimism_loss,
    reward_mse_loss,
    td_loss,
    temperature_update,
)
from .learner import (
    GameConfig,
    GameLearner,
    Problem,
    StepOptions,
    Trace,
    TrainingDiverged,
    atac_step,
    make_eval_hook,
    make_learner,
    train_mahalo_atac,
    train_mahalo_pspi,
    warm_start,
)
