from typing import Final

PROBABILITY_ATOL: Final = 1e-12
DEFAULT_N_MAX: Final = 50
DEFAULT_TOLERANCE: Final = 1e-10
DEFAULT_MAX_ITER: Final = 200_000
CONTRACTION_SLACK: Final = 1e-9

# windy gridworld experiment
TOY_GAMMA: Final = 0.95
TOY_LAMBDA: Final = 0.95
TOY_BATCH_SIZE: Final = 200
TOY_LEARNING_RATE: Final = 1e-4
TOY_TOTAL_STEPS: Final = 1_000_000
TOY_TAUS: Final = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
EVAL_ROLLOUTS: Final = 1000

# PPO
CLIP_EPSILON: Final = 0.2
UPDATE_EPOCHS: Final = 4
ENTROPY_COEF: Final = 0.01
HIDDEN_SIZES: Final = (128, 128)
MINIBATCH_SIZE: Final = 50
VALUE_COEF: Final = 1.0
MAX_GRAD_NORM: Final = 0.5

# population training
POPULATION_SIZE: Final = 5
INITIAL_TAUS: Final = (0.1, 0.4, 0.5, 0.6, 0.9)
EXPLOIT_THRESHOLD: Final = 500.0
NOISE_BOUND: Final = 0.2
TAU_MIN: Final = 0.05
TAU_MAX: Final = 0.95
ELO_INITIAL: Final = 1000.0
ELO_K: Final = 32.0
EVAL_GAMES: Final = 200
ELO_GAMES_PER_PAIR: Final = 4
STEPS_PER_ROUND: Final = 2_000
ROUNDS: Final = 30

CHECKPOINT_MAGIC: Final = b"RPBTCKPT"
CHECKPOINT_VERSION: Final = 1
CHECKPOINT_SUFFIX: Final = ".ckpt"
LOCK_FILE: Final = ".rpbt.lock"
