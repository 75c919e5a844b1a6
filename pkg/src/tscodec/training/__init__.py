from .data import load_windows, save_binary, save_text, synthetic_windows
from .evaluate import average_error, channel_percent_errors, evaluate, evaluate_all
from .losses import LossWeights, adversarial_loss, bce_with_logits, mse, reconstruction_loss, smooth_l1
from .optim import Adam
from .trainer import TrainConfig, Trainer, TrainState
