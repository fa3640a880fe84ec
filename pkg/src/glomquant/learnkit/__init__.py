from .losses import (
    FocalLossParams,
    focal_loss,
    focal_loss_batch,
    negative_cosine_full,
    simsiam_loss,
    softmax,
)
from .optim import CosineSchedule, MomentumSGD
from .toynet import ToyNet
from .training import (
    AugmentPolicy,
    LinearProbe,
    ProbeResult,
    TrainResult,
    collapse_statistic,
    linear_probe,
    train_toy_simsiam,
    two_cluster_data,
)
