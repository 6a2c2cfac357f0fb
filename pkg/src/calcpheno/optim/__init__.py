from .lbfgs import LbfgsConfig, LbfgsResult, TrainingError, lbfgs_minimize
from .mlp import (MlpParams, TrainingBatch, cross_entropy_loss, mlp_forward,
                  mlp_loss_grad, mlp_predict, softmax)

__all__ = ["LbfgsConfig", "LbfgsResult", "TrainingError", "lbfgs_minimize", "MlpParams",
           "TrainingBatch", "cross_entropy_loss", "mlp_forward", "mlp_loss_grad",
           "mlp_predict", "softmax"]
