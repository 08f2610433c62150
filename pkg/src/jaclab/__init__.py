"""Jacobian estimation and inverse-Jacobian Cartesian control on simulated arms."""
from .environments import Env, EnvKind, make_env
from .kinematics import kinova_chain, point_features, true_jacobian
from .linalg import pinv, svd
from .neural import Mlp, MlpSpec, TrainConfig

__version__ = "0.1.0"

__all__ = ["Env", "EnvKind", "make_env", "kinova_chain", "point_features", "true_jacobian",
           "pinv", "svd", "Mlp", "MlpSpec", "TrainConfig", "__version__"]
