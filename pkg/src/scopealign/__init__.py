"""Weight-scope alignment for model merging and federated averaging."""

from .data import Dataset, ImbalanceSpec, make_blobs, perturb
from .engine import Model, OptimizerState, TrainConfig, forward, init_mlp, loss_and_grad, optimizer_step, train
from .federated import FLConfig, aggregate, dirichlet_partition, local_update, run_federation
from .merge import Permutation, apply_permutation, barrier, landscape_grid, lerp, match_weights, scale_layer
from .regularizers import RegularizerSpec, check_decay_identity, check_proximal_identity, penalty_and_grad
from .scope import LayerScope, ScopeTarget, WeightScope, scope_estimate, scope_fuse, scope_kl, scope_kl_grad

__version__ = "0.1.0"
