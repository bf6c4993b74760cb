"""Continual-learning lab: a modular network whose routing is driven by a
Fisher-information reward, per-task memory nets for inference routing,
elastic weight consolidation, and the matching MLP baselines."""

from .data import (LabeledSet, Task, TaskSequence, batch_iter, load_mnist,
                   load_mnist_idx, make_permuted_tasks, make_split_tasks,
                   make_synthetic)
from .information import (FisherAnchor, RewardScale, empirical_fisher_diag,
                          ewc_penalty_and_grads, joint_fisher_batch, reward)
from .model import (DibCell, DibConfig, DibModel, MlpModel, MultiHeadMlp,
                    build_mhmlp_baseline, build_mlp_baseline,
                    pooled_module_apply)
from .nn import (AdamConfig, Mlp, Param, ParamBank, adam_step, affine_backward,
                 affine_forward, init_params, relu, relu_backward, softmax_xent)
from .reporting import (PathEntropyReport, cond_entropy_per_path,
                        mean_final_error, write_results)
from .routing import (EpsilonSchedule, epsilon, rir_select,
                      router_loss_and_grads, select_actions)
from .training import (ArchScale, ErrorMatrix, NumericError, RunCondition,
                       run_continual, sweep, train_lower_bound, train_task)

__version__ = "0.1.0"
