"""Random feature attention: kernels, gradients, toy training and benchmarks."""

from .attention import (AttentionConfig, AttentionState, CausalOutput, GatedOutput, GateParams, SequenceBatch,
                        gated_softmax_oracle, rfa_causal, rfa_cross, rfa_gated, rfa_stateful_carry,
                        rfa_unnormalized, softmax_attention, softmax_attention_all)
from .bench import (DecodeBenchRecord, SweepRecord, approximation_error_sweep, decode_bench, emit_csv,
                    read_csv)
from .errors import (DegenerateInputError, ParameterError, RangeError, RFAError, TrainingDivergedError,
                     UnsupportedKindError)
from .features import (FeatureMapPool, FeatureMapSpec, RealizedFeatureMap, apply_map, build_feature_map,
                       build_pool, kernel_estimate, sigma_for_temperature)
from .gradients import GradBundle, backward, finite_diff_grad, forward, grad_check
from .numerics import RngState, l2_normalize, stable_softmax
from .toytrain import ToyModel, ToyTask, TrainConfig, eval_toy, gen_recency_task, train_toy

__version__ = "0.1.0"
