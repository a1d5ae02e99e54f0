"""Moment probing of frozen backbone features.

Linear probing classifies a single first-order statistic of the token
features; the fused head here adds an efficient second-order branch
(adjacent-head cross-covariances aggregated by small strided
convolutions) and sums both branches' logits. A toy frozen transformer
plus input-conditioned scale/shift recalibration makes the joint
variant trainable at desk scale, all on a small reverse-mode autodiff
engine.
"""

from .backbone import (BackboneWeights, PSRPParams, SSFParams, ToyBackboneConfig,
                       backbone_forward, build_backbone, init_psrp, init_ssf,
                       mp_plus_forward, psrp_apply, psrp_compute, ssf_apply)
from .data import (FeatureDataset, FeatureFileHeader, SynthSpec, batch_iter,
                   read_feature_file, split_train_val, synth_generate,
                   write_feature_file)
from .errors import (ConfigError, DataError, DimensionError, InputError,
                     MomentProbeError, NumericError, UsageError)
from .head import (MHC3Config, MPHeadParams, TokenFeatures, bcnn_signed_sqrt,
                   count_params, count_params_closed_form, cross_cov_adjacent,
                   first_moment, gcp_forward, init_mp_head, isqrt_cov, lp_forward,
                   lra, mhc3, mp_branch_logits, mp_forward, reduce_dim, split_heads)
from .optim import AdamW, Schedule, linear_scale_lr, lr_at
from .tensor import (Tape, Value, backward, conv2d, finite_diff_check,
                     frobenius_normalize, gelu, layer_norm, matmul, relu,
                     softmax_cross_entropy)
from .train import (RunConfig, RunReport, build_probe_head, evaluate,
                    load_checkpoint, restore_mpplus, restore_probe_head,
                    save_checkpoint, train_mpplus_run, train_probe_run)

__version__ = "0.1.0"
