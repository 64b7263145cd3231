"""Tucker-2 compressed convolutions: factorization, a tiled core-conv
executor, an analytical latency model, tiling and rank selection, and
ADMM low-rank training for a toy CNN."""

__version__ = "0.1.0"

from .tensor import (TuckerFactors, mode_n_matricize, fold, truncated_svd, tucker2_decompose,
                     tucker2_reconstruct, tucker2_project, relative_error)
from .tdct import read_tensor, write_tensor, TensorFileError
from .conv import (ConvShape, TilingConfig, FeatureMap, conv2d_ref, tucker_conv,
                   tiled_core_conv, kernel_to_crsn, crsn_to_kernel, layout_convert)
from .perf import GpuSpec, LatencyEstimate, load_gpu, estimate
from .tiling import (TilingCandidate, enumerate_valid_tilings, select_tiling_analytical,
                     select_tiling_exhaustive)
from .ranks import (LayerDesc, RankPlan, InfeasibleBudget, flops_counts, load_arch,
                    build_rank_latency_table, select_ranks_under_budget)
from .admm import (ToyCnn, TrainConfig, AdmmState, TrainingDiverged, admm_train,
                   forward_backward, make_bar_dataset)
