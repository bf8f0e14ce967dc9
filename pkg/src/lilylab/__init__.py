"""Desk-scale laboratory for interconnected low-rank adaptation.

Low-rank adapters come in two flavors here: a plain per-layer LoRA
baseline and "Lily" adapters, where down-projectors are shared across
layer groups, a model-wide bank of up-projector experts is mixed by
data-dependent routers, and the mixture is applied as one merged matrix.
The package bundles the dense linear algebra, a reverse-mode tape, a toy
transformer encoder, a training loop over synthetic tasks, and the
measurement tools (rank of accumulated weight updates, router
selectivity, FLOPs accounting) used to check the mechanism's claims.
"""

import os

# LILY_THREADS caps internal parallelism (default 1) so timings and
# gradient reductions are deterministic. Must be set before numpy first
# loads its BLAS; harmless no-op if numpy is already imported.
_threads = os.environ.get("LILY_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .adapters import (LilyAdapterSet, LilyConfig, LoraAdapter, LoraConfig,  # noqa: E402
                       RouteWeights, combine_experts, combine_experts_naive,
                       down_project, effective_delta_w, init_adapters,
                       init_lora, layer_group, lily_forward, lily_param_count,
                       lora_forward, lora_param_count, parse_placement, route)
from .encoder import (AdapterBundle, EncoderConfig, EncoderModel,  # noqa: E402
                      build_encoder, forward_with_features, frozen_bundle,
                      inject)
from .linalg import (Spectrum, matmul, numerical_rank, seeded_gaussian,  # noqa: E402
                     softmax_stable, svd_spectrum)
from .tape import (GradCheckReport, Tape, backward, finite_diff_grad,  # noqa: E402
                   grad_check, record_forward)
from .training import (OptimizerConfig, SyntheticTask, TrainTrace,  # noqa: E402
                       make_task, step, train)
