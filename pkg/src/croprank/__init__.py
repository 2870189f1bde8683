"""croprank: composition-aware crop proposal and ranking.

A self-contained pipeline: a small autodiff engine, a patch encoder
with a query decoder whose cross attention is steered by fused
composition heatmaps, Hungarian-matched training with soft and
negative supervision, rank-based accuracy metrics, and a synthetic
dataset with a planted optimal crop for end-to-end verification.
"""

from .assignment import (
    Assignment,
    LossWeights,
    Role,
    TrainExample,
    assign,
    build_cost_matrix,
    empty_cost,
    focal,
    hungarian,
    match_cost,
    normalize_mos,
    select_good,
    train_step,
    training_loss,
)
from .composition import (
    ActivationMap,
    ClassProbabilities,
    CompositionPrior,
    biased_cross_attention,
    compute_cam,
    fuse_cams,
    make_prior,
    resample_to_grid,
    uniform_prior,
)
from .dataio import (
    DatasetRecord,
    SyntheticScene,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    make_scene,
    read_tensor,
    save_checkpoint,
    save_dataset,
    write_tensor,
)
from .decoder import (
    HeadOutputs,
    ModelConfig,
    ModelState,
    Prediction,
    decode,
    encode,
    forward,
    forward_train,
    init_state,
    predict_heads,
)
from .errors import CropError
from .geometry import CropBox, ScoredCrop, from_corners, giou, iou, l1_box, to_corners
from .metrics import EvalExample, MetricsReport, acc_bar_n, acc_k_n, build_report, top_k_predictions, top_n_ground_truths
from .tensor import Tensor, backward, no_grad, sgd_step

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
