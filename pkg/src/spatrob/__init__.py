"""spatrob: attack and defend small convolutional classifiers with
rotations and translations.

The lab pairs a differentiable rotation-translation warp with a compact
trainable CNN, a family of spatial and pixel-space adversaries, defenses
(augmented and worst-of-k robust training, majority-vote inference), and an
evaluation harness that exports accuracy reports and fooling analyses.
"""

from .attacks import (
    AttackOutcome,
    LinfConfig,
    combined_attack,
    grid_attack,
    grid_profile,
    linf_pgd,
    spatial_fo_attack,
    worst_of_k,
)
from .data_io import (
    Dataset,
    load_checkpoint,
    load_idx,
    read_checkpoint_manifest,
    save_checkpoint,
    subset,
)
from .defenses import (
    AugmentPolicy,
    augment_example,
    default_vote_space,
    evaluate_with_vote,
    majority_vote_predict,
    train,
)
from .estimator import RobustImageClassifier
from .harness import (
    AdversarySpec,
    EvalReport,
    FooledDecomposition,
    LandscapeResult,
    count_interior_local_maxima,
    decompose_fooled,
    evaluate,
    evaluate_full,
    export_report,
    fooling_angle_map,
    fooling_fraction_cdf,
    loss_landscape,
    natural_accuracy,
    run_adversary,
)
from .network import (
    LayerSpec,
    Network,
    TrainConfig,
    backward,
    build_mnist_net,
    cross_entropy,
    forward,
    predict,
    sgd_step,
    softmax,
)
from .warp import (
    AttackSpace,
    TransformParams,
    apply_transform,
    black_canvas_pad,
    sufficient_pad,
    transform_vjp,
    warp_batch,
)

__version__ = "0.1.0"
