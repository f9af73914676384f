"""Training-time and inference-time defenses.

Training augments every example before the gradient step: nothing, one
random warp, the worst of k random warps under the current model, or a
pixel-space PGD perturbation. Inference can aggregate predictions over
random warps (majority vote).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attacks import LinfConfig, linf_pgd
from .data_io import Dataset
from .network import (
    Network,
    TrainConfig,
    build_mnist_net,
    cross_entropy_batch,
    sgd_step,
)
from .validation import as_image, check_label
from .warp import AttackSpace, apply_transform, warp_batch, TransformParams

__all__ = [
    "AugmentPolicy",
    "augment_example",
    "train",
    "majority_vote_predict",
    "evaluate_with_vote",
    "default_vote_space",
]

log = logging.getLogger(__name__)

POLICY_KINDS = ("none", "random", "worst_of_k", "linf_pgd")


@dataclass(frozen=True)
class AugmentPolicy:
    """What happens to each training example before the gradient step."""

    kind: str = "none"
    space: AttackSpace | None = None
    k: int = 10
    linf: LinfConfig | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if self.kind in ("random", "worst_of_k") and self.space is None:
            raise ValueError(f"policy kind {self.kind!r} requires an attack space")
        if self.kind == "worst_of_k" and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.kind == "linf_pgd" and self.linf is None:
            raise ValueError("policy kind 'linf_pgd' requires a LinfConfig")


def _example_rng(policy: AugmentPolicy, step_index: int, example_index: int):
    seq = np.random.SeedSequence([policy.rng_seed, step_index, example_index])
    return np.random.default_rng(seq)


def augment_example(
    net,
    image: np.ndarray,
    label: int,
    policy: AugmentPolicy,
    step_index: int,
    example_index: int = 0,
) -> np.ndarray:
    """One augmented training example, deterministic in
    (policy.rng_seed, step_index, example_index)."""
    image = as_image(image)
    if policy.kind == "none":
        return image
    rng = _example_rng(policy, step_index, example_index)
    if policy.kind == "random":
        params = policy.space.sample_uniform(rng, 1)[0]
        return apply_transform(image, TransformParams.from_array(params))
    if policy.kind == "worst_of_k":
        label = check_label(label, net.num_classes)
        params = policy.space.sample_uniform(rng, policy.k)
        warped = warp_batch(image, params)
        losses = cross_entropy_batch(
            net.logits_batch(warped), np.full(policy.k, label)
        )
        return warped[int(np.argmax(losses))]
    # linf_pgd
    return linf_pgd(net, image, label, policy.linf, rng_seed=rng).astype(
        image.dtype, copy=False
    )


def train(
    dataset: Dataset,
    policy: AugmentPolicy,
    config: TrainConfig,
    on_epoch=None,
    eval_examples: int = 2000,
) -> Network:
    """Minibatch SGD where every example passes through augment_example.

    Logs natural accuracy (on the first ``eval_examples`` training images)
    and the epoch's mean loss; ``on_epoch(epoch, accuracy, mean_loss)`` is
    called with the same numbers when provided. Fully deterministic given
    the config seeds and the policy seed.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    net = build_mnist_net(config.init_seed, dropout=config.dropout)
    step = 0
    n = len(dataset)
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([config.data_seed, epoch])
        ).permutation(n)
        loss_sum, loss_count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = np.stack(
                [
                    augment_example(
                        net,
                        dataset.images[i],
                        int(dataset.labels[i]),
                        policy,
                        step,
                        int(i),
                    )
                    for i in idx
                ]
            )
            dropout_seed = None
            if config.dropout > 0:
                dropout_seed = int(
                    np.random.SeedSequence(
                        [config.init_seed, config.data_seed, step]
                    ).generate_state(1)[0]
                )
            loss, grads = net.loss_and_weight_grads(
                batch, dataset.labels[idx], dropout_seed=dropout_seed
            )
            net = sgd_step(net, grads, config, step)
            loss_sum += loss * len(idx)
            loss_count += len(idx)
            step += 1
        n_eval = min(eval_examples, n)
        preds = np.argmax(net.logits_batch(dataset.images[:n_eval]), axis=1)
        acc = 100.0 * float(np.mean(preds == dataset.labels[:n_eval]))
        mean_loss = loss_sum / loss_count
        log.info("epoch %d: natural accuracy %.2f%%, mean loss %.4f", epoch, acc, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, acc, mean_loss)
    return net


def default_vote_space(image_size: int = 28) -> AttackSpace:
    """Vote transforms: up to 5% of the image size per translation axis, 15 degrees."""
    return AttackSpace(max_trans=0.05 * image_size, max_rot=15.0)


def majority_vote_predict(
    net, image: np.ndarray, n_votes: int = 10, vote_space: AttackSpace | None = None, rng_seed=0
) -> int:
    """Modal prediction over n random warps; ties go to the lowest class."""
    if n_votes < 1:
        raise ValueError(f"n_votes must be >= 1, got {n_votes}")
    image = as_image(image)
    if vote_space is None:
        vote_space = default_vote_space(image.shape[-1])
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    params = vote_space.sample_uniform(rng, n_votes)
    preds = np.argmax(net.logits_batch(warp_batch(image, params)), axis=1)
    return int(np.argmax(np.bincount(preds, minlength=net.num_classes)))


def evaluate_with_vote(
    net,
    dataset: Dataset,
    adversary_space: AttackSpace,
    n_votes: int = 10,
    vote_space: AttackSpace | None = None,
    base_seed: int = 0,
):
    """Natural and grid-attacked accuracy when the defender answers by vote.

    The grid adversary is non-adaptive: it picks its transform against
    plain argmax prediction semantics; the defender then answers the chosen
    (possibly identity) attack image with a majority vote. Per-example vote
    seeds derive from (base_seed, example index, natural/attacked).
    """
    from .attacks import grid_attack  # local import keeps module load light

    natural_hits, attacked_hits = 0, 0
    for i in range(len(dataset)):
        image, label = dataset.images[i], int(dataset.labels[i])
        nat_rng = np.random.default_rng(np.random.SeedSequence([base_seed, i, 0]))
        if (
            majority_vote_predict(net, image, n_votes, vote_space, nat_rng) == label
        ):
            natural_hits += 1
        outcome = grid_attack(net, image, label, adversary_space)
        attacked = apply_transform(image, outcome.best_params)
        att_rng = np.random.default_rng(np.random.SeedSequence([base_seed, i, 1]))
        if (
            majority_vote_predict(net, attacked, n_votes, vote_space, att_rng) == label
        ):
            attacked_hits += 1
    n = len(dataset)
    return {
        "natural_vote": 100.0 * natural_hits / n,
        "grid_vote": 100.0 * attacked_hits / n,
    }
