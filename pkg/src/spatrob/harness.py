"""Evaluation harness: accuracy reports, fooling analyses, and exports.

Per-example work is seed-isolated (seed = base_seed + example index) and
reduced in example order, so results are identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

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
from .data_io import Dataset
from .network import cross_entropy, predict
from .validation import check_label
from .warp import AttackSpace, TransformParams, apply_transform

__all__ = [
    "AdversarySpec",
    "EvalReport",
    "FooledDecomposition",
    "LandscapeResult",
    "evaluate",
    "evaluate_full",
    "run_adversary",
    "natural_accuracy",
    "decompose_fooled",
    "fooling_angle_map",
    "fooling_fraction_cdf",
    "loss_landscape",
    "count_interior_local_maxima",
    "export_report",
]

ADVERSARY_KINDS = ("natural", "random", "worst_of_k", "fo", "grid", "linf", "combined")

REPORT_COLUMNS = (
    "natural",
    "random",
    "worst_of_10",
    "fo",
    "grid",
    "trans_grid",
    "rot_grid",
    "random_trans",
    "random_rot",
)


@dataclass(frozen=True)
class AdversarySpec:
    """Names an adversary plus its search space and knobs.

    Translation-only and rotation-only variants are the same adversaries
    run on a space with the other axis bounds zeroed.
    """

    kind: str = "grid"
    space: AttackSpace = AttackSpace(3.0, 30.0, 5, 31)
    k: int = 10
    steps: int = 200
    step_frac: float = 0.01
    restarts: int = 1
    linf: LinfConfig | None = None
    mode: str = "grid"
    early_exit: bool = False

    def __post_init__(self):
        if self.kind not in ADVERSARY_KINDS:
            raise ValueError(f"kind must be one of {ADVERSARY_KINDS}, got {self.kind!r}")
        if self.kind in ("linf", "combined") and self.linf is None:
            raise ValueError(f"adversary {self.kind!r} requires a LinfConfig")

    def column(self) -> str:
        """Report column this spec fills."""
        trans_only = self.space.max_rot == 0
        rot_only = self.space.max_trans == 0
        if self.kind == "grid" and trans_only:
            return "trans_grid"
        if self.kind == "grid" and rot_only:
            return "rot_grid"
        if self.kind == "random" and trans_only:
            return "random_trans"
        if self.kind == "random" and rot_only:
            return "random_rot"
        if self.kind == "worst_of_k":
            return f"worst_of_{self.k}"
        return self.kind


@dataclass
class EvalReport:
    """Accuracies (percent) of one model under the standard adversary suite."""

    model_id: str = ""
    example_count: int = 0
    base_seed: int = 0
    wall_clock_sec: float = 0.0
    natural: float | None = None
    random: float | None = None
    worst_of_10: float | None = None
    fo: float | None = None
    grid: float | None = None
    trans_grid: float | None = None
    rot_grid: float | None = None
    random_trans: float | None = None
    random_rot: float | None = None
    natural_vote: float | None = None
    grid_vote: float | None = None

    def __post_init__(self):
        for name in REPORT_COLUMNS + ("natural_vote", "grid_vote"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} accuracy must be in [0, 100], got {v}")

    def merged(self, other: "EvalReport") -> "EvalReport":
        out = dataclasses.replace(self)
        out.wall_clock_sec = self.wall_clock_sec + other.wall_clock_sec
        out.example_count = max(self.example_count, other.example_count)
        for name in REPORT_COLUMNS + ("natural_vote", "grid_vote"):
            v = getattr(other, name)
            if v is not None:
                setattr(out, name, v)
        return out

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        for k, v in rec.items():
            if isinstance(v, float):
                rec[k] = float(f"{v:.6g}")
        return rec


def _attack_one(net, spec: AdversarySpec, image, label, seed) -> AttackOutcome:
    if spec.kind == "random":
        return worst_of_k(net, image, label, spec.space, k=1, rng_seed=seed)
    if spec.kind == "worst_of_k":
        return worst_of_k(net, image, label, spec.space, k=spec.k, rng_seed=seed)
    if spec.kind == "fo":
        return spatial_fo_attack(
            net, image, label, spec.space,
            steps=spec.steps, step_frac=spec.step_frac,
            rng_seed=seed, restarts=spec.restarts,
        )
    if spec.kind == "grid":
        return grid_attack(net, image, label, spec.space, early_exit=spec.early_exit)
    if spec.kind == "linf":
        adv = linf_pgd(net, image, label, spec.linf, rng_seed=seed)
        logits = net.logits(adv)
        pred = int(np.argmax(logits))
        return AttackOutcome(
            fooled=pred != label,
            best_params=TransformParams(0.0, 0.0, 0.0),
            best_loss=cross_entropy(logits, label),
            adversarial_prediction=pred,
            queries_used=spec.linf.steps + 1,
            adversarial_image=adv,
        )
    if spec.kind == "combined":
        return combined_attack(
            net, image, label, spec.space, spec.linf,
            mode=spec.mode, rng_seed=seed, early_exit=spec.early_exit,
        )
    raise ValueError(f"cannot run adversary kind {spec.kind!r}")


def run_adversary(net, dataset: Dataset, spec: AdversarySpec, base_seed: int = 0, workers: int = 1):
    """Attack every example; returns outcomes in dataset order."""
    if spec.kind == "natural":
        raise ValueError("'natural' is not an attack; use natural_accuracy")

    def work(i):
        return _attack_one(
            net, spec, dataset.images[i], int(dataset.labels[i]), base_seed + i
        )

    indices = range(len(dataset))
    if workers <= 1:
        return [work(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, indices))


def natural_accuracy(net, dataset: Dataset) -> float:
    hits = sum(predict(net, dataset.images[i]) == dataset.labels[i] for i in range(len(dataset)))
    return 100.0 * hits / len(dataset)


def evaluate(
    net,
    dataset: Dataset,
    adversary_spec: AdversarySpec,
    base_seed: int = 0,
    workers: int = 1,
    model_id: str = "",
) -> EvalReport:
    """Accuracy of the model under one adversary, as an EvalReport."""
    t0 = time.monotonic()
    report = EvalReport(
        model_id=model_id, example_count=len(dataset), base_seed=base_seed
    )
    if adversary_spec.kind == "natural":
        acc = natural_accuracy(net, dataset)
        column = "natural"
    else:
        outcomes = run_adversary(net, dataset, adversary_spec, base_seed, workers)
        acc = 100.0 * sum(not o.fooled for o in outcomes) / len(outcomes)
        column = adversary_spec.column()
    if not hasattr(report, column):
        raise ValueError(f"spec does not map to a report column: {column}")
    setattr(report, column, acc)
    report.wall_clock_sec = time.monotonic() - t0
    return report


def full_suite_specs(space: AttackSpace) -> list[AdversarySpec]:
    """The nine-column adversary suite over one attack space."""
    t_only = space.translation_only()
    r_only = space.rotation_only()
    return [
        AdversarySpec(kind="natural", space=space),
        AdversarySpec(kind="random", space=space),
        AdversarySpec(kind="worst_of_k", space=space, k=10),
        AdversarySpec(kind="fo", space=space),
        AdversarySpec(kind="grid", space=space),
        AdversarySpec(kind="grid", space=t_only),
        AdversarySpec(kind="grid", space=r_only),
        AdversarySpec(kind="random", space=t_only),
        AdversarySpec(kind="random", space=r_only),
    ]


def evaluate_full(
    net,
    dataset: Dataset,
    space: AttackSpace,
    base_seed: int = 0,
    workers: int = 1,
    model_id: str = "",
) -> EvalReport:
    """All nine report columns (natural, random/grid variants, worst-of-10, fo)."""
    report = EvalReport(model_id=model_id, example_count=len(dataset), base_seed=base_seed)
    for spec in full_suite_specs(space):
        report = report.merged(
            evaluate(net, dataset, spec, base_seed, workers, model_id)
        )
    return report


@dataclass
class FooledDecomposition:
    """How correctly-classified examples get fooled: one axis, either, or
    only by combining axes. Counts satisfy exact set algebra."""

    considered: int
    fooled_rotation: int
    fooled_translation: int
    fooled_any: int
    only_rotation: int
    only_translation: int
    fooled_combined: int
    both: int

    def check_invariants(self):
        intersection = self.fooled_rotation + self.fooled_translation - self.fooled_any
        assert self.only_rotation + self.only_translation + intersection == self.fooled_any
        assert self.both == self.fooled_combined - self.fooled_any
        assert 0 <= self.fooled_any <= self.considered
        assert self.both >= 0


def decompose_fooled(net, dataset: Dataset, space: AttackSpace) -> FooledDecomposition:
    """Split grid-fooled examples by which transform family fools them.

    All three fooled sets are read off one combined-grid profile (the pure
    rotation and pure translation points are grid points of the full box),
    which makes the set relations exact by construction.
    """
    grid = space.grid_params()
    rot_rows = (grid[:, 0] == 0) & (grid[:, 1] == 0)
    trans_rows = grid[:, 2] == 0
    considered = 0
    f_rot = f_trans = f_any = f_comb = only_r = only_t = 0
    for i in range(len(dataset)):
        image, label = dataset.images[i], int(dataset.labels[i])
        if predict(net, image) != label:
            continue
        considered += 1
        _, _, preds = grid_profile(net, image, label, space)
        mis = preds != label
        rot = bool(mis[rot_rows].any())
        trans = bool(mis[trans_rows].any())
        comb = bool(mis.any())
        f_rot += rot
        f_trans += trans
        f_any += rot or trans
        f_comb += comb
        only_r += rot and not trans
        only_t += trans and not rot
    out = FooledDecomposition(
        considered=considered,
        fooled_rotation=f_rot,
        fooled_translation=f_trans,
        fooled_any=f_any,
        only_rotation=only_r,
        only_translation=only_t,
        fooled_combined=f_comb,
        both=f_comb - f_any,
    )
    out.check_invariants()
    return out


def fooling_angle_map(net, dataset: Dataset, space: AttackSpace):
    """Per-example misclassification across the pure-rotation grid.

    Returns (angles, fooled_matrix, nonconvex_flags): fooled_matrix[i, j] is
    true iff example i is misclassified at rotation angles[j]; a row is
    flagged non-convex when a non-fooling angle sits strictly between two
    fooling ones.
    """
    rot_space = space.rotation_only()
    angles = rot_space.rot_values()
    rows = np.zeros((len(dataset), len(angles)), dtype=bool)
    nonconvex = np.zeros(len(dataset), dtype=bool)
    for i in range(len(dataset)):
        label = int(dataset.labels[i])
        _, _, preds = grid_profile(net, dataset.images[i], label, rot_space)
        row = preds != label
        rows[i] = row
        if row.any():
            lo, hi = np.flatnonzero(row)[[0, -1]]
            nonconvex[i] = not row[lo : hi + 1].all()
    return angles, rows, nonconvex


def fooling_fraction_cdf(net, dataset: Dataset, space: AttackSpace, p_step: float = 0.01):
    """Complementary CDF of per-example fooling fractions over the grid.

    For each correctly-classified example, the fraction of grid points that
    fool it; output pairs (p, share of examples fooled by at least p).
    """
    fractions = []
    for i in range(len(dataset)):
        image, label = dataset.images[i], int(dataset.labels[i])
        if predict(net, image) != label:
            continue
        _, _, preds = grid_profile(net, image, label, space)
        fractions.append(float(np.mean(preds != label)))
    fractions = np.array(fractions)
    ps = np.arange(0.0, 1.0 + p_step / 2, p_step)
    if len(fractions) == 0:
        return [(float(p), 0.0) for p in ps]
    return [(float(p), float(np.mean(fractions >= p))) for p in ps]


@dataclass
class LandscapeResult:
    """Cross-entropy over a (translation, rotation) slice at dv = 0."""

    du_values: np.ndarray
    theta_values: np.ndarray
    losses: np.ndarray  # shape (len(du_values), len(theta_values))


def loss_landscape(
    net,
    image,
    label: int,
    n_trans: int = 21,
    n_rot: int = 31,
    space: AttackSpace | None = None,
) -> LandscapeResult:
    """Loss at every (du, theta) pair with dv = 0.

    Each entry is a direct single-point evaluation, so values agree exactly
    with any other single-point evaluation of the same transform.
    """
    if space is None:
        space = AttackSpace(3.0, 30.0, 5, 31)
    label = check_label(label, net.num_classes)
    du_values = np.linspace(-space.max_trans, space.max_trans, n_trans)
    theta_values = np.linspace(-space.max_rot, space.max_rot, n_rot)
    losses = np.empty((n_trans, n_rot))
    for i, du in enumerate(du_values):
        for j, th in enumerate(theta_values):
            warped = apply_transform(image, TransformParams(float(du), 0.0, float(th)))
            losses[i, j] = cross_entropy(net.logits(warped), label)
    return LandscapeResult(du_values, theta_values, losses)


def count_interior_local_maxima(losses: np.ndarray) -> int:
    """Strict local maxima over the 8-neighborhood, interior cells only."""
    m = np.asarray(losses)
    if m.shape[0] < 3 or m.shape[1] < 3:
        return 0
    center = m[1:-1, 1:-1]
    strict = np.ones(center.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neighbor = m[1 + di : m.shape[0] - 1 + di, 1 + dj : m.shape[1] - 1 + dj]
            strict &= center > neighbor
    return int(strict.sum())


def _fmt(v) -> str:
    return f"{float(v):.6g}"


def export_report(obj, path, format: str = "json") -> None:
    """Write an EvalReport, FooledDecomposition, or LandscapeResult.

    CSV output carries a header row; landscape CSVs hold (du, theta, loss)
    in row-major order with 6-significant-digit floats. Bytes are
    deterministic for identical inputs.
    """
    if format not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    if isinstance(obj, LandscapeResult):
        if format != "csv":
            raise ValueError("landscapes export as CSV")
        lines = ["du,theta,loss"]
        for i, du in enumerate(obj.du_values):
            for j, th in enumerate(obj.theta_values):
                lines.append(f"{_fmt(du)},{_fmt(th)},{_fmt(obj.losses[i, j])}")
        text = "\n".join(lines) + "\n"
    elif isinstance(obj, EvalReport):
        rec = obj.to_record()
        if format == "json":
            text = json.dumps(rec, sort_keys=True, indent=2) + "\n"
        else:
            keys = sorted(rec)
            row = ",".join("" if rec[k] is None else str(rec[k]) for k in keys)
            text = ",".join(keys) + "\n" + row + "\n"
    elif isinstance(obj, FooledDecomposition):
        if format != "json":
            raise ValueError("decompositions export as JSON")
        text = json.dumps(dataclasses.asdict(obj), sort_keys=True, indent=2) + "\n"
    else:
        raise TypeError(f"cannot export object of type {type(obj).__name__}")
    with open(path, "w", newline="") as f:
        f.write(text)
