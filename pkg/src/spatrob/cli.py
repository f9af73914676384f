"""Command-line front end: train, attack, evaluate, landscape, analyze.

Every run writes its fully resolved configuration to config_echo.json in
the output directory, and all randomness derives from --seed (fallback:
the SPATROB_SEED environment variable), so runs are reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback

import numpy as np

from .attacks import LinfConfig
from .data_io import Dataset, load_checkpoint, load_idx, save_checkpoint, subset
from .defenses import AugmentPolicy, default_vote_space, evaluate_with_vote, train
from .harness import (
    AdversarySpec,
    EvalReport,
    decompose_fooled,
    evaluate,
    export_report,
    fooling_angle_map,
    fooling_fraction_cdf,
    full_suite_specs,
    loss_landscape,
    natural_accuracy,
    run_adversary,
)
from .network import TrainConfig, predict
from .validation import check_label
from .warp import AttackSpace, black_canvas_pad

POLICY_CHOICES = ("none", "aug", "worst-of-k", "linf")
METHOD_CHOICES = ("grid", "worst-of-k", "fo", "linf", "combined")
ADVERSARY_CHOICES = (
    "natural", "random", "worst-of-10", "fo", "grid",
    "trans-grid", "rot-grid", "random-trans", "random-rot",
)


class ConfigError(Exception):
    """A problem with flags or inputs; exits with code 2."""


def _env_seed() -> int:
    try:
        return int(os.environ.get("SPATROB_SEED", "0"))
    except ValueError:
        return 0


def _add_common(p: argparse.ArgumentParser, with_data=True, with_checkpoint=False):
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None,
                   help="base seed (default: SPATROB_SEED env var, else 0)")
    p.add_argument("--workers", type=int, default=1, help="evaluation fan-out")
    if with_data:
        p.add_argument("--images", required=True, help="IDX images file (.gz ok)")
        p.add_argument("--labels", required=True, help="IDX labels file (.gz ok)")
        p.add_argument("--subset", type=int, default=None,
                       help="evaluate/train on a stratified subset of this size")
    if with_checkpoint:
        p.add_argument("--checkpoint", required=True, help="model checkpoint path")


def _add_space(p: argparse.ArgumentParser):
    p.add_argument("--max-trans", type=float, default=3.0, help="translation bound, pixels")
    p.add_argument("--max-rot", type=float, default=30.0, help="rotation bound, degrees")
    p.add_argument("--trans-grid", type=int, default=5, help="grid points per translation axis")
    p.add_argument("--rot-grid", type=int, default=31, help="grid points for rotation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatrob",
        description="Train, attack, and evaluate small convolutional classifiers "
        "under rotation-translation adversaries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model with an augmentation policy")
    _add_common(t)
    _add_space(t)
    t.add_argument("--policy", choices=POLICY_CHOICES, default="none")
    t.add_argument("--k", type=int, default=10, help="samples for worst-of-k policy")
    t.add_argument("--epsilon", type=float, default=0.3, help="linf policy ball radius")
    t.add_argument("--linf-steps", type=int, default=40)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--pad", type=int, default=0, help="zero-pad training images")
    t.add_argument("--init-seed", type=int, default=None)
    t.add_argument("--data-seed", type=int, default=None)
    t.add_argument("--aug-seed", type=int, default=None)

    a = sub.add_parser("attack", help="run one adversary over a dataset")
    _add_common(a, with_checkpoint=True)
    _add_space(a)
    a.add_argument("--method", choices=METHOD_CHOICES, required=True)
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--steps", type=int, default=200, help="first-order ascent steps")
    a.add_argument("--step-frac", type=float, default=0.01)
    a.add_argument("--restarts", type=int, default=1)
    a.add_argument("--epsilon", type=float, default=0.1)
    a.add_argument("--linf-steps", type=int, default=40)
    a.add_argument("--linf-step-size", type=float, default=None)
    a.add_argument("--no-random-start", action="store_true")
    a.add_argument("--mode", choices=("grid", "random"), default="grid",
                   help="combined attack: exhaustive grid or one random warp")
    a.add_argument("--early-exit", action="store_true",
                   help="stop scanning at the first fooling point")
    a.add_argument("--pad", type=int, default=0, help="zero-pad images before attacking")

    e = sub.add_parser("evaluate", help="full adversary suite or one column")
    _add_common(e, with_checkpoint=True)
    _add_space(e)
    e.add_argument("--all-adversaries", action="store_true")
    e.add_argument("--adversary", choices=ADVERSARY_CHOICES, default=None)
    e.add_argument("--vote", action="store_true", help="majority-vote defense columns")
    e.add_argument("--votes", type=int, default=10)
    e.add_argument("--vote-trans", type=float, default=None,
                   help="vote translation bound (default 5%% of image size)")
    e.add_argument("--vote-rot", type=float, default=15.0)
    e.add_argument("--black-canvas", action="store_true",
                   help="zero-pad evaluation images by --pad")
    e.add_argument("--pad", type=int, default=10)

    l = sub.add_parser("landscape", help="per-example (du, theta) loss surfaces")
    _add_common(l, with_checkpoint=True)
    _add_space(l)
    l.add_argument("--examples", type=int, default=4)
    l.add_argument("--n-trans", type=int, default=21)
    l.add_argument("--n-rot", type=int, default=31)

    n = sub.add_parser("analyze", help="fooled-set decomposition, angle maps, CDFs")
    _add_common(n, with_checkpoint=True)
    _add_space(n)
    n.add_argument("--mode", choices=("decompose", "angles", "cdf"), required=True)
    n.add_argument("--examples", type=int, default=50,
                   help="examples for the angle map (others use the whole subset)")
    return parser


def _resolve_seed(args) -> int:
    return args.seed if args.seed is not None else _env_seed()


def _echo_config(args, out_dir: str, extra: dict | None = None):
    rec = {k: v for k, v in vars(args).items() if k != "command"}
    rec["command"] = args.command
    rec["resolved_seed"] = _resolve_seed(args)
    if extra:
        rec.update(extra)
    rec = {k: (v if not isinstance(v, float) else float(f"{v:.6g}")) for k, v in rec.items()}
    with open(os.path.join(out_dir, "config_echo.json"), "w") as f:
        json.dump(rec, f, sort_keys=True, indent=2, default=str)
        f.write("\n")


def _load_dataset(args, pad: int = 0) -> Dataset:
    for flag, path in (("--images", args.images), ("--labels", args.labels)):
        if not os.path.exists(path):
            raise ConfigError(f"{flag}: file not found: {path}")
    data = load_idx(args.images, args.labels)
    if args.subset is not None:
        if args.subset > len(data):
            raise ConfigError(f"--subset: {args.subset} exceeds dataset size {len(data)}")
        data = subset(data, args.subset, _resolve_seed(args))
    if pad:
        images = np.pad(data.images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        data = Dataset(images, data.labels, data.split)
    return data


def _space(args) -> AttackSpace:
    try:
        return AttackSpace(args.max_trans, args.max_rot, args.trans_grid, args.rot_grid)
    except ValueError as err:
        raise ConfigError(f"--max-trans/--max-rot/--trans-grid/--rot-grid: {err}") from err


def cmd_train(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    seed = _resolve_seed(args)
    init_seed = args.init_seed if args.init_seed is not None else seed
    data_seed = args.data_seed if args.data_seed is not None else seed + 1
    aug_seed = args.aug_seed if args.aug_seed is not None else seed + 2
    space = _space(args)
    kind = {"none": "none", "aug": "random", "worst-of-k": "worst_of_k", "linf": "linf_pgd"}[
        args.policy
    ]
    policy = AugmentPolicy(
        kind=kind,
        space=space if kind in ("random", "worst_of_k") else None,
        k=args.k,
        linf=LinfConfig(epsilon=args.epsilon, steps=args.linf_steps)
        if kind == "linf_pgd"
        else None,
        rng_seed=aug_seed,
    )
    config = TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        init_seed=init_seed,
        data_seed=data_seed,
    )
    _echo_config(args, args.out, {"init_seed_resolved": init_seed,
                                  "data_seed_resolved": data_seed,
                                  "aug_seed_resolved": aug_seed})
    data = _load_dataset(args, pad=args.pad)
    rows = []
    net = train(data, policy, config,
                on_epoch=lambda e, acc, loss: rows.append((e, acc, loss)))
    with open(os.path.join(args.out, "training_log.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "natural_accuracy", "mean_loss"])
        w.writerows((e, f"{a:.6g}", f"{l:.6g}") for e, a, l in rows)
    provenance = {
        "policy": args.policy, "k": args.k, "epochs": args.epochs,
        "max_trans": args.max_trans, "max_rot": args.max_rot, "pad": args.pad,
        "seeds": {"init": init_seed, "data": data_seed, "augment": aug_seed},
    }
    save_checkpoint(net, provenance, os.path.join(args.out, "model.ckpt"))
    print(f"checkpoint written to {os.path.join(args.out, 'model.ckpt')}")
    return 0


def _attack_spec(args, space: AttackSpace) -> AdversarySpec:
    linf = LinfConfig(
        epsilon=args.epsilon,
        steps=args.linf_steps,
        step_size=args.linf_step_size,
        random_start=not args.no_random_start,
    )
    kind = {"grid": "grid", "worst-of-k": "worst_of_k", "fo": "fo",
            "linf": "linf", "combined": "combined"}[args.method]
    return AdversarySpec(
        kind=kind, space=space, k=args.k, steps=args.steps,
        step_frac=args.step_frac, restarts=args.restarts,
        linf=linf if kind in ("linf", "combined") else None,
        mode=args.mode, early_exit=args.early_exit,
    )


def cmd_attack(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
    net = load_checkpoint(args.checkpoint)
    space = _space(args)
    spec = _attack_spec(args, space)
    _echo_config(args, args.out)
    data = _load_dataset(args, pad=args.pad)
    seed = _resolve_seed(args)
    outcomes = run_adversary(net, data, spec, base_seed=seed, workers=args.workers)
    with open(os.path.join(args.out, "outcomes.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label", "clean_pred", "fooled",
                    "du", "dv", "theta", "loss", "queries"])
        for i, o in enumerate(outcomes):
            clean = predict(net, data.images[i])
            w.writerow([
                i, int(data.labels[i]), clean, int(o.fooled),
                f"{o.best_params.du:.6g}", f"{o.best_params.dv:.6g}",
                f"{o.best_params.theta:.6g}", f"{o.best_loss:.6g}", o.queries_used,
            ])
    accuracy = 100.0 * sum(not o.fooled for o in outcomes) / len(outcomes)
    summary = {
        "method": args.method,
        "examples": len(outcomes),
        "accuracy": float(f"{accuracy:.6g}"),
        "fooled": sum(o.fooled for o in outcomes),
        "mean_queries": float(f"{np.mean([o.queries_used for o in outcomes]):.6g}"),
        "base_seed": seed,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"accuracy under {args.method}: {accuracy:.2f}%")
    return 0


def cmd_evaluate(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
    if not args.all_adversaries and args.adversary is None and not args.vote:
        raise ConfigError("--all-adversaries, --adversary, or --vote is required")
    net = load_checkpoint(args.checkpoint)
    space = _space(args)
    _echo_config(args, args.out)
    pad = args.pad if args.black_canvas else 0
    data = _load_dataset(args, pad=pad)
    seed = _resolve_seed(args)
    model_id = os.path.basename(args.checkpoint)
    report = EvalReport(model_id=model_id, example_count=len(data), base_seed=seed)
    if args.all_adversaries:
        for spec in full_suite_specs(space):
            report = report.merged(
                evaluate(net, data, spec, seed, args.workers, model_id)
            )
    elif args.adversary is not None:
        spec = _single_adversary_spec(args.adversary, space)
        report = report.merged(evaluate(net, data, spec, seed, args.workers, model_id))
    if args.vote:
        size = data.images.shape[-1]
        vote_trans = args.vote_trans if args.vote_trans is not None else 0.05 * size
        vote_space = AttackSpace(vote_trans, args.vote_rot)
        votes = evaluate_with_vote(
            net, data, space, n_votes=args.votes, vote_space=vote_space, base_seed=seed
        )
        report.natural_vote = votes["natural_vote"]
        report.grid_vote = votes["grid_vote"]
    export_report(report, os.path.join(args.out, "summary.json"), "json")
    export_report(report, os.path.join(args.out, "report.csv"), "csv")
    filled = {
        k: v for k, v in report.to_record().items()
        if isinstance(v, float) and k not in ("wall_clock_sec",)
    }
    print(json.dumps(filled, sort_keys=True))
    return 0


def _single_adversary_spec(name: str, space: AttackSpace) -> AdversarySpec:
    table = {
        "natural": AdversarySpec(kind="natural", space=space),
        "random": AdversarySpec(kind="random", space=space),
        "worst-of-10": AdversarySpec(kind="worst_of_k", space=space, k=10),
        "fo": AdversarySpec(kind="fo", space=space),
        "grid": AdversarySpec(kind="grid", space=space),
        "trans-grid": AdversarySpec(kind="grid", space=space.translation_only()),
        "rot-grid": AdversarySpec(kind="grid", space=space.rotation_only()),
        "random-trans": AdversarySpec(kind="random", space=space.translation_only()),
        "random-rot": AdversarySpec(kind="random", space=space.rotation_only()),
    }
    return table[name]


def cmd_landscape(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
    net = load_checkpoint(args.checkpoint)
    space = _space(args)
    _echo_config(args, args.out)
    data = _load_dataset(args)
    n = min(args.examples, len(data))
    for i in range(n):
        res = loss_landscape(
            net, data.images[i], int(data.labels[i]),
            n_trans=args.n_trans, n_rot=args.n_rot, space=space,
        )
        export_report(res, os.path.join(args.out, f"landscape_{i}.csv"), "csv")
    print(f"wrote {n} landscape CSVs to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
    net = load_checkpoint(args.checkpoint)
    space = _space(args)
    _echo_config(args, args.out)
    data = _load_dataset(args)
    if args.mode == "decompose":
        d = decompose_fooled(net, data, space)
        export_report(d, os.path.join(args.out, "decomposition.json"), "json")
        print(f"decomposition over {d.considered} correctly-classified examples written")
    elif args.mode == "angles":
        n = min(args.examples, len(data))
        head = Dataset(data.images[:n], data.labels[:n], data.split)
        angles, rows, flags = fooling_angle_map(net, head, space)
        with open(os.path.join(args.out, "angles.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index"] + [f"{a:.6g}" for a in angles] + ["nonconvex"])
            for i in range(n):
                w.writerow([i] + [int(v) for v in rows[i]] + [int(flags[i])])
        print(f"angle map for {n} examples written ({int(flags.sum())} non-convex rows)")
    else:
        curve = fooling_fraction_cdf(net, data, space)
        with open(os.path.join(args.out, "cdf.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["p", "fraction_fooled_by_at_least_p"])
            w.writerows((f"{p:.6g}", f"{frac:.6g}") for p, frac in curve)
        print("fooling-fraction CCDF written")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "landscape": cmd_landscape,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
