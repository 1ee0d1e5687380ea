"""Command-line entry point: every pipeline stage as a subcommand.

Each run resolves its configuration (preset -> --config file -> --set
overrides -> --seed), writes the resolved snapshot into the output directory,
then executes the stage.  Exit codes: 0 success, 2 config/validation error,
3 missing checkpoint, 4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from gpm import data_io, generation, training
from gpm.config import (
    GPMConfig,
    apply_overrides,
    config_to_text,
    load_config,
    write_kv,
)
from gpm.data_io import Dataset, SyntheticShapeSpec
from gpm.dvae import format_token_line
from gpm.model import select_mask_region
from gpm.runtime import NumericFailure, chamfer_distance_l1, Tensor
from gpm.runtime.gradcheck import TOLERANCE, run_suite

EXIT_CONFIG, EXIT_NOT_READY, EXIT_NUMERIC = 2, 3, 4


def _common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="sets data/model/sample seeds at once")


def _data_args(p: argparse.ArgumentParser, default_synth: str, per_class: int):
    p.add_argument("--synth", default=default_synth,
                   help="comma-separated shape families (torus:R sets the "
                        "minor radius) for a synthetic corpus")
    p.add_argument("--per-class", type=int, default=per_class)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--data", default=None,
                   help="directory of .xyz/.ply files (overrides --synth)")


def resolve_config(args) -> GPMConfig:
    cfg = GPMConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise ValueError(f"config file not found: {args.config}")
        cfg = load_config(args.config, base=cfg)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"data_seed={args.seed}",
                                    f"model_seed={args.seed}",
                                    f"sample_seed={args.seed}"])
    return cfg


def parse_synth_spec(text: str, points: int, noise: float) -> list[SyntheticShapeSpec]:
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            family, radius = part.split(":", 1)
            specs.append(SyntheticShapeSpec(family, point_count=points,
                                            noise_sigma=noise,
                                            minor_radius=float(radius),
                                            name=f"{family}{radius}"))
        else:
            specs.append(SyntheticShapeSpec(part, point_count=points,
                                            noise_sigma=noise))
    if not specs:
        raise ValueError("empty --synth spec")
    return specs


def load_dataset(args, cfg: GPMConfig) -> Dataset:
    if args.data:
        paths = sorted(Path(args.data).glob("*.xyz")) + \
            sorted(Path(args.data).glob("*.ply"))
        if not paths:
            raise ValueError(f"no .xyz/.ply files under {args.data}")
        items = [data_io.DatasetItem(p.stem, data_io.load_cloud(p))
                 for p in paths]
        return Dataset(items)
    specs = parse_synth_spec(args.synth, max(cfg.points_per_cloud, 2048),
                             args.noise)
    return data_io.synth_dataset(specs, args.per_class, seed=cfg.data_seed)


def _out_dir(args, name: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: GPMConfig):
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")


def _load_dvae(path, cfg: GPMConfig):
    if not Path(path).is_file():
        raise FileNotFoundError(f"tokenizer checkpoint not found: {path}")
    model = training.build_dvae(cfg)
    training.load_model_checkpoint(path, model)
    model.eval()
    return model


def _load_gpm(path, cfg: GPMConfig):
    if not Path(path).is_file():
        raise FileNotFoundError(f"transformer checkpoint not found: {path}")
    model = training.build_gpm(cfg)
    training.load_model_checkpoint(path, model)
    model.eval()
    return model


def _cloud_from_args(args, cfg: GPMConfig) -> np.ndarray:
    if args.cloud:
        raw = data_io.load_cloud(args.cloud)
    else:
        dataset = load_dataset(args, cfg)
        raw = dataset.items[args.index % len(dataset)].cloud
    cloud = data_io.normalize_unit_sphere(raw)
    return data_io.sample_n(cloud, cfg.points_per_cloud, seed=cfg.data_seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_dvae(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "train-dvae")
    _snapshot(out, cfg)
    dataset = load_dataset(args, cfg)
    model, records = training.train_dvae(cfg, dataset, out_dir=out,
                                         resume_from=args.resume)
    if not records:
        print("checkpoint is already at the final step; nothing to do")
        return 0
    first, last = records[0], records[-1]
    write_kv(out / "metrics.txt", {
        "step0_chamfer": f"{first.chamfer:.6f}",
        "final_chamfer": f"{last.chamfer:.6f}",
        "final_loss": f"{last.loss:.6f}",
        "steps": len(records),
    })
    print(f"tokenizer trained: chamfer {first.chamfer:.4f} -> {last.chamfer:.4f} "
          f"({out / 'dvae.ckpt'})")
    return 0


def cmd_train_gpm(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "train-gpm")
    _snapshot(out, cfg)
    dataset = load_dataset(args, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    model, records = training.train_gpm(cfg, dataset, dvae, out_dir=out,
                                        resume_from=args.resume)
    if not records:
        print("checkpoint is already at the final step; nothing to do")
        return 0
    first, last = records[0], records[-1]
    write_kv(out / "metrics.txt", {
        "step0_loss": f"{first.loss:.6f}",
        "final_loss": f"{last.loss:.6f}",
        "final_ae": f"{last.ae:.6f}",
        "final_ar": f"{last.ar:.6f}",
        "steps": len(records),
    })
    print(f"transformer trained: loss {first.loss:.4f} -> {last.loss:.4f} "
          f"({out / 'gpm.ckpt'})")
    return 0


def cmd_tokenize(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "tokenize")
    _snapshot(out, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    dataset = load_dataset(args, cfg) if not args.cloud else Dataset(
        [data_io.DatasetItem(Path(args.cloud).stem,
                             data_io.load_cloud(args.cloud))])
    lines = []
    for i, item in enumerate(dataset.items):
        cloud = data_io.sample_n(data_io.normalize_unit_sphere(item.cloud),
                                 cfg.points_per_cloud,
                                 seed=training.cloud_seed(cfg.data_seed, i, 1))
        seq, _ = dvae.tokenize(cloud, cfg.num_patches, cfg.patch_points,
                               seed=training.cloud_seed(cfg.data_seed, i, 2))
        lines.append(format_token_line(item.cloud_id, seq.tokens))
    (out / "tokens.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} token lines to {out / 'tokens.txt'}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "reconstruct")
    _snapshot(out, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    cloud = _cloud_from_args(args, cfg)
    recon, _, _ = generation.dvae_reconstruction(
        dvae, cloud, cfg.num_patches, cfg.patch_points, seed=cfg.data_seed)
    data_io.write_cloud(out / "recon.xyz", recon)
    data_io.write_svg_projections(recon, out / "recon.svg")
    cd = float(chamfer_distance_l1(Tensor(recon), Tensor(cloud)).data)
    write_kv(out / "metrics.txt", {"chamfer": f"{cd:.6f}"})
    print(f"reconstruction chamfer {cd:.4f} -> {out / 'recon.xyz'}")
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "generate")
    _snapshot(out, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    gpm = _load_gpm(args.gpm, cfg)
    policy = generation.SamplingPolicy(args.policy, k=args.top_k,
                                       temperature=args.temperature,
                                       seed=cfg.sample_seed)
    metrics = {}
    if args.unconditional:
        centers = generation.unit_sphere_centers(cfg.num_patches,
                                                 seed=cfg.data_seed)
        _, cloud_out, trace = generation.generate_unconditional(
            centers, policy, dvae, gpm)
    else:
        cloud = _cloud_from_args(args, cfg)
        rng = np.random.default_rng(cfg.sample_seed)
        ratio = (args.mask_ratio, args.mask_ratio) if args.mask_ratio \
            else cfg.mask_ratio_range
        _, patch_set = dvae.tokenize(cloud, cfg.num_patches, cfg.patch_points,
                                     seed=cfg.data_seed)
        mask_set = select_mask_region(patch_set.centers, ratio, rng)
        _, cloud_out, trace = generation.generate_masked_region(
            cloud, mask_set, policy, dvae, gpm, cfg.num_patches,
            cfg.patch_points, fps_seed=cfg.data_seed)
        cd = float(chamfer_distance_l1(Tensor(cloud_out), Tensor(cloud)).data)
        recon, _, _ = generation.dvae_reconstruction(
            dvae, cloud, cfg.num_patches, cfg.patch_points, seed=cfg.data_seed)
        cd_ref = float(chamfer_distance_l1(Tensor(recon), Tensor(cloud)).data)
        metrics.update({"chamfer_to_input": f"{cd:.6f}",
                        "reconstruction_chamfer": f"{cd_ref:.6f}",
                        "masked_patches": len(mask_set)})
    data_io.write_cloud(out / "generated.xyz", cloud_out)
    data_io.write_svg_projections(cloud_out, out / "generated.svg")
    generation.write_token_trace(out / "trace.txt", trace)
    metrics["sampled_tokens"] = len(trace)
    write_kv(out / "metrics.txt", metrics)
    print(f"generated {cloud_out.shape[0]} points -> {out / 'generated.xyz'}")
    return 0


def cmd_classify(args) -> int:
    from gpm.downstream import finetune_classifier

    cfg = resolve_config(args)
    out = _out_dir(args, "classify")
    _snapshot(out, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    gpm = _load_gpm(args.gpm, cfg)
    specs = parse_synth_spec(args.synth, max(cfg.points_per_cloud, 2048),
                             args.noise)
    train_set = data_io.synth_dataset(specs, args.train_per_class,
                                      seed=cfg.data_seed)
    test_set = data_io.synth_dataset(specs, args.test_per_class,
                                     seed=cfg.data_seed + 1)
    _, _, metrics = finetune_classifier(
        gpm, dvae, cfg, train_set, test_set, steps=args.steps,
        batch=args.batch, seed=cfg.model_seed)
    write_kv(out / "metrics.txt", {
        "baseline_test_accuracy": f"{metrics['baseline_test_accuracy']:.4f}",
        "train_accuracy": f"{metrics['train_accuracy']:.4f}",
        "test_accuracy": f"{metrics['test_accuracy']:.4f}",
        "steps": metrics["steps"],
    })
    print(f"classification accuracy {metrics['test_accuracy']:.4f} "
          f"(baseline {metrics['baseline_test_accuracy']:.4f})")
    return 0


def cmd_few_shot(args) -> int:
    from gpm.downstream import few_shot_eval

    cfg = resolve_config(args)
    out = _out_dir(args, "few-shot")
    _snapshot(out, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    gpm = _load_gpm(args.gpm, cfg)
    specs = parse_synth_spec(args.synth, max(cfg.points_per_cloud, 2048),
                             args.noise)
    dataset = data_io.synth_dataset(specs, args.per_class, seed=cfg.data_seed)
    report = few_shot_eval(gpm, dvae, cfg, dataset, way=args.way,
                           shot=args.shot, runs=args.runs, steps=args.steps,
                           seed=cfg.sample_seed)
    pairs = {
        "mean_accuracy": f"{report['mean_accuracy']:.4f}",
        "std_accuracy": f"{report['std_accuracy']:.4f}",
        "way": report["way"], "shot": report["shot"], "runs": report["runs"],
    }
    for i, acc in enumerate(report["run_accuracies"]):
        pairs[f"run_{i}_accuracy"] = f"{acc:.4f}"
    write_kv(out / "metrics.txt", pairs)
    print(f"few-shot {args.way}-way {args.shot}-shot: "
          f"{report['mean_accuracy']:.4f} +/- {report['std_accuracy']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "ablate")
    _snapshot(out, cfg)
    dataset = load_dataset(args, cfg)
    dvae = _load_dvae(args.dvae, cfg)
    prepared = training.prepare_clouds(dataset, cfg)
    frozen = training.precompute_tokens(dvae, prepared)
    rows = []
    for w_ar, tag_loss in ((0.0, "ae_only"), (1.0, "ae_plus_ar")):
        for order in ("ab", "ba"):
            run_cfg = apply_overrides(cfg, [f"w_ar={w_ar}",
                                            f"segment_order={order}",
                                            f"gpm_steps={args.steps}"])
            model, records = training.train_gpm(run_cfg, dataset, dvae,
                                                prepared=prepared, frozen=frozen)
            eval_loss = training.eval_gpm_loss(model, run_cfg, prepared, frozen)
            rows.append((tag_loss, order, records[0].loss, records[-1].loss,
                         eval_loss))
    lines = ["objective\torder\tstep0_loss\tfinal_loss\teval_loss"]
    for tag, order, l0, lf, le in rows:
        lines.append(f"{tag}\t{order}\t{l0:.6f}\t{lf:.6f}\t{le:.6f}")
    (out / "ablate.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed if args.seed is not None else 0)
    worst = max(err for _, err in results)
    width = max(len(name) for name, _ in results)
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{status:4s} {name:{width}s} {err:.3e}")
    print(f"max relative error {worst:.3e} over {len(results)} cases")
    if args.out:
        out = _out_dir(args, "gradcheck")
        write_kv(out / "metrics.txt",
                 {name: f"{err:.3e}" for name, err in results} |
                 {"max_relative_error": f"{worst:.3e}"})
    return 0 if worst < TOLERANCE else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpm",
        description="two-stage point-cloud tokenizer + dual-objective "
                    "transformer pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-dvae", help="stage 1: train the patch tokenizer")
    _common_args(p)
    _data_args(p, "sphere,cube,torus,cone", 2)
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="continue from a training checkpoint")
    p.set_defaults(fn=cmd_train_dvae)

    p = sub.add_parser("train-gpm", help="stage 2: train the transformer")
    _common_args(p)
    _data_args(p, "sphere,cube,torus,cone", 4)
    p.add_argument("--dvae", required=True, help="stage-1 checkpoint")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="continue from a training checkpoint")
    p.set_defaults(fn=cmd_train_gpm)

    p = sub.add_parser("tokenize", help="dump hard token sequences")
    _common_args(p)
    _data_args(p, "sphere,cube", 1)
    p.add_argument("--dvae", required=True)
    p.add_argument("--cloud", default=None, help="single .xyz/.ply file")
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("reconstruct", help="tokenizer round-trip of one cloud")
    _common_args(p)
    _data_args(p, "sphere", 1)
    p.add_argument("--dvae", required=True)
    p.add_argument("--cloud", default=None)
    p.add_argument("--index", type=int, default=0,
                   help="corpus index when no --cloud is given")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("generate", help="autoregressive generation")
    _common_args(p)
    _data_args(p, "sphere", 1)
    p.add_argument("--dvae", required=True)
    p.add_argument("--gpm", required=True)
    p.add_argument("--cloud", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--policy", default="top_k",
                   choices=("greedy", "top_k", "temperature"))
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("classify", help="fine-tune and score a classifier")
    _common_args(p)
    _data_args(p, "sphere,cube,torus", 100)
    p.add_argument("--dvae", required=True)
    p.add_argument("--gpm", required=True)
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("few-shot", help="episodic few-shot evaluation")
    _common_args(p)
    _data_args(p, "sphere,cube,cylinder,torus,cone,torus:0.15", 30)
    p.add_argument("--dvae", required=True)
    p.add_argument("--gpm", required=True)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=10)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(fn=cmd_few_shot)

    p = sub.add_parser("ablate", help="objective x segment-order grid")
    _common_args(p)
    _data_args(p, "sphere,cube,torus,cone", 4)
    p.add_argument("--dvae", required=True)
    p.add_argument("--steps", type=int, default=200,
                   help="transformer steps per grid cell")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common_args(p)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"not ready: {e}", file=sys.stderr)
        return EXIT_NOT_READY
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
