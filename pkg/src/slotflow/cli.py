"""Command-line experiment driver.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import oracles
from .model import load_checkpoint, save_checkpoint
from .ot_core import SinkhornConfig, marginal_residual, sinkhorn_log
from .rng import substream
from .training import NumericalError, TrainConfig, Trainer, grad_check_full_model


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _load_cfg(args, **extra) -> TrainConfig:
    overrides = dict(seed=args.seed, precision=args.precision, steps=args.steps,
                     ablation=getattr(args, "ablation", None))
    overrides.update(extra)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        return config_mod.load_config(args.config, **overrides)
    return TrainConfig(**overrides)


def cmd_generate_data(args) -> int:
    cfg = _load_cfg(args)
    dataset = data_mod.build_dataset(cfg.seed, cfg.n_identities, cfg.clips_per_identity,
                                     cfg.frames, cfg.height, cfg.width,
                                     latent_target_std=cfg.latent_target_std)
    data_mod.write_dataset(dataset, args.out_dir)
    print(f"wrote {len(dataset.records)} clips to {args.out_dir}")
    return 0


def _train_one(cfg: TrainConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out_dir / "config.ini")
    trainer = Trainer(cfg, metrics_path=out_dir / "metrics.jsonl")
    trainer.train()
    save_checkpoint(trainer.model, out_dir / "checkpoint",
                    extra={"latent_scale": trainer.dataset.latent_scale,
                           "ablation": cfg.ablation, "steps": trainer.step_count})
    losses = [h["loss"] for h in trainer.history]
    summary = {
        "final_loss_mean100": float(np.mean(losses[-100:])),
        "loss_at_100_mean": float(np.mean(losses[80:120])) if len(losses) >= 120 else float(np.mean(losses)),
        "routing": metrics_mod.routing_report(trainer.history),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return trainer, summary


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    try:
        _, summary = _train_one(cfg, Path(args.out_dir))
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=1))
    return 0


def _heldout_dataset(cfg: TrainConfig, n_identities: int = 24):
    return data_mod.build_dataset(cfg.seed, n_identities, cfg.clips_per_identity,
                                  cfg.frames, cfg.height, cfg.width,
                                  latent_target_std=cfg.latent_target_std,
                                  identity_offset=cfg.n_identities)


def _probe_model(model, cfg: TrainConfig, heldout, dtype):
    mode = "shuffled" if cfg.ablation == "shuffled" else "ordered"
    feats, ids = metrics_mod.encode_dataset(model, heldout, step=cfg.decay_steps,
                                            reference_mode=mode, seed=cfg.seed,
                                            dtype=dtype)
    return metrics_mod.identity_probe(feats.reshape(len(feats), -1), ids)


def cmd_eval(args) -> int:
    run_dir = Path(args.out_dir)
    cfg = config_mod.load_config(run_dir / "config.ini")
    from .training import build_model

    model = build_model(cfg)
    load_checkpoint(model, run_dir / "checkpoint")
    model.eval()
    dtype = torch.float64 if cfg.precision == "f64" else torch.float32
    heldout = _heldout_dataset(cfg)
    probe = _probe_model(model, cfg, heldout, dtype)
    gap = metrics_mod.model_identity_gap(model, heldout, n_pairs=args.pairs,
                                         seed=cfg.seed, step=cfg.decay_steps, dtype=dtype)
    history = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    report = {
        "identity_probe_r2": probe["r2"].tolist(),
        "identity_probe_mean_r2": probe["mean_r2"],
        "matched_vs_mismatched": gap.to_record(),
        "routing": metrics_mod.routing_report(history),
    }
    (run_dir / "eval.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report, indent=1))
    return 0


def cmd_ablate(args) -> int:
    modes = [args.ablation] if args.ablation else ["full", "conv_pool", "shuffled"]
    out_root = Path(args.out_dir)
    results = {}
    for mode in modes:
        cfg = _load_cfg(args, ablation=mode)
        try:
            trainer, summary = _train_one(cfg, out_root / mode)
        except NumericalError as exc:
            print(f"numerical failure in {mode}: {exc}", file=sys.stderr)
            return 2
        dtype = torch.float64 if cfg.precision == "f64" else torch.float32
        heldout = _heldout_dataset(cfg)
        probe = _probe_model(trainer.model, cfg, heldout, dtype)
        results[mode] = {
            "summary": summary,
            "probe_r2": probe["r2"].tolist(),
            "probe_mean_r2": probe["mean_r2"],
            "probe_motion_dims_r2": float(np.mean(probe["r2"][-2:])),
        }
    (out_root / "ablate.json").write_text(json.dumps(results, indent=1))
    print(json.dumps({m: r["probe_motion_dims_r2"] for m, r in results.items()}, indent=1))
    return 0


def cmd_sinkhorn_bench(args) -> int:
    rng = substream(args.seed or 0, "sinkhorn-bench")
    cfg = SinkhornConfig(n_iters=50)
    worst_oracle = 0.0
    for _ in range(50):
        S, L = int(rng.integers(2, 5)), int(rng.integers(2, 7))
        logits = torch.tensor(rng.uniform(-5, 5, (1, S, L)))
        P = torch.exp(sinkhorn_log(logits, cfg))[0].numpy()
        ref = oracles.entropic_ot_oracle(logits[0].numpy(), cfg.n_iters)
        worst_oracle = max(worst_oracle, float(np.abs(P - ref.astype(float)).max()))
    cfg100 = SinkhornConfig(n_iters=100)
    logits = torch.tensor(rng.uniform(-5, 5, (8, 5, 11)))
    resid = float(marginal_residual(torch.exp(sinkhorn_log(logits, cfg100))).max())
    sharp_ok = 0
    for _ in range(20):
        cost = rng.uniform(0, 1, (4, 4))
        while (oracles.min_entry_margin(-cost) < 0.1
               or oracles.assignment_limit_gap(cost, 0.01) > 2e-4):
            cost = rng.uniform(0, 1, (4, 4))
        perm, _ = oracles.assignment_oracle(-cost)  # maximize score
        target = np.zeros((4, 4))
        target[np.arange(4), perm] = 0.25
        P = torch.exp(sinkhorn_log(torch.tensor(cost[None] / 0.01),
                                   SinkhornConfig(tau_end=0.01, n_iters=5000)))[0].numpy()
        if np.abs(4 * P - 4 * target).max() <= 1e-3:
            sharp_ok += 1
    report = {"oracle_linf": worst_oracle, "marginal_residual_100": resid,
              "assignment_matches": f"{sharp_ok}/20"}
    print(json.dumps(report, indent=1))
    ok = worst_oracle <= 1e-6 and resid <= 1e-5 and sharp_ok == 20
    return 0 if ok else 2


def cmd_grad_check(args) -> int:
    err = grad_check_full_model(seed=args.seed or 0, n_coords=args.coords)
    print(json.dumps({"max_rel_err": err, "n_coords": args.coords}))
    return 0 if err <= 1e-4 else 2


def build_parser() -> CliParser:
    parser = CliParser(prog="slotflow")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=str, default="runs/default")
        p.add_argument("--precision", choices=("f32", "f64"), default=None)
        p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("generate-data", help="render clips and write the dataset directory")
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train the identity-conditioned model")
    common(p)
    p.add_argument("--ablation", choices=("full", "conv_pool", "shuffled"), default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="probe + matched/mismatched gap on a finished run")
    common(p)
    p.add_argument("--pairs", type=int, default=20)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run encoder ablations under identical seeds/data")
    common(p)
    p.add_argument("--ablation", choices=("full", "conv_pool", "shuffled"), default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sinkhorn-bench", help="OT micro-suite against the oracles")
    common(p)
    p.set_defaults(fn=cmd_sinkhorn_bench)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model")
    common(p)
    p.add_argument("--coords", type=int, default=50)
    p.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
