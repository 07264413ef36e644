"""Command-line entry point: gen-data, pretrain, finetune, evaluate, ablate."""
import argparse
import logging
import os
import sys

from . import dataio, trainer
from .dataio import ConfigError, CorpusError
from .metrics import MetricError, evaluate as evaluate_dirs
from .objective import HyperParams
from .policy import PolicyError, load_policy, make_policy, predict_mean, synthesize
from .reward import STOI_RANGE, AdapterError, make_intrusive_fn, make_mos_estimator, make_pesq_fn
from .tfsignal import FrameSpec, write_wav

log = logging.getLogger("rlhfse")


def frame_spec(cfg):
    return FrameSpec(cfg["sample_rate_hz"], cfg["window_ms"], cfg["hop_ms"])


def hyper_params(cfg):
    return HyperParams(cfg["alpha"], cfg["beta"], cfg["lam"], cfg["epsilon"], cfg["sigma"],
                       cfg["learning_rate"])


def train_config(cfg):
    return trainer.TrainConfig(hyper_params(cfg), cfg["micro_batch"], cfg["accumulation_steps"],
                               cfg["episodes"], cfg["reward_kind"], cfg["log_every_episodes"],
                               cfg["seed"], cfg["optimizer"])


def _adapter(value):
    return None if value in ("", "pseudo") else value


def _sft_path(cfg):
    return cfg["sft_checkpoint"] or os.path.join(cfg["out_dir"], "sft.npz")


def _load_split(cfg, policy):
    corpus = dataio.load_corpus(cfg["corpus"], cfg["sample_rate_hz"])
    train_ids, val_ids = corpus.split(cfg["val_count"])
    return (trainer.prepare(corpus.load(train_ids), policy),
            trainer.prepare(corpus.load(val_ids), policy), corpus)


def _manifest(cfg, command, extra=None):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    trainer.write_manifest(os.path.join(cfg["out_dir"], f"manifest-{command}.json"),
                           cfg, cfg["seed"], {"command": command, **(extra or {})})


def cmd_gen_data(cfg):
    corpus = dataio.gen_toy_corpus(cfg["n_utts"], cfg["duration_s"],
                                   (cfg["snr_min_db"], cfg["snr_max_db"]), cfg["seed"],
                                   cfg["corpus"], cfg["sample_rate_hz"])
    print(f"wrote {len(corpus)} pairs to {cfg['corpus']}")
    _manifest(cfg, "gen-data")


def cmd_pretrain(cfg):
    policy = make_policy(cfg["channels"], cfg["hidden"], cfg["mask_max"], cfg["seed"],
                         frame_spec(cfg))
    train, val, _ = _load_split(cfg, policy)
    history = []
    sft = trainer.pretrain_sft(policy, train, cfg["pretrain_epochs"], cfg["pretrain_lr"],
                               cfg["pretrain_batch"], cfg["alpha"], cfg["seed"], history=history,
                               optimizer=cfg["optimizer"])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    sft.save(_sft_path(cfg))
    with open(os.path.join(cfg["out_dir"], "pretrain_losses.csv"), "w") as fh:
        fh.write("step,mse\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))
    print(f"pretrained {len(history)} steps: mse {history[0]:.6g} -> {history[-1]:.6g}; "
          f"validation mse {trainer.dataset_mse(sft, val, cfg['alpha']):.6g}")
    _manifest(cfg, "pretrain")


def cmd_finetune(cfg):
    sft = load_policy(_sft_path(cfg), role="sft")
    train, val, _ = _load_split(cfg, sft)
    res = trainer.finetune(sft, train, val, train_config(cfg),
                           make_mos_estimator(_adapter(cfg["mos_adapter"])),
                           make_pesq_fn(_adapter(cfg["pesq_adapter"])), cfg["out_dir"])
    print(f"validation MOS {res.curve[0][1]:.4f} -> {res.curve[-1][1]:.4f} "
          f"(slope {trainer.curve_slope(res.curve):.3g}/episode)")
    _manifest(cfg, "finetune")


def _write_enhanced(policy, items, out):
    os.makedirs(out, exist_ok=True)
    for item in items:
        write_wav(os.path.join(out, item.uid + ".wav"),
                  synthesize(predict_mean(policy, item.x), item.x))


def _write_plain(items, out, attr):
    os.makedirs(out, exist_ok=True)
    for item in items:
        write_wav(os.path.join(out, item.uid + ".wav"), getattr(item, attr))


def cmd_evaluate(cfg, args):
    if args.enhanced:
        est_dir, ref_dir, noisy_dir = args.enhanced, args.references, args.noisy
        if not ref_dir:
            raise ConfigError("--references is required with --enhanced")
        base_dir = args.baseline
    else:
        ckpt = args.checkpoint or os.path.join(cfg["out_dir"], "rl.npz")
        policy = load_policy(ckpt, role="rl")
        _, val, _ = _load_split(cfg, policy)
        root = os.path.join(cfg["out_dir"], "eval")
        est_dir, ref_dir, noisy_dir = (os.path.join(root, d) for d in ("enhanced", "clean", "noisy"))
        _write_enhanced(policy, val, est_dir)
        _write_plain(val, ref_dir, "clean")
        _write_plain(val, noisy_dir, "noisy")
        base_dir = os.path.join(root, "baseline")
        _write_enhanced(load_policy(_sft_path(cfg), role="sft"), val, base_dir)
    stoi = None
    if cfg["stoi_adapter"]:
        if cfg["stoi_adapter"] == "pseudo":
            raise ConfigError("stoi_adapter has no pseudo implementation; give a command or leave empty")
        stoi = make_intrusive_fn(cfg["stoi_adapter"], STOI_RANGE)
    report = evaluate_dirs(est_dir, ref_dir, noisy_dir,
                           make_pesq_fn(_adapter(cfg["pesq_adapter"])), stoi,
                           make_mos_estimator(_adapter(cfg["mos_adapter"])),
                           baseline_dir=base_dir, name="finetuned", baseline_name="SFT")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    text = report.render_table()
    with open(os.path.join(cfg["out_dir"], "report.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    _manifest(cfg, "evaluate")
    return 1 if report.missing else 0


def cmd_ablate(cfg):
    sft = load_policy(_sft_path(cfg), role="sft")
    train, val, _ = _load_split(cfg, sft)
    report = trainer.run_ablation(sft, train, val, train_config(cfg),
                                  make_mos_estimator(_adapter(cfg["mos_adapter"])),
                                  make_pesq_fn(_adapter(cfg["pesq_adapter"])))
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "ablation.csv"), "w") as fh:
        fh.write(report.to_csv())
    text = report.render_table()
    with open(os.path.join(cfg["out_dir"], "ablation.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    _manifest(cfg, "ablate")


def build_parser():
    parser = argparse.ArgumentParser(prog="rlhfse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "gen-data": "write a synthetic paired toy corpus",
        "pretrain": "supervised MSE pretraining of the SFT policy",
        "finetune": "RL fine-tuning from the SFT checkpoint",
        "evaluate": "score enhanced outputs and write a report",
        "ablate": "train and compare the MSE-only / r_pesq / r_mos / r_comb variants",
        "show-config": "print the resolved configuration",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="policy checkpoint (default <out_dir>/rl.npz)")
            p.add_argument("--enhanced", help="directory of enhanced WAVs to score instead")
            p.add_argument("--references", help="clean reference directory")
            p.add_argument("--noisy", help="noisy input directory")
            p.add_argument("--baseline", help="baseline output directory for paired t-tests")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = dataio.load_config(args.config, args.set)
        if args.command == "show-config":
            sys.stdout.write(dataio.serialize_config(cfg))
            return 0
        handlers = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain,
                    "finetune": cmd_finetune, "ablate": cmd_ablate}
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args)
        handlers[args.command](cfg)
        return 0
    except (ConfigError, CorpusError, PolicyError, MetricError, AdapterError,
            trainer.TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
