"""Command-line interface.

Subcommands: ingest, gen-objects, split, pretrain-encoder, train, eval,
sweep, report.  Exit codes: 0 success, 1 validation error (bad flags,
malformed config, unknown objects or files), 2 runtime failure.  When no
seed is given anywhere, the GEODEX_SEED environment variable is consulted
before falling back to the config default.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import harness, mesh as _mesh, nn
from .config import PretrainConfig, RunConfig, config_dict, config_from_dict
from .encoder import load_encoder, pretrain, save_encoder
from .env import build_record, load_registry, preset_records, save_registry, select_records
from .errors import (BadSpec, ConfigError, GeodexError, ParseError,
                     TooFewObjects, UnknownObject)

_VALIDATION_ERRORS = (ConfigError, BadSpec, UnknownObject, TooFewObjects, ParseError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _split_names(text):
    return tuple(n for n in text.split(",") if n)


def _resolve_seed(explicit, config_data):
    if explicit is not None:
        return explicit
    if config_data and "seed" in config_data:
        return None                      # config carries it
    env = os.environ.get("GEODEX_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"GEODEX_SEED={env!r} is not an integer") from exc
    return None


def _load_config_file(path):
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _apply_sets(data, sets):
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set wants key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data[key] = value
    return data


def _progress(run, epoch):
    cfg = run.cfg
    if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
        tail = [m for m in run.metrics if m["epoch"] == epoch]
        bits = [f"{m['object']}={m['success']:.2f}" for m in tail
                if m["phase"] == "eval-train"]
        print(f"epoch {epoch + 1}/{cfg.epochs} samples={run.samples} "
              + " ".join(bits), file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    records = []
    for path in args.mesh:
        m = _mesh.normalize_scale(_mesh.load_mesh(path))
        records.append(build_record(m, mass=args.mass, mesh_path=path))
    out = save_registry(args.registry, records)
    print(f"ingested {len(records)} meshes -> {out}")
    return 0


def cmd_gen_objects(args):
    records = preset_records(args.preset, mass=args.mass)
    out = save_registry(args.registry, records)
    for rec in records:
        ev = np.linalg.eigvalsh(rec.inertia)
        print(f"{rec.name}  inertia eigvals {ev[0]:.3e}..{ev[2]:.3e}")
    print(f"wrote {len(records)} objects -> {out}")
    return 0


def cmd_split(args):
    records = load_registry(args.registry)
    probe = RunConfig(mode="vanilla", objects=(records[0].name,),
                      epochs=args.probe_epochs, rollouts_per_epoch=args.probe_rollouts,
                      updates_per_epoch=args.probe_updates, batch=args.probe_batch,
                      eval_episodes=args.probe_episodes, eval_every=args.probe_epochs,
                      seed=args.seed if args.seed is not None else 0)
    train_names, test_names, scores = harness.split_objects(records, probe, args.ratio)
    payload = {"train": train_names, "test": test_names,
               "scores": {k: scores[k] for k in sorted(scores)}}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_pretrain_encoder(args):
    records = load_registry(args.registry)
    if args.objects:
        records = select_records(records, _split_names(args.objects))
    data = {"steps": args.steps, "batch": args.batch, "n_points": args.n_points,
            "alpha": args.alpha, "lr": args.lr, "eval_every": args.eval_every,
            "log_every": args.log_every}
    seed = _resolve_seed(args.seed, None)
    if seed is not None:
        data["seed"] = seed
    cfg = config_from_dict(PretrainConfig, data)
    cfg.validate()
    names = [r.name for r in records]
    model, log = pretrain([r.mesh for r in records], names, cfg,
                          log_path=args.log)
    save_encoder(args.out, model, names, cfg)
    tail = log[-1]
    print(f"pretrained on {len(names)} objects, {cfg.steps} steps -> {args.out}")
    print(f"final val: acc={tail['acc']:.3f} rot_err_rad={tail['rot_err_rad']:.3f}")
    return 0


def _build_run_config(args):
    data = _load_config_file(args.config)
    _apply_sets(data, args.set)
    if getattr(args, "mode", None):
        data["mode"] = args.mode
    if getattr(args, "encoder", None):
        data["encoder_path"] = args.encoder
    if getattr(args, "finetune_encoder", False):
        data["finetune_encoder"] = True
    if args.objects:
        data["objects"] = list(_split_names(args.objects))
    if args.heldout is not None:
        data["heldout"] = list(_split_names(args.heldout))
    seed = _resolve_seed(args.seed, data)
    if seed is not None:
        data["seed"] = seed
    cfg = config_from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def cmd_train(args):
    records = load_registry(args.registry)
    if args.resume:
        run = harness.TrainRun.resume(args.resume, records, out_dir=args.out)
    else:
        cfg = _build_run_config(args)
        run = harness.TrainRun(cfg, records, out_dir=args.out)
    run.progress = _progress
    result = run.run()
    table = harness.final_success(result.metrics, "eval-train")
    for name in sorted(table):
        print(f"eval-train {name} {table[name]:.3f}")
    if result.cfg.heldout:
        table = harness.final_success(result.metrics, "eval-heldout")
        for name in sorted(table):
            print(f"eval-heldout {name} {table[name]:.3f}")
    return 0


def cmd_eval(args):
    records = load_registry(args.registry)
    component, sections = nn.load_checkpoint(args.checkpoint,
                                             expect_component="train-run")
    meta = json.loads(sections["run_meta"].decode("utf-8"))
    cfg = config_from_dict(RunConfig, meta["config"])
    model = harness.model_from_sections(sections)
    encoder = None
    if cfg.mode == "geometry-aware":
        encoder, _ = load_encoder(cfg.encoder_path)
        if cfg.finetune_encoder and "enc_trunk" in sections:
            encoder = replace(encoder, trunk=sections["enc_trunk"])
    names = _split_names(args.objects) if args.objects else cfg.objects
    targets = select_records(records, names)
    cfg = replace(cfg, eval_episodes=args.episodes)
    seed = _resolve_seed(args.seed, None)
    seed = cfg.seed if seed is None else seed
    table = harness.evaluate(model, encoder, targets, cfg, seed, tag="cli")
    for name in names:
        print(f"{name} {table[name]:.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for name in names:
                fh.write(f"{name},{table[name]!r}\n")
    return 0


def cmd_sweep(args):
    records = load_registry(args.registry)
    data = _load_config_file(args.config)
    _apply_sets(data, args.set)
    seed = _resolve_seed(None, data)
    if seed is not None:
        data["seed"] = seed
    cfg = config_from_dict(RunConfig, data)
    counts = [int(c) for c in args.counts.split(",") if c]
    modes = [m for m in args.modes.split(",") if m]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    rows = harness.scaling_sweep(cfg, counts, modes, seeds, records,
                                 out_dir=args.out)
    print("count,mode,seed,heldout_success")
    for count, mode, seed, success in rows:
        print(f"{count},{mode},{seed},{success!r}")
    return 0


def cmd_report(args):
    run_dir = args.run or args.run_pos
    if not run_dir:
        raise ConfigError("report needs a run directory (positional or --run)")
    out_path, rows = harness.report(run_dir, out_path=args.out)
    print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="geodex",
                description="geometry-aware multi-task RL toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="normalize mesh files into a registry")
    s.add_argument("--mesh", nargs="+", required=True)
    s.add_argument("--registry", required=True)
    s.add_argument("--mass", type=float, default=0.2)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("gen-objects", help="write a procedural object registry")
    s.add_argument("--preset", default="basic8")
    s.add_argument("--registry", "--out", dest="registry", required=True,
                   help="output directory for meshes + registry.json")
    s.add_argument("--mass", type=float, default=0.2)
    s.set_defaults(fn=cmd_gen_objects)

    s = sub.add_parser("split", help="difficulty-balanced train/test split")
    s.add_argument("--registry", required=True)
    s.add_argument("--ratio", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--probe-epochs", type=int, default=6)
    s.add_argument("--probe-rollouts", type=int, default=10)
    s.add_argument("--probe-updates", type=int, default=10)
    s.add_argument("--probe-batch", type=int, default=64)
    s.add_argument("--probe-episodes", type=int, default=10)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("pretrain-encoder", help="pretrain the paired-cloud encoder")
    s.add_argument("--registry", required=True)
    s.add_argument("--objects", default=None, help="comma-separated subset")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--n-points", type=int, default=128)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--eval-every", type=int, default=500)
    s.add_argument("--log-every", type=int, default=50)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--log", default=None, help="JSONL metrics path")
    s.set_defaults(fn=cmd_pretrain_encoder)

    s = sub.add_parser("train", help="train a policy")
    s.add_argument("--registry", required=True)
    s.add_argument("--config", default=None, help="RunConfig JSON file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--mode", default=None, choices=("vanilla", "geometry-aware"))
    s.add_argument("--encoder", default=None, help="frozen encoder checkpoint")
    s.add_argument("--finetune-encoder", action="store_true", default=False,
                   help="unfreeze the encoder trunk during training (ablation)")
    s.add_argument("--objects", default=None)
    s.add_argument("--heldout", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--resume", default=None, help="checkpoint to continue")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a trained checkpoint")
    s.add_argument("--registry", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--objects", default=None)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train-object scaling sweep")
    s.add_argument("--registry", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--counts", required=True, help="e.g. 2,4,8")
    s.add_argument("--modes", default="vanilla,geometry-aware")
    s.add_argument("--seeds", default="1,2,3")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("report", help="summarize a run directory")
    s.add_argument("run_pos", nargs="?", default=None, metavar="RUN")
    s.add_argument("--run", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GeodexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
