"""Command-line entry point: ``imagemt <subcommand> --config FILE [--set key=value ...]``.

Exit status is 0 on success, 1 for invalid input (bad config, unknown key,
missing artifact) and 2 when a stage fails at run time.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("imagemt")

# subcommand -> (artifacts it needs, what it writes)
PLAN = {
    "gen-data": ([], ["data/*.jsonl"]),
    "train-diffusion": (["data/diffusion.jsonl", "data/diffusion_val.jsonl"],
                        ["diffusion/denoiser.bin", "diffusion/loss_curve.csv"]),
    "train-ddpo": (["diffusion/denoiser.bin", "data/train.jsonl"], ["ddpo/denoiser.bin", "ddpo/ddpo_log.csv"]),
    "train-translator": (["data/train.jsonl", "ddpo/denoiser.bin"],
                         ["translator/model.bin", "translator/train_log.csv", "translator/ckpt/"]),
    "eval": (["translator/model.bin", "data/test.jsonl"], ["report.csv"]),
    "ablate": ([], ["data/", "diffusion/", "ddpo/", "rows/<row>-<hash>/", "ablation.csv", "curve.csv"]),
    "score": ([], []),
    "curve": (["translator/ckpt/", "data/dev.jsonl"], ["curve.csv", "curve_summary.txt"]),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="imagemt", description="Scene-imagination translation pipeline on a synthetic world.")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in PLAN:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI config file")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        s.add_argument("--runs-dir", default="runs", help="parent of the hash-named run directories")
        s.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        s.add_argument("--log-level", default="WARNING")
        if name == "score":
            s.add_argument("--lsg", required=True, help="JSONL file of sentence graphs")
            s.add_argument("--vsg", required=True, help="JSONL file of scene graphs")
    return p


def _needs(cmd: str, cfg: RunConfig) -> list[str]:
    need = list(PLAN[cmd][0])
    if cmd == "train-translator" and cfg.scene_source != "generated":
        need.remove("ddpo/denoiser.bin")
    return need


def _plan(cmd: str, cfg: RunConfig, run_dir: Path, args) -> str:
    need, makes = _needs(cmd, cfg), PLAN[cmd][1]
    lines = [f"command: {cmd}", f"config hash: {cfg.hash()}", f"run directory: {run_dir}",
             f"scene source: {cfg.scene_source}"]
    for rel in need:
        state = "present" if (run_dir / rel).exists() else "MISSING"
        lines.append(f"needs: {rel} ({state})")
    if cmd == "score":
        lines += [f"reads: {args.lsg}", f"reads: {args.vsg}", f"lexicon: {cfg.data.lexicon}", "writes: stdout"]
    lines += [f"writes: {rel}" for rel in makes]
    return "\n".join(lines)


def run(cmd: str, cfg: RunConfig, run_dir: Path, args) -> None:
    from . import evalsuite, trainer
    from .reward import get_lexicon, score_files

    if cmd == "score":
        sys.stdout.write(score_files(args.lsg, args.vsg, get_lexicon(cfg.data.lexicon)))
        return
    for rel in _needs(cmd, cfg):
        trainer.artifact(run_dir, rel)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(cfg.to_text())
    if cmd == "gen-data":
        trainer.generate_data(cfg, run_dir)
    elif cmd == "train-diffusion":
        trainer.pretrain_diffusion(cfg, run_dir)
    elif cmd == "train-ddpo":
        trainer.finetune_ddpo(cfg, run_dir)
    elif cmd == "train-translator":
        trainer.train_translator(cfg, run_dir)
    elif cmd == "eval":
        rep = evalsuite.evaluate_run(cfg, run_dir)
        print(f"bleu={rep.bleu:.4f} token_accuracy={rep.token_accuracy:.4f} "
              f"mean_reward={rep.mean_reward:.4f} clip_analog={rep.clip_analog:.4f}")
    elif cmd == "curve":
        points, rho = evalsuite.run_curve(cfg, run_dir)
        print(f"points={len(points)} spearman={'undefined' if rho is None else f'{rho:.4f}'}")
    elif cmd == "ablate":
        evalsuite.run_ablation(cfg, run_dir)
        sys.stdout.write((run_dir / "ablation.csv").read_text())
    print(f"run directory: {run_dir}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    from .reward import UnknownSymbolError
    from .trainer import MissingArtifactError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "imagemt: error: a command is required")
        if not args.config:
            raise UsageError(parser.format_usage() + f"imagemt {args.command}: error: --config is required")
        cfg = load_config(args.config, args.set)
    except (UsageError, ConfigError) as e:
        print(str(e), file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    run_dir = Path(args.runs_dir) / cfg.hash()
    if args.dry_run:
        print(_plan(args.command, cfg, run_dir, args))
        return 0
    try:
        run(args.command, cfg, run_dir, args)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, UnknownSymbolError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any stage failure maps to one exit code
        log.debug("stage failed", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
