"""``kreplay <command> --config <path> [--override key=value ...] --out <dir>``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 missing artifact,
5 numerical divergence. Every command writes ``run.json`` (deterministic
provenance) and ``run.log`` (timestamped sidecar) under ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .corpus import DataError, generate_concept_bank, generate_corpora, load_dataset
from .decode import decode_batch
from .evaluation import evaluate_run
from .model import clone_frozen, init_model, load_checkpoint
from .seeds import derive_seed
from .text import decode_tokens
from .train import DivergenceError, run_training

log = logging.getLogger("kreplay")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4, 5

PHASE_OF = {"pretrain": "pretrain", "finetune": "finetune", "kreplay-train": "kreplay"}


class MissingArtifact(FileNotFoundError):
    pass


def _require(path: str, what: str) -> Path:
    if not path:
        raise MissingArtifact(f"{what} not given")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _dataset(cfg: RunConfig):
    path = _require(cfg.data, "dataset (key 'data')")
    if path.is_dir() and not (path / "manifest.json").exists():
        raise MissingArtifact(f"no manifest.json in {path}")
    return load_dataset(path)


def _checkpoint(path: str, what: str, frozen: bool = False, ds=None):
    p = _require(path, what)
    if p.is_dir():
        p = p / "best.ckpt"
        if not p.exists():
            raise MissingArtifact(f"{what} not found: {p}")
    model, _ = load_checkpoint(p)
    if ds is not None:
        _compatible(model, ds)
    return clone_frozen(model) if frozen else model


def _compatible(model, ds) -> None:
    cfg = model.config
    if cfg.vocab_size != ds.vocab.size:
        raise DataError(f"checkpoint vocabulary has {cfg.vocab_size} entries, dataset has {ds.vocab.size}")
    shape = (*ds.manifest.grid, ds.manifest.dim)
    if shape != (cfg.grid_h, cfg.grid_w, cfg.d_patch):
        raise DataError(f"checkpoint expects {cfg.grid_h}x{cfg.grid_w}x{cfg.d_patch} patches, dataset has {shape}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_record(out: Path, command: str, cfg: RunConfig, outputs: list[str]) -> None:
    record = {
        "command": command,
        "config": cfg.as_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "kreplay": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path) -> list[str]:
    try:
        bank = generate_concept_bank(cfg.num_concepts, cfg.num_unseen, cfg.d_patch, cfg.seed)
        manifest = generate_corpora(bank, cfg.corpus_sizes(), cfg.seed, out, (cfg.grid_h, cfg.grid_w), cfg.noise)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    for split, n in manifest.counts.items():
        print(f"{split:14s} {n}")
    print(f"vocabulary     {sum(1 for _ in open(out / manifest.vocab))}")
    return [p.name for p in sorted(out.iterdir()) if p.name not in ("run.json", "run.log")]


def _train_outputs(result) -> list[str]:
    return ["loss_log.csv", "best.ckpt", "checkpoints.json"] + [m.path for m in result.checkpoints]


def cmd_pretrain(cfg: RunConfig, out: Path) -> list[str]:
    ds = _dataset(cfg)
    model = init_model(cfg.model_config(ds.vocab.size), derive_seed(cfg.seed, "init"))
    result = run_training(ds, model, cfg.train_config(), out, caption_split_name="pretrain",
                          use_replay=False, stream="pretrain")
    return _train_outputs(result)


def cmd_finetune(cfg: RunConfig, out: Path) -> list[str]:
    ds = _dataset(cfg)
    model = _checkpoint(cfg.init, "pretrained checkpoint (key 'init')", ds=ds)
    result = run_training(ds, model, cfg.train_config(), out, use_replay=False)
    return _train_outputs(result)


def cmd_kreplay_train(cfg: RunConfig, out: Path) -> list[str]:
    ds = _dataset(cfg)
    model = _checkpoint(cfg.init, "pretrained checkpoint (key 'init')", ds=ds)
    teacher = _checkpoint(cfg.teacher, "teacher checkpoint (key 'teacher')", frozen=True, ds=ds)
    result = run_training(ds, model, cfg.train_config(), out, teacher=teacher, use_replay=cfg.use_replay)
    return _train_outputs(result)


def cmd_eval(cfg: RunConfig, out: Path) -> list[str]:
    ds = _dataset(cfg)
    model = _checkpoint(cfg.checkpoint, "checkpoint (key 'checkpoint')", ds=ds)
    for split in (cfg.eval_generic_split, cfg.eval_concept_split):
        if split not in ds.captions:
            raise MissingArtifact(f"split {split!r} not in dataset")
    report, captions = evaluate_run(model, ds, cfg.eval_generic_split, cfg.eval_concept_split,
                                    cfg.decode_method, cfg.beam_width)
    report.write(out)
    (out / "captions.json").write_text(json.dumps(
        {k: {str(i): c for i, c in v.items()} for k, v in captions.items()}, indent=2, sort_keys=True) + "\n")
    for name, scores in report.splits.items():
        rec = "-" if scores.rec is None else f"{scores.rec:.4f}"
        print(f"{name:8s} n={scores.count:4d} bleu4={scores.bleu4:.4f} rouge_l={scores.rouge_l:.4f} "
              f"cider={scores.cider:.4f} rec={rec}")
    return ["report.json", "report.csv", "captions.json"]


def cmd_decode(cfg: RunConfig, out: Path) -> list[str]:
    ds = _dataset(cfg)
    model = _checkpoint(cfg.checkpoint, "checkpoint (key 'checkpoint')", ds=ds)
    if cfg.decode_split not in ds.captions and cfg.decode_split != "replay":
        raise MissingArtifact(f"split {cfg.decode_split!r} not in dataset")
    images = {img.image_id: img for img in ds.images(cfg.decode_split)}
    if cfg.image_ids:
        try:
            wanted = [int(x) for x in cfg.image_ids.split(",")]
        except ValueError:
            raise ConfigError(f"image_ids: expected comma-separated integers, got {cfg.image_ids!r}") from None
    else:
        wanted = sorted(images)
    missing = [i for i in wanted if i not in images]
    if missing:
        raise MissingArtifact(f"image ids not in {cfg.decode_split}: {missing}")
    hyps = decode_batch(model, [images[i] for i in wanted], cfg.decode_method, cfg.beam_width)
    b = cfg.beam_width if cfg.decode_method == "beam" else 1
    lines = []
    for image_id, hyp in zip(wanted, hyps):
        lines.append(json.dumps({"image_id": image_id, "caption": decode_tokens(hyp.tokens, ds.vocab),
                                 "logprob": hyp.logprob, "method": cfg.decode_method, "b": b}, sort_keys=True))
    text = "\n".join(lines) + "\n"
    (out / "captions.jsonl").write_text(text)
    sys.stdout.write(text)
    return ["captions.jsonl"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "kreplay-train": cmd_kreplay_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kreplay", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _setup_logging(out: Path, verbose: bool) -> None:
    fmt = logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s")
    sidecar = logging.FileHandler(out / "run.log", mode="w")
    sidecar.setFormatter(fmt)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    root = logging.getLogger()
    root.handlers[:] = [sidecar, console]
    root.setLevel(logging.INFO)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config and not Path(args.config).exists():
            raise MissingArtifact(f"config file not found: {args.config}")
        cfg = load_config(args.config, args.override, PHASE_OF.get(args.command))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out, args.verbose)
    torch.set_num_threads(1)
    log.info("%s config %s", args.command, cfg.digest())
    try:
        outputs = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        # shape or vocabulary mismatches between a checkpoint and a dataset
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    _write_run_record(out, args.command, cfg, outputs)
    log.info("done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
