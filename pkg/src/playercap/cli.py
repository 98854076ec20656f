"""Operator surface: dataset synthesis, training, generation, evaluation,
ablation sweeps, and corpus statistics.

Config precedence: CLI flag > --config file > --preset > built-in default.
Every artifact a command writes embeds its fully-resolved RunConfig.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import errors as err
from .config import HyperConfig, RunConfig, preset_overrides
from .data import (
    Checkpoint,
    SynthConfig,
    corpus_stats_summary,
    default_split,
    derive_catalog,
    derive_vocabulary,
    load_annotations,
    load_checkpoint,
    save_annotations,
    save_checkpoint,
    split_by_game,
    synth_generate,
)
from .identity import mca_mpca
from .metrics import evaluate_corpus
from .pipeline import (
    FULL,
    AblationFlags,
    PipelineModel,
    generate_captions,
    init_model,
    train_captioner,
    train_pin,
)

_EXIT_CODES: tuple[tuple[type, int], ...] = (
    (err.ConfigError, 2),
    (err.InconsistentFlags, 2),
    (err.InvalidRate, 2),
    (err.SchemaError, 3),
    (err.DuplicateVideoId, 3),
    (err.MissingSequence, 3),
    (err.UncoveredGame, 3),
    (err.DataError, 3),
    (err.EmptyCorpus, 3),
    (err.EmptyInput, 3),
    (err.MissingCheckpoint, 4),
    (err.VersionMismatch, 4),
    (err.CorruptFile, 4),
    (err.AlignmentError, 5),
    (err.PlayercapError, 6),
)

_HYPER_FIELDS = {f.name for f in fields(HyperConfig)}


def _resolve_hyper(args: argparse.Namespace) -> tuple[HyperConfig, dict]:
    """Merge defaults, preset, config file, and explicit CLI flags."""
    merged: dict = {}
    extra: dict = {}
    if getattr(args, "preset", None):
        for k, v in preset_overrides(args.preset).items():
            (merged if k in _HYPER_FIELDS else extra)[k] = v
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise err.ConfigError(f"cannot read config {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise err.ConfigError("config file must hold a JSON object")
        for k, v in loaded.items():
            (merged if k in _HYPER_FIELDS else extra)[k] = v
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    for name in _HYPER_FIELDS:
        flag = getattr(args, f"hy_{name}", None)
        if flag is not None:
            merged[name] = flag
    return HyperConfig.from_dict(merged), extra


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", help="named full-scale decoder preset")
    p.add_argument("--out", required=True, help="output path")
    for name in sorted(_HYPER_FIELDS - {"seed"}):
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"hy_{name}",
                       type=float if name == "dropout_rate" else int,
                       default=None, help=argparse.SUPPRESS)


def _load_records(path: str):
    records = load_annotations(path)
    if not records:
        raise err.DataError(f"{path} holds no records")
    return records


def _split_records(records, which: str, n_test_games: int):
    if which == "all":
        return records
    spec = default_split(records, n_test_games)
    train, test = split_by_game(records, spec)
    return train if which == "train" else test


def _model_from_checkpoint(ckpt: Checkpoint) -> PipelineModel:
    model = init_model(ckpt.hyper, ckpt.catalog, ckpt.vocab,
                       int(ckpt.meta["d_in"]))
    model.store.load_arrays(ckpt.tensors)
    return model


def _write_json(path: str, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> None:
    cfg = SynthConfig(
        n_games=args.n_games,
        clips_per_game=args.clips_per_game,
        n_players=args.n_players,
        n_event_types=args.n_event_types,
        d_in=args.d_in,
        noise_sigma=args.noise_sigma,
        seed=args.seed if args.seed is not None else 0,
        n_candidates=args.n_candidates,
        distractor_sigma=args.distractor_sigma,
        video_sigma=args.video_sigma,
        decoys=not args.no_decoys,
    )
    records, catalog, vocab = synth_generate(cfg)
    save_annotations(records, args.out)
    print(f"wrote {len(records)} clips, {catalog.size} players, "
          f"{vocab.size} vocab tokens to {args.out}")


def cmd_stats(args: argparse.Namespace) -> None:
    records = _load_records(args.data)
    summary = corpus_stats_summary(records)
    run = RunConfig("stats", HyperConfig(), {"data": args.data}, {})
    _write_json(args.out, {"config": run.to_dict(), "stats": summary})
    print(json.dumps(summary, indent=2))


def cmd_train_pin(args: argparse.Namespace) -> None:
    hyper, extra = _resolve_hyper(args)
    records = _load_records(args.data)
    train_records = _split_records(records, args.split, args.n_test_games)
    if not train_records:
        raise err.DataError("empty training split")
    catalog = derive_catalog(records)
    vocab = derive_vocabulary(records)
    d_in = train_records[0].video_features.shape[1]
    model = init_model(hyper, catalog, vocab, d_in)
    lr = args.lr if args.lr is not None else extra.get("lr", 3e-3)
    batch = args.batch_size if args.batch_size is not None else \
        int(extra.get("batch_size", 16))
    history = train_pin(
        model, train_records, epochs=args.epochs, lr=lr, batch_size=batch,
        holdout_frac=args.holdout_frac, early_stop_mca=args.early_stop_mca,
        log=print,
    )
    run = RunConfig("train-pin", hyper,
                    {"data": args.data, "out": args.out},
                    {"epochs": args.epochs, "lr": lr, "batch_size": batch,
                     "split": args.split})
    meta = {"d_in": d_in, "run": run.to_dict(),
            "history": history, "kind": "pin"}
    save_checkpoint(args.out, Checkpoint(1, hyper, catalog, vocab,
                                         model.store.as_arrays(), meta))
    final = history[-1] if history else {}
    print(f"checkpoint -> {args.out}  "
          f"(mca {final.get('mca', float('nan')):.3f}, "
          f"mpca {final.get('mpca', float('nan')):.3f})")


def cmd_train_captioner(args: argparse.Namespace) -> None:
    hyper, extra = _resolve_hyper(args)
    records = _load_records(args.data)
    train_records = _split_records(records, args.split, args.n_test_games)
    if not train_records:
        raise err.DataError("empty training split")
    flags = AblationFlags(no_vclm=args.no_vclm, no_pin=args.no_pin,
                          no_bsim=args.no_bsim, bsim_output=args.bsim_output)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        hyper = ckpt.hyper
        model = _model_from_checkpoint(ckpt)
    else:
        if not args.pin_checkpoint:
            raise err.MissingCheckpoint(
                "train-captioner needs --pin-checkpoint (or --resume)"
            )
        pin_ckpt = load_checkpoint(args.pin_checkpoint)
        catalog, vocab = pin_ckpt.catalog, pin_ckpt.vocab
        d_in = int(pin_ckpt.meta["d_in"])
        model = init_model(hyper, catalog, vocab, d_in)
        pin_arrays = {k: v for k, v in pin_ckpt.tensors.items()
                      if k.startswith("pin.")}
        for name, arr in pin_arrays.items():
            model.store.get(name).data = arr.copy()
    lr = args.lr if args.lr is not None else extra.get("lr", 2e-3)
    batch = args.batch_size if args.batch_size is not None else \
        int(extra.get("batch_size", 16))
    history = train_captioner(
        model, train_records, epochs=args.epochs, lr=lr, batch_size=batch,
        freeze_pin=not args.joint_pin, flags=flags,
        early_stop_reconstruction=args.early_stop_reconstruction,
        log=print,
    )
    run = RunConfig("train-captioner", hyper,
                    {"data": args.data, "out": args.out,
                     "pin_checkpoint": args.pin_checkpoint or "",
                     "resume": args.resume or ""},
                    {"epochs": args.epochs, "lr": lr, "batch_size": batch,
                     "split": args.split, "freeze_pin": not args.joint_pin,
                     "flags": vars(flags) | {}})
    meta = {"d_in": model.d_in, "run": run.to_dict(),
            "history": history[-5:], "kind": "captioner"}
    save_checkpoint(args.out, Checkpoint(1, model.cfg, model.catalog,
                                         model.vocab,
                                         model.store.as_arrays(), meta))
    print(f"checkpoint -> {args.out}")


def cmd_generate(args: argparse.Namespace) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(ckpt)
    records = _load_records(args.data)
    use = _split_records(records, args.split, args.n_test_games)
    beam = args.beam if args.beam is not None else model.cfg.beam_size
    outputs = generate_captions(model, use, beam_size=beam)
    run = RunConfig("generate", model.cfg,
                    {"data": args.data, "checkpoint": args.checkpoint,
                     "out": args.out},
                    {"split": args.split, "beam": beam})
    lines = [json.dumps(o) for o in outputs]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(args.out + ".config.json", run.to_dict())
    print(f"wrote {len(outputs)} captions -> {args.out}")


def _read_candidates(path: str) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    if not rows:
        raise err.DataError(f"{path} holds no candidate captions")
    return rows


def cmd_eval(args: argparse.Namespace) -> None:
    candidates = _read_candidates(args.candidates)
    references = _load_records(args.references)
    ref_by_id = {r.video_id: r for r in references}
    cand_ids = [c["video_id"] for c in candidates]
    missing = [v for v in cand_ids if v not in ref_by_id]
    if missing or len(cand_ids) != len(set(cand_ids)):
        raise err.AlignmentError(
            f"candidate ids do not align with references "
            f"({len(missing)} unmatched, "
            f"{len(cand_ids) - len(set(cand_ids))} duplicated)"
        )
    pairs = [(c["caption"], [ref_by_id[c["video_id"]].caption])
             for c in candidates]
    event_types = [ref_by_id[c["video_id"]].event_type for c in candidates]
    hyper, _ = _resolve_hyper(args)
    run = RunConfig("eval", hyper,
                    {"candidates": args.candidates,
                     "references": args.references, "out": args.out},
                    {"cider_scale": args.cider_scale,
                     "bleu_smooth": bool(args.bleu_smooth)})
    report = evaluate_corpus(
        pairs, config=run.to_dict(), ids=cand_ids, event_types=event_types,
        bleu_smooth=bool(args.bleu_smooth), cider_scale=args.cider_scale,
    )
    if all(c.get("identified_players") for c in candidates):
        catalog = derive_catalog(references)
        preds, truth = [], []
        for c in candidates:
            ref = ref_by_id[c["video_id"]]
            preds.append(catalog.index(c["identified_players"][0]["name"]))
            truth.append(catalog.index(ref.player_names[0]))
        mca, mpca = mca_mpca(preds, truth)
        report.corpus["mca"] = mca
        report.corpus["mpca"] = mpca
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps(report.corpus, indent=2))


_VARIANTS: dict[str, AblationFlags] = {
    "full": FULL,
    "no_bsim": AblationFlags(no_bsim=True),
    "no_pin": AblationFlags(no_pin=True),
    "no_pin_no_vclm": AblationFlags(no_pin=True, no_vclm=True),
    "no_vclm": AblationFlags(no_vclm=True),
    "bsim_video": AblationFlags(bsim_output="video"),
    "bsim_player": AblationFlags(bsim_output="player"),
}


def run_ablation_suite(
    hyper: HyperConfig,
    records,
    variant_names: list[str],
    pin_checkpoint: Checkpoint,
    epochs: int,
    lr: float,
    batch_size: int,
    n_test_games: int = 5,
    d_down_grid: list[int] | None = None,
    n_q_grid: list[int] | None = None,
    log=None,
    cider_scale: float = 10.0,
) -> dict:
    """Train and evaluate every requested variant; returns the comparative
    table keyed by variant name."""
    spec = default_split(records, n_test_games)
    train, test = split_by_game(records, spec)
    if not train or not test:
        raise err.DataError("ablation needs both split sides populated")
    catalog, vocab = pin_checkpoint.catalog, pin_checkpoint.vocab
    d_in = int(pin_checkpoint.meta["d_in"])
    pin_arrays = {k: v for k, v in pin_checkpoint.tensors.items()
                  if k.startswith("pin.")}

    jobs: list[tuple[str, HyperConfig, AblationFlags]] = []
    for name in variant_names:
        if name not in _VARIANTS:
            raise err.ConfigError(f"unknown ablation variant {name!r}")
        jobs.append((name, hyper, _VARIANTS[name]))
    for d_down in d_down_grid or []:
        jobs.append((f"d_down={d_down}", replace(hyper, d_down=d_down), FULL))
    for n_q in n_q_grid or []:
        jobs.append((f"n_q={n_q}", replace(hyper, n_q=n_q), FULL))

    table: dict[str, dict] = {}
    for name, cfg, flags in jobs:
        model = init_model(cfg, catalog, vocab, d_in)
        for pname, arr in pin_arrays.items():
            model.store.get(pname).data = arr.copy()
        train_captioner(model, train, epochs=epochs, lr=lr,
                        batch_size=batch_size, freeze_pin=True, flags=flags,
                        log=None)
        outputs = generate_captions(model, test, flags=flags)
        pairs = [(o["caption"],
                  [next(r for r in test if r.video_id == o["video_id"]).caption])
                 for o in outputs]
        report = evaluate_corpus(pairs, cider_scale=cider_scale)
        table[name] = {
            "flags": {"no_vclm": flags.no_vclm, "no_pin": flags.no_pin,
                      "no_bsim": flags.no_bsim,
                      "bsim_output": flags.bsim_output},
            "hyper": {"d_down": cfg.d_down, "n_q": cfg.n_q},
            "corpus": report.corpus,
        }
        if log:
            log(f"{name:16s}  cider {report.corpus['cider']:6.3f}  "
                f"bleu4 {report.corpus['bleu4']:.3f}")
    return table


def cmd_ablate(args: argparse.Namespace) -> None:
    hyper, extra = _resolve_hyper(args)
    records = _load_records(args.data)
    pin_ckpt = load_checkpoint(args.pin_checkpoint)
    variants = args.variants.split(",") if args.variants else [
        "full", "no_bsim", "no_pin", "no_pin_no_vclm", "bsim_video",
        "bsim_player",
    ]
    lr = args.lr if args.lr is not None else extra.get("lr", 2e-3)
    batch = args.batch_size if args.batch_size is not None else \
        int(extra.get("batch_size", 16))
    d_down_grid = [int(x) for x in args.d_down_grid.split(",")] \
        if args.d_down_grid else None
    n_q_grid = [int(x) for x in args.n_q_grid.split(",")] \
        if args.n_q_grid else None
    table = run_ablation_suite(
        hyper, records, variants, pin_ckpt, epochs=args.epochs, lr=lr,
        batch_size=batch, n_test_games=args.n_test_games,
        d_down_grid=d_down_grid, n_q_grid=n_q_grid, log=print,
    )
    run = RunConfig("ablate", hyper,
                    {"data": args.data, "pin_checkpoint": args.pin_checkpoint,
                     "out": args.out},
                    {"epochs": args.epochs, "lr": lr, "batch_size": batch,
                     "variants": variants,
                     "d_down_grid": d_down_grid or [],
                     "n_q_grid": n_q_grid or []})
    _write_json(args.out, {"config": run.to_dict(), "variants": table})
    print(f"ablation report -> {args.out}")


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="playercap",
        description="Identity-aware sports video captioning pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-games", type=int, default=40)
    p.add_argument("--clips-per-game", type=int, default=13)
    p.add_argument("--n-players", type=int, default=16)
    p.add_argument("--n-event-types", type=int, default=9)
    p.add_argument("--d-in", type=int, default=48)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--n-candidates", type=int, default=4)
    p.add_argument("--distractor-sigma", type=float, default=0.6)
    p.add_argument("--video-sigma", type=float, default=0.15)
    p.add_argument("--no-decoys", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-pin", help="train the player identification network")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--holdout-frac", type=float, default=0.1)
    p.add_argument("--early-stop-mca", type=float, default=None)
    p.add_argument("--split", choices=("train", "test", "all"), default="train")
    p.add_argument("--n-test-games", type=int, default=5)
    p.set_defaults(func=cmd_train_pin)

    p = sub.add_parser("train-captioner", help="train the caption decoder stack")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pin-checkpoint")
    p.add_argument("--resume")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--joint-pin", action="store_true",
                   help="update identification parameters too")
    p.add_argument("--early-stop-reconstruction", type=float, default=None)
    p.add_argument("--split", choices=("train", "test", "all"), default="train")
    p.add_argument("--n-test-games", type=int, default=5)
    p.add_argument("--no-vclm", action="store_true")
    p.add_argument("--no-pin", action="store_true")
    p.add_argument("--no-bsim", action="store_true")
    p.add_argument("--bsim-output", choices=("both", "video", "player"),
                   default="both")
    p.set_defaults(func=cmd_train_captioner)

    p = sub.add_parser("generate", help="decode captions for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--n-test-games", type=int, default=5)
    p.add_argument("--beam", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score candidate captions against references")
    _add_common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--cider-scale", type=float, default=10.0)
    p.add_argument("--bleu-smooth", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare module variants")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pin-checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--variants", default="")
    p.add_argument("--d-down-grid", default="")
    p.add_argument("--n-q-grid", default="")
    p.add_argument("--n-test-games", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except err.PlayercapError as e:
        print(f"error: {e}", file=sys.stderr)
        for cls, code in _EXIT_CODES:
            if isinstance(e, cls):
                return code
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
