"""``mtse`` command-line entry point.

Every subcommand reads an optional ``key = value`` config file
(``--config``), applies ``--set KEY=VALUE`` and flag overrides on top, and
writes the resolved config next to its outputs so a run can be repeated
from the record alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, autodiff, config, datasim, dsp, trainer
from .asr_model import PRESETS, AsrModelConfig, build_asr_model, load_asr_model
from .errors import ConfigurationError, MtseError
from .se_model import SeModelConfig, build_se_model, enhance, load_se_model

log = logging.getLogger("mtse")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


# --- run configs -------------------------------------------------------------


@dataclass
class CorpusPaths:
    """Where a training command finds its data, relative to the working directory."""

    corpus: str = "corpus"
    se_manifest: str = ""  # clean references for SE-steps; default <corpus>/train/clean.tsv
    asr_manifest: str = ""  # transcribed audio for ASR-steps; default <corpus>/train/noisy.tsv

    def clean_manifest(self) -> Path:
        return Path(self.se_manifest or Path(self.corpus) / "train" / "clean.tsv")

    def noisy_manifest(self) -> Path:
        return Path(self.asr_manifest or Path(self.corpus) / "train" / "noisy.tsv")


@dataclass
class PretrainSeRun(trainer.TrainSchedule, CorpusPaths):
    se_config: str = ""  # optional enhancer config file; defaults when empty
    causal: bool = True


@dataclass
class PretrainAsrRun(trainer.TrainSchedule, CorpusPaths):
    iterations: int = 1500
    batch_size: int = 8
    asr_preset: str = "strong"
    asr_config: str = ""  # optional recognizer config file, overrides the preset
    multi_condition: bool = True


@dataclass
class MtlRun(trainer.TrainSchedule, CorpusPaths):
    se: str = ""  # seed enhancer checkpoint
    asr: str = ""  # frozen recognizer checkpoint
    learning_rate: float = 3e-4  # fine-tuning from the seed, below the pre-training rate
    batch_size: int = 2
    asr_batch_size: int = 2


@dataclass
class SweepRun(MtlRun):
    probabilities: tuple[float, ...] = (0.0, 0.5, 1.0)
    test_manifest: str = ""  # default <corpus>/test/noisy.tsv


def _resolve(cls, args, **extra):
    mapping = config.parse_kv(Path(args.config).read_text()) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        mapping[k] = v
    overrides = {"seed": args.seed, **extra}
    fields = {f.name for f in dataclasses.fields(cls)}
    return config.from_kv(cls, mapping, **{k: v for k, v in overrides.items() if k in fields})


def _schedule(run) -> trainer.TrainSchedule:
    names = {f.name for f in dataclasses.fields(trainer.TrainSchedule)}
    return trainer.TrainSchedule(**{k: v for k, v in dataclasses.asdict(run).items() if k in names})


def _require(path, what: str) -> Path:
    path = Path(path)
    if not str(path) or not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _se_stream(run, split: str = "train") -> trainer.SeStream:
    clean = trainer.load_utterances(datasim.read_manifest(_require(run.clean_manifest(), "SE manifest")))
    noises = [w.samples.astype(np.float32) for w in datasim.load_noises(run.corpus, split)]
    return trainer.SeStream(clean, noises, run.snr_low, run.snr_high, int(run.crop_seconds * dsp.CANONICAL_RATE))


def _no_config(args) -> None:
    """enhance and evaluate take no config keys, so any key given is a typo."""
    mapping = config.parse_kv(Path(args.config).read_text()) if args.config else {}
    keys = list(mapping) + [item.partition("=")[0].strip() for item in args.set or []]
    if keys:
        raise ConfigurationError(f"{args.command} has no config keys; got {keys}")


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    mapping = config.parse_kv(Path(args.config).read_text()) if args.config else {}
    for item in args.set or []:
        k, _, v = item.partition("=")
        mapping[k.strip()] = v.strip()
    cfg = config.from_kv(datasim.CorpusConfig, mapping)
    out = Path(args.out or "corpus")
    splits = datasim.build_corpus(cfg, out, args.seed if args.seed is not None else 0)
    for split, (clean, _) in splits.items():
        print(f"{split}\t{len(clean)} utterances\t{out / split}")
    return 0


def cmd_pretrain_se(args) -> int:
    run = _resolve(PretrainSeRun, args, corpus=args.corpus)
    out = _out_dir(args, "se")
    config.save_config(out / "run.cfg", run)
    se_cfg = config.load_config(SeModelConfig, run.se_config) if run.se_config else SeModelConfig(causal=run.causal)
    model = build_se_model(se_cfg, run.seed)
    try:
        trainer.pretrain_se(model, _se_stream(run), _schedule(run), out)
    except trainer.TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_good}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out / "se_seed.mtse")
    return 0


def cmd_pretrain_asr(args) -> int:
    run = _resolve(PretrainAsrRun, args, corpus=args.corpus)
    if run.asr_preset not in PRESETS:
        raise ConfigurationError(f"asr_preset must be one of {sorted(PRESETS)}")
    out = _out_dir(args, "asr")
    config.save_config(out / "run.cfg", run)
    asr_cfg = config.load_config(AsrModelConfig, run.asr_config) if run.asr_config else PRESETS[run.asr_preset]
    model = build_asr_model(asr_cfg, run.seed)
    clean = trainer.load_utterances(datasim.read_manifest(_require(run.clean_manifest(), "clean manifest")))
    noisy = trainer.load_utterances(datasim.read_manifest(_require(run.noisy_manifest(), "noisy manifest")))
    stream = _se_stream(run) if run.multi_condition else None
    trainer.pretrain_asr(model, clean, noisy, stream, _schedule(run), out, run.multi_condition)
    print(out / "asr.mtse")
    return 0


def _mtl_inputs(run):
    se = load_se_model(_require(run.se, "seed enhancer checkpoint"))
    asr = load_asr_model(_require(run.asr, "recognizer checkpoint"), frozen=True)
    asr_data = trainer.load_utterances(datasim.read_manifest(_require(run.noisy_manifest(), "ASR manifest")))
    return se, asr, _se_stream(run), asr_data


def cmd_mtl_train(args) -> int:
    run = _resolve(MtlRun, args, corpus=args.corpus, se=args.se, asr=args.asr, se_step_probability=args.p)
    out = _out_dir(args, "mt")
    config.save_config(out / "run.cfg", run)
    se, asr, stream, asr_data = _mtl_inputs(run)
    before = autodiff.checksum(asr)
    logs = trainer.mtl_train(se, asr, stream, asr_data, _schedule(run), out, run.asr_batch_size)
    if autodiff.checksum(asr) != before:
        raise MtseError("recognizer parameters changed during multi-task training")
    n_se = sum(e.step_kind == trainer.SE for e in logs)
    print(f"{out / 'se_mt.mtse'}\tSE-steps {n_se}\tASR-steps {len(logs) - n_se}")
    return 0


def cmd_sweep(args) -> int:
    run = _resolve(SweepRun, args, corpus=args.corpus, se=args.se, asr=args.asr)
    out = _out_dir(args, "sweep")
    config.save_config(out / "run.cfg", run)
    se, asr, stream, asr_data = _mtl_inputs(run)
    test = Path(run.test_manifest or Path(run.corpus) / "test" / "noisy.tsv")
    test_noisy = trainer.load_utterances(datasim.read_manifest(_require(test, "test manifest")))
    clean_path = test.with_name("clean.tsv")
    test_clean = trainer.load_utterances(datasim.read_manifest(clean_path)) if clean_path.exists() else None
    rows = trainer.sweep_se_probability(run.probabilities, se, asr, stream, asr_data, test_noisy, test_clean,
                                        _schedule(run), out, asr_batch_size=run.asr_batch_size)
    print("se_step_probability\tter_pct\tsi_sdr_db")
    for r in rows:
        print(f"{r.se_step_probability:.2f}\t{r.ter:.2f}\t{'-' if r.si_sdr is None else f'{r.si_sdr:.2f}'}")
    return 0


def cmd_enhance(args) -> int:
    _no_config(args)
    model = load_se_model(_require(args.model, "enhancer checkpoint"))
    w = dsp.read_wav(_require(args.input, "input wav"))
    dsp.write_wav(args.out, enhance(model, w))
    print(args.out)
    return 0


def _parse_systems(items) -> dict:
    systems = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--se expects NAME=PATH, got {item!r}")
        if name in systems or name == "noisy":
            raise UsageError(f"duplicate or reserved system name {name!r}")
        systems[name] = path
    return systems


def cmd_evaluate(args) -> int:
    _no_config(args)
    systems = {"noisy": None}
    for name, path in _parse_systems(args.se).items():
        systems[name] = load_se_model(_require(path, f"enhancer checkpoint for {name}"))
    asr = load_asr_model(_require(args.asr, "recognizer checkpoint"), frozen=True)
    manifest = _require(args.manifest, "test manifest")
    noisy = trainer.load_utterances(datasim.read_manifest(manifest))
    clean_path = Path(args.clean) if args.clean else manifest.with_name("clean.tsv")
    clean = None
    if clean_path.exists() and clean_path.resolve() != manifest.resolve():
        clean = trainer.load_utterances(datasim.read_manifest(clean_path))
    elif args.clean:
        raise UsageError(f"clean manifest not found: {clean_path}")
    report = trainer.evaluate_systems(systems, asr, noisy, clean)
    out = Path(args.out or "report.tsv")
    report.write(out)
    print("system\tutterances\tsi_sdr_db\tsdr_db\tstoi\tter_pct")
    fmt = lambda v: "-" if v is None else f"{v:.3f}"  # noqa: E731
    for s in report.summaries():
        print(f"{s.system}\t{s.utterances}\t{fmt(s.si_sdr)}\t{fmt(s.sdr)}\t{fmt(s.stoi)}\t{s.ter:.2f}")
    print(f"report written to {out}")
    return 0


# --- parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", metavar="PATH", help=out_help)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1, deterministic)")
    p.add_argument("--f64", action="store_true", help="64-bit verification mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtse", description="Multi-task training of a speech enhancer against a frozen recognizer.")
    parser.add_argument("--version", action="version", version=f"mtse {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("simulate", help="render the synthetic train/test corpus")
    _common(p, "corpus directory (default: corpus)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain-se", help="pre-train the enhancer on on-the-fly mixtures")
    _common(p, "output directory (default: se)")
    p.add_argument("--corpus", metavar="DIR", help="corpus directory")
    p.set_defaults(func=cmd_pretrain_se)

    p = sub.add_parser("pretrain-asr", help="train the recognizer on clean and noisy audio")
    _common(p, "output directory (default: asr)")
    p.add_argument("--corpus", metavar="DIR", help="corpus directory")
    p.set_defaults(func=cmd_pretrain_asr)

    for name, func, default, help_ in (
        ("mtl-train", cmd_mtl_train, "mt", "alternate SE-steps and ASR-steps against the frozen recognizer"),
        ("sweep", cmd_sweep, "sweep", "multi-task runs over several SE-step probabilities"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p, f"output directory (default: {default})")
        p.add_argument("--corpus", metavar="DIR", help="corpus directory")
        p.add_argument("--se", metavar="PATH", help="seed enhancer checkpoint")
        p.add_argument("--asr", metavar="PATH", help="frozen recognizer checkpoint")
        if name == "mtl-train":
            p.add_argument("--p", type=float, metavar="PROB", help="SE-step probability (overrides the config)")
        p.set_defaults(func=func)

    p = sub.add_parser("enhance", help="enhance one 16 kHz wav file")
    _common(p, "output wav path")
    p.add_argument("--model", metavar="PATH", required=True, help="enhancer checkpoint")
    p.add_argument("--in", dest="input", metavar="WAV", required=True, help="input wav path")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score enhancers with signal metrics and token error rate")
    _common(p, "report path (default: report.tsv)")
    p.add_argument("--se", metavar="NAME=PATH", action="append", help="enhancer to score (repeatable)")
    p.add_argument("--asr", metavar="PATH", required=True, help="recognizer checkpoint")
    p.add_argument("--manifest", metavar="PATH", required=True, help="noisy test manifest")
    p.add_argument("--clean", metavar="PATH", help="clean reference manifest (default: clean.tsv beside --manifest)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "enhance" and not args.out:
        parser.error("enhance requires --out")
    level = os.environ.get("MTSE_LOG", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        parser.error(f"MTSE_LOG must be a logging level name, got {level!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    autodiff.set_threads(args.threads)
    autodiff.set_precision(args.f64)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"mtse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MtseError, OSError) as exc:
        print(f"mtse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
