"""Command-line entry point: ``attvad <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataprep as dp
from .attention import AttentionKind
from .evaluate import EvalReport, CellResult, dump_hidden_maps, evaluate, relative_improvement
from .features import AudioFormatError, load_features, logmel, read_wav, save_features, write_wav
from .loss import LossSpec
from .model import CheckpointError, ModelConfig, build, count_params, load_checkpoint
from .trainer import NumericalAbort, TrainConfig, train, write_log

log = logging.getLogger("attvad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    input_dim: int = 40
    layers: int = 3
    hidden: int = 64
    attention: str = "none"
    # training
    initial_lr: float = 0.1
    lr_decay: float = 0.1
    lr_floor: float = 1e-5
    epochs: int = 20
    batch_size: int = 128
    bptt_T: int = 50
    patience: int = 1
    seed: int = 0
    # loss
    loss: str = "ce"
    gamma: float = 0.0
    prob_clamp: float = 1e-7
    # data
    manifest: str = ""
    cache_dir: str = ""
    condition: str = "pad1"
    snr_set: str = "-5,0,5,10"
    n_train: int = 200
    n_valid: int = 20
    n_test: int = 50
    dur_min: float = 2.0
    dur_max: float = 4.0
    noise_types: str = ",".join(dp.NOISE_TYPES)
    # sweep grid
    gammas: str = "0.2,0.4,0.6,0.8,1.0,2.0,3.0"
    conditions: str = "epd,nopad,pad1,pad2,pad3"
    models: str = "none,da2"

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.input_dim, self.layers, self.hidden,
                           AttentionKind.parse(self.attention), self.bptt_T)

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.gamma, self.prob_clamp)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.initial_lr, self.lr_decay, self.lr_floor, self.epochs,
                           self.batch_size, self.bptt_T, self.loss_spec(), self.seed, self.patience)

    def synth_config(self) -> dp.SynthConfig:
        return dp.SynthConfig(self.n_train, self.n_valid, self.n_test,
                              (self.dur_min, self.dur_max), parse_floats(self.snr_set),
                              self.condition, tuple(parse_list(self.noise_types)))

    def validate(self):
        self.model_config()
        self.train_config()
        self.synth_config()
        for c in parse_list(self.conditions):
            dp.ImbalanceCondition.parse(c)
        for m in parse_list(self.models):
            AttentionKind.parse(m)
        parse_floats(self.gammas)

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def parse_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in parse_list(text))
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def load_run_config(path) -> dict:
    """Parse a ``key=value`` file (``#`` comments allowed); unknown keys are rejected."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"--config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        if key not in _FIELD_TYPES:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return values


def resolve_config(args) -> RunConfig:
    values = load_run_config(args.config) if getattr(args, "config", None) else {}
    for key in _FIELD_TYPES:
        flag_val = getattr(args, f"cfg_{key}", None)
        if flag_val is not None:
            values[key] = _coerce(key, str(flag_val))
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def write_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.txt"
    path.write_text(cfg.dumps())
    return path


# ---------------------------------------------------------------------------
# subcommands


def _utterances(cfg: RunConfig, manifest: str | None = None):
    manifest = manifest or cfg.manifest
    if not manifest:
        raise UsageError("a manifest is required (--manifest)")
    records = dp.read_manifest(manifest)
    cache = cfg.cache_dir or None
    return [dp.load_utterance(r, cache) for r in records]


def cmd_synth(args, cfg: RunConfig):
    out = Path(args.out or "data/synth")
    records = dp.synth_corpus(cfg.seed, cfg.synth_config(), out)
    write_config(cfg, out)
    ratio = dp.class_ratio([dp.read_labels(r.label_path) for r in records if r.split == "train"])
    print(f"wrote {len(records)} utterances to {out / 'manifest.csv'}")
    print(f"train speech/non-speech: {ratio[0]:.2f} / {ratio[1]:.2f}")


def cmd_featurize(args, cfg: RunConfig):
    if args.wav:
        out = Path(args.out or Path(args.wav).with_suffix(".feat"))
        feats = logmel(read_wav(args.wav))
        save_features(out, feats)
        print(f"{out}: {feats.shape[0]} frames")
        return
    out = Path(args.out or cfg.cache_dir or "features")
    out.mkdir(parents=True, exist_ok=True)
    records = dp.read_manifest(args.manifest or cfg.manifest)
    for rec in records:
        save_features(out / f"{rec.utt_id}.feat", logmel(read_wav(rec.wav_path)))
    print(f"featurized {len(records)} utterances into {out}")


def cmd_label(args, cfg: RunConfig):
    wavs = [Path(args.wav)] if args.wav else sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise dp.DataError("no WAV files to label")
    for wav in wavs:
        labels = dp.energy_label(read_wav(wav))
        if args.wav and args.out:
            target = Path(args.out)
        else:
            target_dir = Path(args.out) if args.out else wav.parent
            target_dir.mkdir(parents=True, exist_ok=True)
            target = target_dir / (wav.stem + ".lab")
        dp.write_labels(target, labels)
        print(f"{target}: {len(labels)} frames, {int(labels.sum())} speech")


def cmd_prep(args, cfg: RunConfig):
    """Condition + noise mixing for a clean-speech list (real-data path)."""
    out = Path(args.out or "data/prepared")
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    noises = sorted(Path(args.noise_dir).glob("*.wav"))
    if not noises:
        raise dp.DataError(f"{args.noise_dir}: no noise WAV files")
    noise_clips = {p.stem: read_wav(p) for p in noises}
    snrs = parse_floats(cfg.snr_set)
    condition = dp.ImbalanceCondition.parse(cfg.condition)
    records = []
    with open(args.clean_list, newline="") as fh:
        rows = list(csv.DictReader(fh))
    base = Path(args.clean_list).parent
    for i, row in enumerate(rows):
        clip = read_wav(base / row["wav_path"])
        if row.get("label_path"):
            labels = dp.read_labels(base / row["label_path"])
        else:
            labels = dp.energy_label(clip)
        split = row.get("split") or "train"
        cond = condition if split != "test" else dp.ImbalanceCondition.NOPAD
        clip, labels = dp.apply_condition(clip, labels, cond)
        rng = dp.utterance_rng(cfg.seed, i, 1)
        noise_type = sorted(noise_clips)[int(rng.integers(len(noise_clips)))]
        snr = snrs[int(rng.integers(len(snrs)))]
        noise = noise_clips[noise_type]
        if len(noise) < len(clip):
            reps = -(-len(clip) // len(noise))
            noise = type(noise)(np.tile(noise.samples, reps), noise.sample_rate)
        noisy = dp.mix_at_snr(clip, noise, snr, rng)
        utt_id = row.get("utt_id") or f"utt{i:05d}"
        write_wav(out / "wav" / f"{utt_id}.wav", noisy)
        dp.write_labels(out / "labels" / f"{utt_id}.lab", labels)
        records.append(dp.ManifestRecord(utt_id, f"wav/{utt_id}.wav", f"labels/{utt_id}.lab",
                                         split, noise_type, snr, cond.value))
    dp.write_manifest(out / "manifest.csv", records)
    write_config(cfg, out)
    print(f"wrote {len(records)} utterances to {out / 'manifest.csv'}")


def run_training(cfg: RunConfig, out_dir, utterances=None):
    out_dir = Path(out_dir)
    write_config(cfg, out_dir)
    utterances = utterances if utterances is not None else _utterances(cfg)
    ckpt, records = train(cfg.model_config(), cfg.train_config(), utterances, out_dir)
    (out_dir / "logs").mkdir(exist_ok=True)
    write_log(out_dir / "logs" / "train_log.csv", records)
    (out_dir / "train_log.csv").unlink(missing_ok=True)
    return ckpt, records


def cmd_train(args, cfg: RunConfig):
    out = Path(args.out or "runs/default")
    _, records = run_training(cfg, out)
    best = max((r.val_auc for r in records), default=float("nan"))
    print(f"trained {len(records)} epochs; best valid AUC {best:.4f}; checkpoint {out / 'checkpoint.bin'}")


def read_report_csv(path) -> EvalReport:
    report = EvalReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            report.cells[(row["noise"], float(row["snr_db"]))] = CellResult(float(row["auc"]), int(row["n_frames"]))
    snrs = sorted({s for _, s in report.cells})
    for snr in snrs:
        report.per_snr[snr] = float(np.mean([c.auc for (n, s), c in report.cells.items() if s == snr]))
    if report.per_snr:
        report.overall = float(np.mean(list(report.per_snr.values())))
    return report


def cmd_eval(args, cfg: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    utts = [u for u in _utterances(cfg, args.manifest) if u.split == args.split]
    if not utts:
        raise dp.DataError(f"no utterances in split {args.split!r}")
    report = evaluate(ckpt, utts)
    out = Path(args.out or Path(args.checkpoint).parent / "reports")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    baseline = read_report_csv(args.baseline) if args.baseline else None
    summary = report.summary(baseline)
    (out / "summary.txt").write_text(summary + "\n")
    write_config(cfg, out)
    print(summary)


def cmd_infer(args, cfg: RunConfig):
    from .evaluate import score_utterance

    ckpt = load_checkpoint(args.checkpoint)
    probs = score_utterance(ckpt, logmel(read_wav(args.wav)))
    text = "".join(f"{p:.6f}\n" for p in probs)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_dump_attn(args, cfg: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    feats = logmel(read_wav(args.wav))
    labels = dp.read_labels(args.labels) if args.labels else None
    stop = args.stop if args.stop is not None else min(feats.shape[0], args.start + 20)
    paths = dump_hidden_maps(ckpt, feats, labels, args.start, stop, args.out or "attn_dump")
    for p in paths.values():
        print(p)


def param_table(cfg: RunConfig, kinds) -> list[tuple[str, int, int, int]]:
    """(kind, total, attention, increase-vs-none) per attention kind."""
    rows = []
    base = None
    for kind in kinds:
        mc = dataclasses.replace(cfg.model_config(), attention=AttentionKind.parse(kind))
        pc = count_params(build(mc, 0))
        if base is None:
            base = count_params(build(dataclasses.replace(mc, attention=AttentionKind.NONE), 0)).total
        rows.append((AttentionKind.parse(kind).value, pc.total, pc.breakdown["attention"], pc.total - base))
    return rows


def cmd_param_count(args, cfg: RunConfig):
    mc = cfg.model_config()
    pc = count_params(build(mc, 0))
    print(f"model: layers={mc.layers} hidden={mc.hidden} input={mc.input_dim} attention={mc.attention.value}")
    for name, n in pc.breakdown.items():
        print(f"{name:<10} {n:>9,}")
    print(f"{'total':<10} {pc.total:>9,}")
    if args.all:
        print()
        print(f"{'kind':<6} {'total':>9} {'added':>7} {'increase':>9}")
        for kind, total, _, added in param_table(cfg, [k.value for k in AttentionKind]):
            print(f"{kind:<6} {total:>9,} {added:>7,} {100.0 * added / (total - added):>8.2f}%")


# ---------------------------------------------------------------------------
# sweep

SWEEP_COLUMNS = ("loss", "gamma", "condition", "model", "overall_auc", "pooled_auc",
                 "speech_ratio", "run_dir")


def sweep_grid(cfg: RunConfig):
    gammas = sorted(set(parse_floats(cfg.gammas)) | {0.0})
    conditions = [dp.ImbalanceCondition.parse(c).value for c in parse_list(cfg.conditions)]
    models = [AttentionKind.parse(m).value for m in parse_list(cfg.models)]
    return [(g, c, m) for c in conditions for m in models for g in gammas]


def _sweep_one(job):
    cfg, gamma, condition, model, data_dir, run_dir = job
    cfg = dataclasses.replace(cfg, gamma=gamma, loss="ce" if gamma == 0 else "fl",
                              condition=condition, attention=model,
                              manifest=str(Path(data_dir) / "manifest.csv"))
    ckpt, _ = run_training(cfg, run_dir)
    utts = _utterances(cfg)
    report = evaluate(ckpt, [u for u in utts if u.split == "test"])
    (Path(run_dir) / "reports").mkdir(exist_ok=True)
    report.write_csv(Path(run_dir) / "reports" / "eval.csv")
    (Path(run_dir) / "reports" / "summary.txt").write_text(report.summary() + "\n")
    ratio = dp.class_ratio([u.labels for u in utts if u.split == "train"])[0]
    return {
        "loss": cfg.loss, "gamma": f"{gamma:g}", "condition": condition, "model": model,
        "overall_auc": repr(report.overall), "pooled_auc": repr(report.pooled_auc),
        "speech_ratio": f"{ratio:.2f}", "run_dir": str(run_dir),
    }


def cmd_sweep(args, cfg: RunConfig):
    out = Path(args.out or "runs/sweep")
    write_config(cfg, out)
    grid = sweep_grid(cfg)
    data_dirs = {}
    for _, condition, _ in grid:
        if condition in data_dirs:
            continue
        if args.data_root:
            data_dirs[condition] = Path(args.data_root) / condition
        else:
            d = out / "data" / condition
            if not (d / "manifest.csv").exists():
                dp.synth_corpus(cfg.seed, dataclasses.replace(cfg, condition=condition).synth_config(), d)
            data_dirs[condition] = d
    jobs = [(cfg, g, c, m, data_dirs[c], out / f"{c}_{m}_{'ce' if g == 0 else f'fl{g:g}'}")
            for g, c, m in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    with open(out / "sweep_results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} runs; results in {out / 'sweep_results.csv'}")


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value run configuration file")
    group = p.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attvad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        _add_config_flags(p)
        p.add_argument("--out", help="output file or directory")
        return p

    add("synth", cmd_synth, "generate a synthetic corpus")
    p = add("featurize", cmd_featurize, "compute log-mel feature caches")
    p.add_argument("--wav")
    p = add("label", cmd_label, "energy-based labels for clean WAVs")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--wav")
    g.add_argument("--wav-dir")
    p = add("prep", cmd_prep, "pad/trim and noise-mix a clean-speech list")
    p.add_argument("--clean-list", required=True, help="CSV with utt_id, wav_path[, label_path, split]")
    p.add_argument("--noise-dir", required=True)
    add("train", cmd_train, "train a model")
    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--baseline", help="baseline eval.csv for relative improvement")
    p = add("infer", cmd_infer, "per-frame speech probabilities for one WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p = add("dump-attn", cmd_dump_attn, "dump last-layer hidden maps before/after refinement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--labels")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--stop", type=int)
    p = add("param-count", cmd_param_count, "learnable parameter breakdown")
    p.add_argument("--all", action="store_true", help="compare every attention kind")
    p = add("sweep", cmd_sweep, "gamma x condition x model grid of train+eval runs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--data-root", help="directory holding <condition>/manifest.csv")
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        args.manifest = cfg.manifest or None
        args.func(args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"attvad: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"attvad: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dp.DataError, AudioFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"attvad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
