"""Command-line interface: ``audiocap <command> ...``."""
from __future__ import annotations

import argparse
import csv
import gc
import json
import logging
import math
import os
import sys
import time
import wave
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .errors import AudiocapError, ConfigurationError, TrainingDiverged
from .features import FeatureExtractionConfig, load_lmel, log_mel, read_wav, save_lmel
from .metrics import EvaluationItem, evaluate_corpus
from .model import (
    EVALUATED_FACTORS,
    DecoderState,
    ModelConfig,
    decode_step,
    encode,
    final_length,
    init_params,
    param_count,
)
from .numcore import make_rng
from .textproc import (
    Vocabulary,
    build_vocab,
    decode_indices,
    encode_caption,
    normalize_caption,
    read_captions_csv,
    token_weights,
)
from .training import Example, TrainConfig, evaluate_split, train

log = logging.getLogger("audiocap")

REFERENCE_PARAM_COUNT = 4_573_711
PATH_KEYS = ("audio_dir", "captions", "features_dir", "out_dir")


@dataclass
class RunConfig:
    seed: int = 0
    features: FeatureExtractionConfig = field(default_factory=FeatureExtractionConfig)
    model: dict = field(default_factory=dict)  # ModelConfig fields; vocab_size comes from the data
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=lambda: dict.fromkeys(PATH_KEYS))

    def to_dict(self) -> dict:
        model = ModelConfig().to_dict()
        model.update(self.model)
        model["vocab_size"] = self.model.get("vocab_size")
        return {"seed": self.seed, "features": self.features.to_dict(), "model": model,
                "train": self.train.to_dict(), "paths": dict(self.paths)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        model = dict(d.get("model", {}))
        bad = set(model) - {f.name for f in fields(ModelConfig)}
        if bad:
            raise ConfigurationError(f"unknown model config keys: {sorted(bad)}")
        if model.get("vocab_size") is None:
            model.pop("vocab_size", None)
        paths = dict.fromkeys(PATH_KEYS)
        extra = set(d.get("paths", {})) - set(PATH_KEYS)
        if extra:
            raise ConfigurationError(f"unknown path keys: {sorted(extra)}")
        paths.update(d.get("paths", {}))
        return cls(
            seed=int(d.get("seed", 0)),
            features=FeatureExtractionConfig.from_dict(d.get("features", {})),
            model=model,
            train=TrainConfig.from_dict(d.get("train", {})),
            paths=paths,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        given = self.model.get("vocab_size")
        if given is not None and given != vocab_size:
            raise ConfigurationError(f"config vocab_size {given} != vocabulary size {vocab_size}")
        return ModelConfig(**{**self.model, "vocab_size": vocab_size})


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = RunConfig.from_dict(json.loads(path.read_text()))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    train_d = cfg.train.to_dict()
    train_d["rng_seed"] = cfg.seed
    cfg.train = TrainConfig(**train_d)
    return cfg


# Feature extraction -------------------------------------------------------------

def _extract_one(job):
    wav_path, out_path, feat_cfg = job
    clip = read_wav(wav_path)
    feats = log_mel(clip, feat_cfg, source_id=Path(wav_path).name)
    save_lmel(out_path, feats.data)
    return feats.num_frames


def _wav_duration(path: Path) -> float:
    with wave.open(str(path), "rb") as w:
        return w.getnframes() / w.getframerate()


def _lmel_frames(path: Path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(14)
    return int.from_bytes(head[6:10], "little")


def cmd_extract_features(args, cfg: RunConfig) -> int:
    audio_dir = Path(args.audio_dir or cfg.paths["audio_dir"] or "")
    out_dir = Path(args.out_dir or cfg.paths["features_dir"] or "")
    if not audio_dir.is_dir():
        raise FileNotFoundError(f"audio directory not found: {audio_dir}")
    wavs = sorted(p for p in audio_dir.iterdir() if p.suffix.lower() == ".wav")
    if not wavs:
        log.error("no audio files in %s", audio_dir)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs, skipped = [], []
    for wav in wavs:
        out = out_dir / f"{wav.stem}.lmel"
        if not args.force and out.is_file() and out.stat().st_mtime >= wav.stat().st_mtime:
            skipped.append(wav)
        else:
            jobs.append((wav, out, cfg.features))
    workers = args.workers or os.cpu_count() or 1
    failed: list[tuple[Path, str]] = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job[0], pool.submit(_extract_one, job)) for job in jobs]
            for wav, fut in futures:
                try:
                    fut.result()
                except Exception as exc:  # noqa: BLE001 - reported per file
                    failed.append((wav, str(exc)))
    else:
        for job in jobs:
            try:
                _extract_one(job)
            except Exception as exc:  # noqa: BLE001
                failed.append((job[0], str(exc)))
    bad = {w for w, _ in failed}
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file_name", "T", "duration_seconds"])
        for wav in wavs:
            if wav in bad:
                continue
            writer.writerow([wav.name, _lmel_frames(out_dir / f"{wav.stem}.lmel"),
                             f"{_wav_duration(wav):.6f}"])
    for wav, msg in failed:
        print(f"failed: {wav.name}: {msg}", file=sys.stderr)
    print(f"{len(jobs) - len(failed)} extracted, {len(skipped)} skipped, {len(failed)} failed")
    return 1 if failed else 0


# Vocabulary ---------------------------------------------------------------------

def cmd_build_vocab(args, cfg: RunConfig) -> int:
    captions = read_captions_csv(args.captions or cfg.paths["captions"])
    vocab = build_vocab(c for caps in captions.values() for c in caps)
    vocab.save(args.out, beta=cfg.train.beta_clamp)
    print(f"{len(vocab)} tokens written to {args.out}")
    return 0


# Training -------------------------------------------------------------------------

def _feature_path(features_dir: Path, file_name: str) -> Path:
    return features_dir / f"{Path(file_name).stem}.lmel"


def _load_features(features_dir: Path, names) -> dict[str, np.ndarray]:
    missing = [n for n in names if not _feature_path(features_dir, n).is_file()]
    if missing:
        for n in missing:
            print(f"missing features: {n}", file=sys.stderr)
        raise FileNotFoundError(f"{len(missing)} caption file(s) have no feature file in {features_dir}")
    return {n: load_lmel(_feature_path(features_dir, n)) for n in names}


def _write_predictions(path: Path, predictions: dict[str, list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file_name", "caption_predicted"])
        for name, words in predictions.items():
            writer.writerow([name, " ".join(words)])


def _epochs_writer(path: Path):
    fh = open(path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["epoch", "raw_loss", "rounded_loss", "seconds"])
    return fh, writer


def cmd_train(args, cfg: RunConfig) -> int:
    features_dir = Path(args.features_dir or cfg.paths["features_dir"] or "")
    captions_path = Path(args.captions or cfg.paths["captions"] or "")
    out_dir = Path(args.out_dir or cfg.paths["out_dir"] or "")
    if not captions_path.is_file():
        raise FileNotFoundError(f"captions file not found: {captions_path}")
    if not features_dir.is_dir():
        raise FileNotFoundError(f"features directory not found: {features_dir}")
    captions = read_captions_csv(captions_path)
    feats = _load_features(features_dir, list(captions))
    vocab = build_vocab(c for caps in captions.values() for c in caps)
    weights = token_weights(vocab, cfg.train.beta_clamp)
    model_cfg = cfg.model_config(len(vocab))
    widths = {f.shape[1] for f in feats.values()}
    if widths != {model_cfg.num_features}:
        raise ConfigurationError(
            f"feature width(s) {sorted(widths)} do not match model num_features {model_cfg.num_features}"
        )
    examples = [Example(feats[name], encode_caption(normalize_caption(c), vocab), name)
                for name, caps in captions.items() for c in caps]
    n_params = param_count(model_cfg)
    log.info("model has %d parameters (%d clips, %d examples, vocabulary %d)",
             n_params, len(feats), len(examples), len(vocab))

    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["model"] = model_cfg.to_dict()
    resolved["paths"].update(features_dir=str(features_dir), captions=str(captions_path),
                             out_dir=str(out_dir))
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
    vocab.save(out_dir / "vocab.json", beta=weights.beta)

    fh, writer = _epochs_writer(out_dir / "epochs.csv")

    def on_epoch(rec, _params):
        writer.writerow([rec.epoch, repr(rec.raw_loss), f"{rec.rounded_loss:.{cfg.train.loss_round_digits}f}",
                         f"{rec.seconds:.3f}"])
        fh.flush()
        print(f"epoch {rec.epoch:5d}  loss {rec.rounded_loss:.{cfg.train.loss_round_digits}f}", flush=True)

    try:
        result = train(examples, model_cfg, cfg.train, weights, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            ckpt.save_checkpoint(out_dir / "best.sscp", exc.last_good, model_cfg)
        raise
    finally:
        fh.close()
    ckpt.save_checkpoint(out_dir / "best.sscp", result.params, model_cfg)
    ckpt.save_checkpoint(out_dir / "last.sscp", result.last_params, model_cfg)
    preds = evaluate_split(feats, result.params, model_cfg, vocab.eos_index)
    _write_predictions(out_dir / "predictions.csv",
                       {k: decode_indices(v, vocab) for k, v in preds.items()})
    best = result.records[result.best_epoch]
    print(f"best epoch {best.epoch} rounded loss {best.rounded_loss:.{cfg.train.loss_round_digits}f}; "
          f"{len(result.records)} epochs run")
    return 0


# Prediction / evaluation --------------------------------------------------------

def _load_model(checkpoint_path: Path, vocab_path: str | None):
    if not checkpoint_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    vpath = Path(vocab_path) if vocab_path else checkpoint_path.parent / "vocab.json"
    if not vpath.is_file():
        raise FileNotFoundError(f"vocabulary not found: {vpath}")
    vocab = Vocabulary.load(vpath)
    model_cfg = ckpt.read_config(checkpoint_path)
    if model_cfg.vocab_size != len(vocab):
        raise ConfigurationError(
            f"vocabulary mismatch: checkpoint vocab_size={model_cfg.vocab_size}, "
            f"{vpath} has {len(vocab)} tokens"
        )
    params, model_cfg = ckpt.load_checkpoint(checkpoint_path)
    return params, model_cfg, vocab


def _check_widths(feats: dict[str, np.ndarray], model_cfg: ModelConfig) -> None:
    widths = {f.shape[1] for f in feats.values()}
    if widths and widths != {model_cfg.num_features}:
        raise ConfigurationError(
            f"feature width(s) {sorted(widths)} differ from checkpoint num_features {model_cfg.num_features}"
        )


def cmd_predict(args, cfg: RunConfig) -> int:
    params, model_cfg, vocab = _load_model(Path(args.checkpoint), args.vocab)
    features_dir = Path(args.features_dir)
    if not features_dir.is_dir():
        raise FileNotFoundError(f"features directory not found: {features_dir}")
    feats = {p.stem + ".wav": load_lmel(p) for p in sorted(features_dir.glob("*.lmel"))}
    _check_widths(feats, model_cfg)
    preds = evaluate_split(feats, params, model_cfg, vocab.eos_index)
    _write_predictions(Path(args.out), {k: decode_indices(v, vocab) for k, v in preds.items()})
    print(f"{len(preds)} predictions written to {args.out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    params, model_cfg, vocab = _load_model(Path(args.checkpoint), args.vocab)
    captions_path = Path(args.captions)
    if not captions_path.is_file():
        raise FileNotFoundError(f"captions file not found: {captions_path}")
    external = None
    if args.external:
        external = json.loads(Path(args.external).read_text())
    captions = read_captions_csv(captions_path)
    feats = _load_features(Path(args.features_dir), list(captions))
    _check_widths(feats, model_cfg)
    preds = evaluate_split(feats, params, model_cfg, vocab.eos_index)
    words = {k: decode_indices(preds.get(k, []), vocab) for k in captions}
    items = [EvaluationItem(k, words[k], [normalize_caption(c)[:-1] for c in captions[k]])
             for k in captions]
    report = evaluate_corpus(items, external)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_predictions(out / "predictions.csv", words)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_table())
    print(report.to_table(), end="")
    return 0


# Sub-sampling report ------------------------------------------------------------

def nominal_reduction(factor: int, layers: int) -> Fraction:
    """Percentage reduction 100 * (1 - M^-(L-1)), exact."""
    return 100 * (1 - Fraction(1, factor ** (layers - 1)))


def truncate_2dp(x: Fraction) -> str:
    hundredths = math.floor(x * 100)
    return f"{hundredths // 100:02d}.{hundredths % 100:02d}"


def subsample_rows(t_min: int, t_max: int, layers: int, factors) -> list[dict]:
    if t_min > t_max:
        raise ConfigurationError("t-min must not exceed t-max")
    if layers < 2:
        raise ConfigurationError("layers must be >= 2")
    rows = []
    for m in factors:
        lo, hi = final_length(t_min, m, layers), final_length(t_max, m, layers)
        rows.append({
            "M": m,
            "T_L_min": lo,
            "T_L_max": hi,
            "reduction": truncate_2dp(nominal_reduction(m, layers)),
            "measured_reduction": f"{100 * (1 - hi / t_max):.2f}",
            "degenerate": lo < 1,
        })
    return rows


def bench_inference(factors, layers: int, lengths, repeats: int = 8, seed: int = 0,
                    vocab_size: int = 4366, num_features: int = 64) -> dict[int, float]:
    """Mean over clips of the fastest of ``repeats`` encode + full-length decode runs.

    Factors are measured round-robin, alternating direction on every repeat, so
    slow drifts in machine load hit every factor alike.
    """
    rng = make_rng(seed, 11)
    clips = [rng.normal(size=(T, num_features)) for T in lengths]
    models = {}
    for m in factors:
        cfg = ModelConfig(num_layers=layers, subsample_factor=m, num_features=num_features,
                          vocab_size=vocab_size)
        models[m] = (cfg, init_params(cfg, seed))
    best = {(m, i): math.inf for m in factors for i in range(len(clips))}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for rep in range(repeats):
            for m in (factors if rep % 2 == 0 else factors[::-1]):
                cfg, params = models[m]
                for i, X in enumerate(clips):
                    t0 = time.perf_counter()
                    z, _ = encode(X, params, cfg)
                    state = DecoderState.initial(cfg)
                    for _ in range(cfg.max_decode_steps):
                        _, state = decode_step(z, state, params)
                    best[m, i] = min(best[m, i], time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return {m: float(np.mean([best[m, i] for i in range(len(clips))])) for m in factors}


def cmd_subsample_report(args, cfg: RunConfig) -> int:
    factors = [int(f) for f in args.factors.split(",")]
    rows = subsample_rows(args.t_min, args.t_max, args.layers, factors)
    times = None
    if args.bench:
        ok = [r["M"] for r in rows if not r["degenerate"]]
        times = bench_inference(list(ok), args.layers, (args.t_min, args.t_max), args.bench_repeats, cfg.seed)
    header = f"{'M':>3} {'T_L_min':>8} {'T_L_max':>8} {'reduction':>10}"
    if times is not None:
        header += f" {'seconds/clip':>13}"
    print(header)
    for r in rows:
        line = f"{r['M']:>3} {r['T_L_min']:>8} {r['T_L_max']:>8} {r['reduction'] + '%':>10}"
        if r["degenerate"]:
            line += "  degenerate"
        elif times is not None:
            line += f" {times[r['M']]:>13.4f}"
        print(line)
    if args.json:
        for r in rows:
            if times is not None and r["M"] in times:
                r["seconds_per_clip"] = times[r["M"]]
        Path(args.json).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def cmd_config(args, cfg: RunConfig) -> int:
    if args.dump_defaults:
        print(json.dumps(RunConfig().to_dict(), indent=2))
    else:
        print(json.dumps(cfg.to_dict(), indent=2))
    n = param_count(ModelConfig())
    print(f"# parameter count at default sizes: {n} (reported: {REFERENCE_PARAM_COUNT}, "
          f"delta {n - REFERENCE_PARAM_COUNT:+d})", file=sys.stderr)
    return 0


# Entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="audiocap", parents=[common],
                                     description="Audio captioning with temporal sub-sampling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features", parents=[common], help="WAV -> .lmel features")
    p.add_argument("--audio-dir")
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=0, help="0 = number of cores")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("build-vocab", parents=[common])
    p.add_argument("--captions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", parents=[common])
    p.add_argument("--features-dir")
    p.add_argument("--captions")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    p.add_argument("--vocab", help="defaults to vocab.json next to the checkpoint")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab")
    p.add_argument("--external", help='JSON sidecar {"meteor": x, "spice": y}')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("subsample-report", parents=[common])
    p.add_argument("--t-min", type=int, default=1292)
    p.add_argument("--t-max", type=int, default=2584)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--factors", default=",".join(map(str, EVALUATED_FACTORS)))
    p.add_argument("--bench", action="store_true")
    p.add_argument("--bench-repeats", type=int, default=8)
    p.add_argument("--json", help="also write the rows as JSON")
    p.set_defaults(func=cmd_subsample_report)

    p = sub.add_parser("config", parents=[common])
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args)
        return args.func(args, cfg)
    except (AudiocapError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
