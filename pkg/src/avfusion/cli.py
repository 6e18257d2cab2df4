"""Command-line entry point: ``avfusion <command> [options] [--key value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .config import RunConfig, load_run_config
from .embeddings import (
    VoiceNetSpec,
    build_voicenet,
    crop_frames,
    save_face_embedding,
    synth_generate,
    synth_tone_samples,
    train_voicenet,
)
from .errors import AVFusionError, DataError, InvalidConfig, NumericError
from .evaluation import (
    FUSION_MODES,
    identification_tables,
    run_identification_experiment,
    run_verification_experiment,
    tables_from_csv,
    train_fusion_model,
    verification_tables,
)
from .frontend import (
    AudioClip,
    apply_cmvn,
    apply_vad,
    compute_gammatonegram,
    compute_mfcc,
    load_wav,
    render_gammatonegram_image,
    save_wav,
)
from .manifest import ManifestRow, load_dataset, read_manifest, write_manifest
from .nn import gradient_check, network_to_bytes

logger = logging.getLogger("avfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FEATURE_EXT = {"mfcc": "fbfm", "gtg": "fbgt", "gtg-image": "pgm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    """Synthetic corpus: tone WAVs whose band energies encode the voice vector, plus face FBEM/PGM."""
    out = _out_dir(cfg)
    ds = synth_generate(cfg.synth())
    (out / "wav").mkdir(exist_ok=True)
    (out / "face").mkdir(exist_ok=True)
    rows = []
    for i, utt in enumerate(ds.utt_ids):
        samples = synth_tone_samples(ds.voice[i], cfg.sample_rate, cfg.utt_duration_s, seed=cfg.seed * 100003 + i)
        save_wav(out / "wav" / f"{utt}.wav", AudioClip(samples, cfg.sample_rate))
        save_face_embedding(out / "face" / f"{utt}.fbem", ds.face[i])
        formats.write_pgm(out / "face" / f"{utt}.pgm", ds.face_images[i])
        rows.append(ManifestRow(utt, ds.speakers[i], f"wav/{utt}.wav", f"face/{utt}.fbem"))
    write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} utterances for {ds.n_classes} speakers to {out}")
    return EXIT_OK


def _extract_one(task):
    utt_id, wav, feature, front, size = task
    try:
        clip = apply_vad(load_wav(wav), front)
        if feature == "mfcc":
            return utt_id, apply_cmvn(compute_mfcc(clip, front)).to_bytes(), None
        gtg = compute_gammatonegram(clip, front)
        if feature == "gtg":
            return utt_id, gtg.to_bytes(), None
        return utt_id, formats.pgm_to_bytes(render_gammatonegram_image(gtg, *size)), None
    except (AVFusionError, OSError) as exc:
        return utt_id, None, str(exc)


def cmd_extract(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    manifest = read_manifest(args.manifest)
    tasks = [
        (r.utt_id, manifest.resolve(r.wav_path), args.feature, cfg.frontend(), (args.width, args.height))
        for r in manifest.rows
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_extract_one, tasks))
    else:
        results = [_extract_one(t) for t in tasks]
    failed = []
    for utt_id, data, err in results:
        if err is not None:
            failed.append(utt_id)
            logger.error("%s: %s", utt_id, err)
        else:
            formats.write_bytes(out / f"{utt_id}.{FEATURE_EXT[args.feature]}", data)
    if failed:
        raise DataError(f"extraction failed for: {', '.join(failed)}")
    print(f"wrote {len(results)} {args.feature} files to {out}")
    return EXIT_OK


def _gate_network(spec: VoiceNetSpec):
    """Narrow copy of the VoiceNet topology, used for the gradient-check gate."""
    small = VoiceNetSpec(spec.in_dim, (6,) * 5, spec.kernels, spec.dilations, 8, 8, spec.n_classes)
    return build_voicenet(small, seed=0)


def cmd_train_voice(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ds = load_dataset(read_manifest(args.manifest), cfg.frontend(), args.jobs)
    spec = cfg.voicenet(ds.n_classes)
    gate = _gate_network(spec)
    x = np.random.default_rng(cfg.seed).standard_normal((gate.receptive_field + 8, spec.in_dim))
    err = gradient_check(gate, x, 0, eps=1e-5, seed=cfg.seed)
    if not err < cfg.gradcheck_tolerance:
        raise NumericError(f"gradient check failed: relative error {err:.3e} >= {cfg.gradcheck_tolerance:g}")
    logger.info("gradient check passed (%.2e)", err)
    frames = crop_frames(ds.voice_frames, cfg.voice_crop_frames or None)
    result = train_voicenet(frames, ds.labels, spec, cfg.voice_train())
    formats.write_bytes(out / "voicenet.fbnn", network_to_bytes(result.network))
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "learning_rate", "loss"])
        for i, (lr, loss) in enumerate(zip(result.learning_rates, result.losses), start=1):
            w.writerow([i, f"{lr:.6e}", f"{loss:.6f}"])
    print(f"trained {result.epochs_run} epochs, final loss {result.losses[-1]:.4f}")
    return EXIT_OK


def cmd_train_fusion(args, cfg: RunConfig) -> int:
    if cfg.mode not in FUSION_MODES:
        raise InvalidConfig(f"train-fusion needs mode in {', '.join(FUSION_MODES)}, got {cfg.mode!r}")
    out = _out_dir(cfg)
    ds = load_dataset(read_manifest(args.manifest), cfg.frontend(), args.jobs)
    model = train_fusion_model(ds, cfg.mode, cfg.experiment())
    formats.write_bytes(out / f"fusion_{cfg.mode}.fbsm", model.to_bytes())
    print(f"fusion layer {cfg.mode}: {model.weights.shape[1]} inputs, {model.weights.shape[0]} classes")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    if args.synthetic:
        ds = synth_generate(cfg.synth())
    elif args.manifest:
        ds = load_dataset(read_manifest(args.manifest), cfg.frontend(), args.jobs)
    else:
        raise UsageError("eval needs --manifest or --synthetic")
    exp = cfg.experiment()
    if cfg.task == "id":
        md, table = identification_tables(run_identification_experiment(ds, cfg.mode, exp))
    else:
        md, table = verification_tables(run_verification_experiment(ds, cfg.mode, exp))
    stem = f"{cfg.task}_{cfg.mode}"
    (out / f"{stem}.md").write_text(md, encoding="utf-8")
    (out / f"{stem}.csv").write_text(table, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    src = Path(args.inputs)
    tables = sorted(src.glob("id_*.csv")) + sorted(src.glob("verify_*.csv"))
    if not tables:
        raise DataError(f"no id_*.csv or verify_*.csv reports in {src}")
    out = _out_dir(cfg)
    parts = []
    for path in tables:
        task, mode = path.stem.split("_", 1)
        parts.append(tables_from_csv(path.read_text(encoding="utf-8"), task, mode))
    (out / "report.md").write_text("\n".join(parts), encoding="utf-8")
    print(f"combined {len(parts)} tables into {out / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (config key 'seed')")
    common.add_argument("--out", help="output directory (config key 'out_dir')")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for feature extraction")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(
        prog="avfusion",
        description="Audio-visual person identification and verification.",
        epilog="Any config key can be overridden as --key value (dashes or underscores).",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="write a synthetic corpus and manifest")

    p = sub.add_parser("extract", parents=[common], help="compute per-utterance features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", required=True, choices=sorted(FEATURE_EXT))
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--height", type=int, default=224)

    p = sub.add_parser("train-voice", parents=[common], help="train VoiceNet after a gradient-check gate")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train-fusion", parents=[common], help="train a fusion softmax on the whole manifest")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("eval", parents=[common], help="K-fold identification or verification experiment")
    p.add_argument("--manifest")
    p.add_argument("--synthetic", action="store_true", help="use in-memory synthetic embeddings")

    p = sub.add_parser("report", parents=[common], help="merge CSV reports into one Markdown file")
    p.add_argument("--inputs", required=True, help="directory holding id_*.csv / verify_*.csv")
    return parser


def parse_overrides(tokens: list) -> dict:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into config overrides."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"{tok} needs a value")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train-voice": cmd_train_voice,
    "train-fusion": cmd_train_fusion,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args, rest = build_parser().parse_known_args(argv)
        overrides = parse_overrides(rest)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AVFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
