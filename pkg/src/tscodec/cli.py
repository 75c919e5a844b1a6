"""Command-line entry point: ``tscodec {train,compress,decompress,eval,inspect,rates}``.

Progress and metrics go to stdout as one JSON object per line.  Failures
print a single ``error code=<CODE> message=<json string>`` line on stderr
and exit non-zero:

    2  usage error (bad flags)
    3  invalid configuration
    4  unreadable, malformed or mismatched input data/files
    5  frame file does not belong to the given bundle
    6  training diverged (non-finite loss)
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bitstream
from .bundle import Codec
from .errors import CodecError, ConfigError, FormatError
from .model import CodecConfig, coerce_section, parse_sections
from .training import TrainConfig, Trainer, evaluate, load_windows, save_binary, synthetic_windows
from .training.evaluate import average_error

EXIT_CODES = {
    "E_CONFIG": 3,
    "E_DIGEST_MISMATCH": 5,
    "E_NONFINITE": 6,
}
DEFAULT_EXIT = 4


def emit(record):
    print(json.dumps(record, sort_keys=False), flush=True)


def _read_config(path):
    if path is None:
        return CodecConfig().validate(), TrainConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            sections = parse_sections(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    extra = set(sections) - {"codec", "training"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    cfg = coerce_section(CodecConfig, sections.get("codec", {})).validate()
    tcfg = coerce_section(TrainConfig, sections.get("training", {})).validate()
    return cfg, tcfg


def _windows(path, cfg):
    try:
        return load_windows(path, (cfg.c_in, cfg.t_in))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None


def _load_bundle(path):
    try:
        return Codec.load(path)
    except OSError as exc:
        raise FormatError(f"cannot read bundle {path}: {exc.strerror}") from None


def _check_quantizers(n, cfg):
    if not 1 <= n <= cfg.n_quantizers:
        raise CodecError(f"--quantizers must be in [1, {cfg.n_quantizers}], got {n}", code="E_INDEX_RANGE")


def cmd_train(args):
    cfg, tcfg = _read_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    tcfg.threads = args.threads
    if args.data:
        train = _windows(args.data, cfg)
    else:
        train = synthetic_windows(args.synthetic, cfg.c_in, cfg.t_in, seed=tcfg.seed)
    if args.val:
        val = _windows(args.val, cfg)
    elif args.val_synthetic:
        val = synthetic_windows(args.val_synthetic, cfg.c_in, cfg.t_in, seed=tcfg.seed + 10_000)
    else:
        val = None
    if args.resume:
        try:
            trainer = Trainer.load_checkpoint(args.resume, train)
        except OSError as exc:
            raise FormatError(f"cannot read checkpoint {args.resume}: {exc.strerror}") from None
        if args.epochs is not None:
            trainer.tcfg.epochs = args.epochs
        trainer.tcfg.threads = args.threads
    else:
        trainer = Trainer(cfg, tcfg, train)
    emit({"event": "start", "train_windows": len(train), "encoder_params": trainer.enc.num_params(),
          "decoder_params": trainer.dec.num_params(), "step": trainer.state.step})
    trainer.fit(val, on_epoch=emit, time_budget=args.time_budget)
    if args.checkpoint:
        trainer.save_checkpoint(args.checkpoint)
    digest = trainer.codec().save(args.out)
    emit({"event": "done", "bundle": args.out, "digest": digest, "step": trainer.state.step})
    return 0


def cmd_compress(args):
    codec = _load_bundle(args.bundle)
    _check_quantizers(args.quantizers, codec.config)
    windows = _windows(args.input, codec.config)
    frames = codec.compress(windows, args.quantizers, args.threads)
    bitstream.write_frame_file(args.out, frames, codec.digest)
    record = {"event": "compress", "windows": len(frames)}
    record.update(bitstream.compression_ratio(codec.config, args.quantizers).as_dict())
    emit(record)
    return 0


def cmd_decompress(args):
    codec = _load_bundle(args.bundle)
    try:
        _, frames = bitstream.read_frame_file(args.frames, codec.digest)
    except OSError as exc:
        raise FormatError(f"cannot read {args.frames}: {exc.strerror}") from None
    cfg = codec.config
    out = np.empty((len(frames), cfg.c_in, cfg.t_in))
    for i, frame in enumerate(frames):
        if frame.c_lat != cfg.c_lat or frame.k != cfg.codebook_size or frame.n_active > cfg.n_quantizers:
            raise FormatError(f"frame {i} geometry (n_active={frame.n_active}, c_lat={frame.c_lat}, "
                              f"k={frame.k}) does not fit the bundle")
        out[i] = codec.reconstruct_from_indices(bitstream.unpack(frame))
    save_binary(args.out, out)
    counts = {}
    for f in frames:
        counts[str(f.n_active)] = counts.get(str(f.n_active), 0) + 1
    emit({"event": "decompress", "windows": len(frames), "n_active_counts": counts})
    return 0


def eval_rows(codec, windows, identity=False, threads=1):
    cfg = codec.config
    rows = []
    for n in range(1, cfg.n_quantizers + 1):
        rate = bitstream.compression_ratio(cfg, n)
        if identity:
            err = average_error(windows, windows, cfg.eval_span)
        else:
            err = evaluate(codec, windows, n, threads)
        rows.append({"n_active": n, "cr": rate.cr_floor, "bitrate_bps": float(rate.bitrate_bps),
                     "avg_error_pct": round(err, 4)})
    return rows


def format_table(rows):
    lines = [f"{'#Quantizers':<14}" + "".join(f"{r['n_active']:>10}" for r in rows),
             f"{'CR':<14}" + "".join(f"{r['cr']:>10}" for r in rows),
             f"{'Bitrate (bps)':<14}" + "".join(f"{r['bitrate_bps']:>10g}" for r in rows),
             f"{'Avg error %':<14}" + "".join(f"{r['avg_error_pct']:>10.2f}" for r in rows)]
    return "\n".join(lines)


def cmd_eval(args):
    codec = _load_bundle(args.bundle)
    windows = _windows(args.data, codec.config)
    rows = eval_rows(codec, windows, args.identity, args.threads)
    if args.json:
        for r in rows:
            emit({"event": "eval", **r})
    else:
        print(format_table(rows))
    return 0


def cmd_rates(args):
    cfg, _ = _read_config(args.config)
    for n in range(1, cfg.n_quantizers + 1):
        emit({"event": "rate", **bitstream.compression_ratio(cfg, n).as_dict()})
    return 0


def cmd_inspect(args):
    if args.bundle:
        codec = _load_bundle(args.bundle)
        cfg = codec.config
        emit({
            "event": "bundle",
            "digest": codec.digest,
            "input_shape": [cfg.c_in, cfg.t_in],
            "latent_shape": [cfg.c_lat, cfg.l_lat],
            "native_cr": str(cfg.native_cr),
            "encoder_params": codec.encoder.num_params(),
            "decoder_params": codec.decoder.num_params(),
            "codebooks": [cfg.n_quantizers, cfg.codebook_size, cfg.l_lat],
            "codebook_entry_bytes": codec.stack.storage_bytes(4),
            "utilization": [round(float(u), 4) for u in codec.stack.utilization()],
            "payload_bytes": {str(n): bitstream.payload_bytes(n, cfg.c_lat, cfg.codebook_size)
                              for n in range(1, cfg.n_quantizers + 1)},
        })
    if args.frames:
        digest, frames = bitstream.read_frame_file(args.frames)
        emit({
            "event": "frames",
            "digest": digest,
            "count": len(frames),
            "frames": [{"window_id": f.window_id, "n_active": f.n_active, "c_lat": f.c_lat, "k": f.k,
                        "bits": f.bits, "payload_bytes": len(f.payload), "header_bytes": f.header_size}
                       for f in frames],
        })
    if not args.bundle and not args.frames:
        raise CodecError("inspect needs --bundle and/or --frames", code="E_USAGE")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tscodec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1, help="parallel VQ workers (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train a codec and write a bundle")
    sp.add_argument("--config")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic windows")
    sp.add_argument("--val")
    sp.add_argument("--val-synthetic", type=int, metavar="N")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--time-budget", type=float, metavar="SECONDS")
    sp.add_argument("--checkpoint")
    sp.add_argument("--resume")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compress", help="windows -> frame file")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--quantizers", "-n", type=int, required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help="frame file -> windows")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--frames", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_decompress)

    sp = sub.add_parser("eval", help="error / CR / bitrate table per quantizer count")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--identity", action="store_true", help="skip the codec (x_hat = x) as a sanity check")
    sp.add_argument("--json", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rates", help="CR and bitrate per quantizer count for a config")
    sp.add_argument("--config")
    common(sp)
    sp.set_defaults(func=cmd_rates)

    sp = sub.add_parser("inspect", help="summarise a bundle and/or frame file")
    sp.add_argument("--bundle")
    sp.add_argument("--frames")
    common(sp)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print('error code=E_USAGE message="--threads must be >= 1"', file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CodecError as exc:
        print(f"error code={exc.code} message={json.dumps(str(exc))}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, DEFAULT_EXIT)


if __name__ == "__main__":
    sys.exit(main())
