"""Command-line entry point: ``voxadv <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (INI text; keys in a section named
after the subcommand or in ``[common]``, written like the long flags without
dashes) and explicit flags, which take precedence.  Each run writes
``run_manifest.json`` into its output directory with the resolved settings.
Paths inside it are relative to that directory.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import METHODS, AttackConfig, BatchItem, cmspec, read_batch, run_time_domain
from .channel import (
    ChannelConfig,
    CodecUnavailableError,
    UdpReceiver,
    apply_channel,
    codec_aware_craft,
    depacketize,
    draw_losses,
    external_codec_adapter,
    fill_lost,
    packetize,
    send_udp,
    surrogate_decode,
    surrogate_encode,
)
from .corpus import CorpusConfig, build_corpus, load_external_manifest
from .evaluation import (
    DEFAULT_RECIPES,
    PRESETS,
    Bench,
    build_pairs,
    calibrate_lambda_asv,
    eer_rows,
    emit_report,
    load_pair,
    run_preset,
    save_pairs,
    train_pair,
    _sample_seed,
)
from .gradcheck import TOLERANCE, run_all
from .signal import Waveform, linf_distance, read_wav, write_wav

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_TOOL_MISSING = 3

log = logging.getLogger("voxadv")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _as_given(path) -> str:
    # recorded verbatim so that the output location never leaks into a record
    return str(path)


def write_run_manifest(args: argparse.Namespace, out_dir: Path, extra: dict | None = None) -> None:
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config"):
            continue
        if key == "out":
            value = "."
        elif key in PATH_KEYS and value is not None:
            value = _as_given(value)
        resolved[key] = value
    record = {"tool": "voxadv", "version": __version__, "subcommand": args.command, "settings": resolved}
    if extra:
        record.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


PATH_KEYS = {"out", "corpus", "models", "batch", "input", "reference"}


def _channel_from(args) -> ChannelConfig:
    return ChannelConfig(
        codec=args.codec, loss_rate=args.loss_rate, redundancy=args.redundancy, seed=args.seed, frame_ms=args.frame_ms
    )


def _tool_paths(args) -> dict:
    tools = {}
    if getattr(args, "encoder", None):
        tools["encoder"] = args.encoder
    if getattr(args, "decoder", None):
        tools["decoder"] = args.decoder
    return tools


def _lambda(value: str):
    if value == "auto":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {value!r}") from None


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.speakers < 6:
        raise UsageError(f"--speakers must be at least 6 (got {args.speakers})")
    cfg = CorpusConfig(args.speakers, args.utts, args.duration, args.seed)
    manifest = build_corpus(out, cfg)
    write_run_manifest(args, out, {"entries": len(manifest)})
    print(f"wrote {len(manifest)} utterances to {out}")
    return EXIT_OK


def _load_bench(corpus) -> Bench:
    return Bench(load_external_manifest(Path(corpus) / "manifest.tsv"))


def cmd_train(args) -> int:
    out = Path(args.out)
    bench = _load_bench(args.corpus)
    channel = ChannelConfig(loss_rate=0.0, seed=args.seed)
    models = {}
    for recipe in DEFAULT_RECIPES:
        r = replace(
            recipe,
            cm=replace(recipe.cm, seed=_sample_seed(args.seed, "train-cm", recipe.cm.seed) % 2**31),
            asv=replace(recipe.asv, seed=_sample_seed(args.seed, "train-asv", recipe.asv.seed) % 2**31),
        )
        log.info("training %s", r.name)
        models[r.name] = train_pair(bench, r, channel)
    save_pairs(models, out / "models")
    rows = eer_rows(models)
    with open(out / "eer_table.csv", "w") as fh:
        fh.write("model,kind,split,family,heldout_eer,threshold\n")
        for row in rows:
            fh.write(f"{row['model']},{row['kind']},{row['split']},{row['family']},{row['heldout_eer']!r},{row['threshold']!r}\n")
    write_run_manifest(args, out, {"models": sorted(models)})
    for row in rows:
        print(f"{row['model']:<18} EER {row['heldout_eer']:.4f}")
    return EXIT_OK


def _model_dir(path) -> Path:
    p = Path(path)
    return p / "models" if (p / "models").is_dir() else p


def _batch_items(args) -> list[BatchItem]:
    if args.epsilon is not None and not args.epsilon >= 0:
        raise UsageError(f"--epsilon must be >= 0 (got {args.epsilon})")
    if args.batch:
        items = read_batch(args.batch)
        base = Path(args.batch).parent
        items = [
            replace(
                it,
                input=str(base / it.input),
                reference=str(base / it.reference) if it.reference else None,
            )
            for it in items
        ]
    elif args.input:
        if args.target_user is None:
            raise UsageError("--target-user is required with --input")
        try:
            items = [
                BatchItem(
                    args.input, args.target_user, args.method or "advcm", args.epsilon if args.epsilon is not None else 0.0,
                    args.seed, args.reference,
                )
            ]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        raise UsageError("either --batch or --input is required")
    overrides = {}
    if args.method:
        overrides["method"] = args.method
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    try:
        return [replace(it, **overrides) for it in items]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_attack(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = _batch_items(args)
    asv, cm = load_pair(_model_dir(args.models), args.shadow)
    channel = _channel_from(args) if args.codec_aware else None
    tools = _tool_paths(args)
    lam_asv = args.lambda_asv
    if lam_asv == "auto":
        pairs = [(read_wav(it.input), read_wav(it.reference)) for it in items if it.reference]
        lam_asv = calibrate_lambda_asv(cm, asv, pairs) if pairs else 1.0
    records, failures = [], []
    for k, it in enumerate(items):
        name = it.output or f"{k:04d}_{Path(it.input).stem}.wav"
        x = read_wav(it.input)
        y = read_wav(it.reference) if it.reference else None
        cfg = AttackConfig(
            it.epsilon,
            alpha=args.alpha,
            iterations=args.iters,
            lambda_cm=args.lambda_cm,
            lambda_asv=float(lam_asv),
            seed=it.seed,
            method=it.method,
            early_stop=args.early_stop,
        )
        rec = {"input": _as_given(it.input), "output": name, "target_user": it.target_user, "method": it.method, "epsilon": it.epsilon, "seed": it.seed}
        if it.method == "cmspec":
            res = cmspec(cm, None, x, cfg)
            adv = res.reconstructed
            rec.update(direct_accept=res.direct_accept, direct_score=res.direct_score, reconstructed_score=res.reconstructed_score)
        else:
            def attack(w, cfg=cfg, y=y):
                return run_time_domain(it.method, w, cfg, cm, asv, y)

            if channel is not None:
                eta = None
                if channel.codec == "external":
                    clean = replace(channel, loss_rate=0.0)
                    eta = lambda w: external_codec_adapter(w, tools, clean)  # noqa: E731
                adv = codec_aware_craft(attack, x, channel, it.epsilon, eta)
                rec.update(codec_aware=True)
            else:
                res = attack(x)
                adv = res.adversarial
                rec.update(iterations_run=res.iterations_run, final_loss=res.loss_trajectory[-1] if res.loss_trajectory else None)
            linf = linf_distance(adv, x)
            ok = linf <= it.epsilon + 1e-9
            rec.update(final_linf=linf, linf_ok=ok)
            if not ok:
                failures.append(name)
        write_wav(adv, out / name)
        if it.method != "cmspec":
            # the written file sits on the 16-bit grid, so allow half a quantization step
            on_disk = linf_distance(read_wav(out / name), x)
            rec["file_linf"] = on_disk
            if on_disk > it.epsilon + 0.5 / 32768 + 1e-12:
                failures.append(name)
        records.append(rec)
    with open(out / "results.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_run_manifest(args, out, {"lambda_asv_used": float(lam_asv), "items": len(items)})
    if failures:
        print(f"L-infinity audit failed for {len(failures)} item(s): {', '.join(sorted(set(failures)))}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"wrote {len(records)} adversarial file(s) to {out}")
    return EXIT_OK


def cmd_channel(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = read_wav(args.input)
    y = apply_channel(w, _channel_from(args), _tool_paths(args))
    write_wav(y, out / "channel.wav")
    write_run_manifest(args, out)
    print(f"wrote {out / 'channel.wav'}")
    return EXIT_OK


def cmd_send(args) -> int:
    cfg = _channel_from(args)
    if cfg.codec != "surrogate":
        raise UsageError("live transmission supports the surrogate codec only")
    w = read_wav(args.input)
    frames = surrogate_encode(w, cfg)
    dropped = draw_losses(len(frames), cfg)
    packets = packetize([f for f in frames if f.index not in dropped], ssrc=args.ssrc, samples_per_frame=cfg.frame_samples)
    send_udp(packets, args.addr, args.port)
    info = {"frames": len(frames), "samples": len(w), "dropped": sorted(dropped), "sent": len(packets)}
    if args.out:
        write_run_manifest(args, Path(args.out), info)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_recv(args) -> int:
    cfg = _channel_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with UdpReceiver(args.port, args.addr) as rx:
        packets = rx.collect(args.ssrc, args.idle_timeout, args.first_timeout)
    frames, lost = depacketize(packets, args.frames)
    stream = fill_lost(frames, lost, cfg.frame_samples)
    decoded = surrogate_decode(stream, cfg, lost)
    samples = decoded.samples if args.samples is None else _fit(decoded.samples, args.samples)
    write_wav(Waveform(samples), out / "received.wav")
    write_run_manifest(args, out, {"received": len(packets), "lost": sorted(lost)})
    print(f"received {len(packets)} packets, {len(lost)} lost; wrote {out / 'received.wav'}")
    return EXIT_OK


def _fit(x: np.ndarray, n: int) -> np.ndarray:
    y = np.zeros(n)
    y[: min(n, x.shape[0])] = x[:n]
    return y


def cmd_eval(args) -> int:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
    out = Path(args.out)
    bench = _load_bench(args.corpus)
    mdir = _model_dir(args.models)
    models = {r.name: load_pair(mdir, r.name) for r in DEFAULT_RECIPES if (mdir / f"{r.name}_cm.json").exists()}
    pairs = build_pairs(bench, models)
    report = run_preset(args.preset, bench, pairs, seed=args.seed, sample_count=args.samples, iterations=args.iters)
    csv_path, _ = emit_report(report, out / args.preset)
    write_run_manifest(args, out)
    print(csv_path.read_text(), end="")
    log.info("runtime %.1f s", report.metadata.get("runtime_s", 0.0))
    for w in report.metadata.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, n_waves=args.waves, duration_s=args.duration)
    for r in results:
        print(f"{r.path:<16} cases={r.n_cases:<3} max_rel_error={r.max_rel_error:.3e} {'ok' if r.ok else 'FAIL'}")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if args.out:
        out = Path(args.out)
        write_run_manifest(args, out, {"results": [asdict(r) for r in results]})
    bad = [r.path for r in results if not r.ok]
    if bad:
        print(f"failing paths: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _channel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss-rate", type=float, default=0.02, help="frame loss probability (default 0.02)")
    p.add_argument("--redundancy", type=_bool, nargs="?", const=True, default=True, help="carry the previous frame in each packet")
    p.add_argument("--no-redundancy", dest="redundancy", action="store_false")
    p.add_argument("--codec", choices=("surrogate", "external"), default="surrogate")
    p.add_argument("--frame-ms", type=int, default=20)
    p.add_argument("--encoder", help="external encoder executable (default opusenc)")
    p.add_argument("--decoder", help="external decoder executable (default opusdec)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxadv", description="Adversarial attacks on joint speaker verification and spoofing countermeasures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with defaults for this subcommand")
        p.add_argument("--seed", type=int, default=0, help="root seed")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "build the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utts", type=int, default=10, help="utterances per speaker")
    p.add_argument("--duration", type=float, default=1.0, help="seconds per utterance")

    p = add("train", cmd_train, "train shadow and target model pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("attack", cmd_attack, "craft adversarial examples")
    p.add_argument("--models", required=True, help="model directory written by 'train'")
    p.add_argument("--shadow", default="shadow", help="name of the model pair to attack with")
    p.add_argument("--batch", help="JSON-lines batch spec")
    p.add_argument("--input", help="single input WAV (instead of --batch)")
    p.add_argument("--reference", help="bonafide reference WAV for advsr/advjoint")
    p.add_argument("--target-user")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lambda-cm", type=float, default=1.0)
    p.add_argument("--lambda-asv", type=_lambda, default=1.0, help="number, or 'auto' to balance the gradients")
    p.add_argument("--early-stop", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--codec-aware", type=_bool, nargs="?", const=True, default=False)
    _channel_flags(p)

    p = add("channel", cmd_channel, "pass a WAV through the simulated channel")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _channel_flags(p)

    p = add("send", cmd_send, "encode a WAV and stream it over UDP")
    p.add_argument("--input", required=True)
    p.add_argument("--addr", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--ssrc", type=int, default=0x5EED)
    p.add_argument("--out", help="directory for the run manifest")
    _channel_flags(p)

    p = add("recv", cmd_recv, "receive a UDP stream and decode it")
    p.add_argument("--addr", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--ssrc", type=int, default=0x5EED)
    p.add_argument("--idle-timeout", type=float, default=1.0)
    p.add_argument("--first-timeout", type=float, default=30.0)
    p.add_argument("--frames", type=int, help="expected frame count (detects trailing losses)")
    p.add_argument("--samples", type=int, help="crop or pad the output to this many samples")
    p.add_argument("--out", required=True)
    _channel_flags(p)

    p = add("eval", cmd_eval, "run an experiment preset")
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--corpus", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--iters", type=int, default=100)

    p = add("gradcheck", cmd_gradcheck, "finite-difference audit of all gradients")
    p.add_argument("--waves", type=int, default=20)
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--out")
    return parser


def _config_defaults(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    values = {}
    for section in ("common", command):
        if cp.has_section(section):
            values.update(cp.items(section))
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"{path}: unknown setting {key!r} for '{command}'")
        conv = action.type or (lambda v: v)
        if isinstance(action, argparse._StoreFalseAction) or isinstance(action, argparse._StoreTrueAction):
            conv = _bool
        try:
            defaults[dest] = conv(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from exc
        if action.choices is not None and defaults[dest] not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
    return defaults


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    return _subparsers(parser)[command]


def _peek_config(argv: list[str]) -> tuple[str | None, str | None]:
    """Subcommand name and --config value, read before the full parse."""
    command = next((a for a in argv if not a.startswith("-")), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return command, known.config


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, config = _peek_config(argv)
    if config and command in _subparsers(parser):
        sub = _subparser(parser, command)
        defaults = _config_defaults(config, command, sub)
        # required flags may come from the file; explicit flags still win
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"voxadv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"voxadv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CodecUnavailableError as exc:
        print(f"voxadv {args.command}: external codec unavailable: {exc}", file=sys.stderr)
        return EXIT_TOOL_MISSING
    except (OSError, ValueError, KeyError, TimeoutError) as exc:
        print(f"voxadv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
