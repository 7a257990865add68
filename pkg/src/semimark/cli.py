"""Command-line front end.

Exit codes: 0 on success, 1 when an operation or a benchmark verdict
fails, 2 on usage or configuration errors.

Every subcommand except ``train`` talks to the HTTP service; without
``--server`` the app is mounted in-process, so no daemon is involved.
``train`` drives the library directly since a long-running optimization
is a batch job, not a request.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import __version__
from .benchmark import BenchReport, render_report
from .checkpoints import checkpoint_hash
from .client import ServiceClient, ServiceError
from .config import register_adapters_from, resolve_config, train_config_from
from .data import CorpusIndex, build_index, synthesize_corpus
from .dsp import read_wav, write_wav
from .errors import (
    ConfigurationError,
    CorpusError,
    InvalidInputError,
    SemimarkError,
)
from .messages import hex_to_message
from .training import fit

_USAGE_STATUSES = (400, 404, 409, 422)


def _say(line: str) -> None:
    print(line)


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _client(args, cfg) -> ServiceClient:
    checkpoint = getattr(args, "checkpoint", None) or cfg["paths"].get("checkpoint")
    server = args.server
    if server:
        client = ServiceClient(base_url=server)
        if checkpoint:
            client.load_model(checkpoint)
        return client
    return ServiceClient(checkpoint=checkpoint)


def _write_meta(path: Path, cfg: dict, extra: dict) -> None:
    doc = {"resolved_config": cfg, **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------


def cmd_embed(args, cfg) -> int:
    hex_to_message(args.message)  # reject bad payloads before any I/O
    x = read_wav(args.input)
    with _client(args, cfg) as client:
        y, doc = client.embed(x, args.message)
    write_wav(args.output, y)
    meta_path = Path(str(args.output) + ".meta.json")
    _write_meta(meta_path, cfg, {
        "command": "embed",
        "input": str(args.input),
        "output": str(args.output),
        "message_hex": doc["message_hex"],
        "snr_db": doc["snr_db"],
        "checkpoint_hash": doc["checkpoint_hash"],
    })
    _say(f"wrote {args.output} ({len(y)} samples, {y.duration_s:.2f} s)")
    _say(f"snr_db={doc['snr_db']:.4f}")
    _say(f"checkpoint=sha256:{doc['checkpoint_hash']}")
    _say(f"meta={meta_path}")
    return 0


def cmd_extract(args, cfg) -> int:
    y = read_wav(args.input)
    with _client(args, cfg) as client:
        doc = client.extract(y)
    if args.json:
        _say(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    _say(f"message_hex={doc['message_hex']}")
    _say("confidences=" + " ".join(f"{c:.4f}" for c in doc["confidences"]))
    return 0


def cmd_attack(args, cfg) -> int:
    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"--params is not valid JSON: {exc}") from exc
    x = read_wav(args.input)
    with _client(args, cfg) as client:
        y, doc = client.attack(x, args.kind, params, seed=args.seed)
    write_wav(args.output, y)
    _say(f"wrote {args.output} ({len(y)} samples, {y.duration_s:.2f} s)")
    _say(f"kind={doc['kind']} category={doc['category']} "
         f"params={json.dumps(doc['params'], sort_keys=True)}")
    return 0


def _load_manifest(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark else ""
            raise InvalidInputError(f"manifest parse error{where}: {exc}") from exc
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(
                f"manifest parse error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise InvalidInputError("manifest must be a mapping")
    return doc


def cmd_bench(args, cfg) -> int:
    manifest = _load_manifest(args.manifest)
    fmt = args.format or cfg["bench"]["format"]
    with _client(args, cfg) as client:
        doc = client.bench(manifest, fmt,
                           info={"resolved_config": cfg,
                                 "manifest_path": str(args.manifest)})
    rendered = doc["rendered"]
    if args.out:
        out = Path(args.out)
        out.write_text(rendered)
        _say(f"wrote {out}")
        if fmt != "json":
            json_out = out.with_suffix(out.suffix + ".json")
            json_out.write_text(render_report(
                BenchReport.from_dict(doc["report"]), "json"))
            _say(f"wrote {json_out}")
    else:
        _say(rendered.rstrip("\n"))
    if not doc["passed"]:
        failures = ", ".join(doc["report"].get("failures", []))
        _fail(f"verdict failures: {failures}")
        return 1
    return 0


def cmd_report(args, cfg) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(
            f"report parse error at line {exc.lineno}: {exc.msg}") from exc
    report = BenchReport.from_dict(doc.get("report", doc))
    rendered = render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(rendered)
        _say(f"wrote {args.out}")
    else:
        _say(rendered.rstrip("\n"))
    return 0


def cmd_train(args, cfg) -> int:
    out_dir = Path(args.out or cfg["paths"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = args.corpus or cfg["paths"].get("corpus")
    if corpus is None:
        if args.synthesize_minutes:
            corpus = out_dir / "corpus"
            if not any(Path(corpus).glob("*.wav")):
                _say(f"synthesizing {args.synthesize_minutes:.1f} min corpus in {corpus}")
                synthesize_corpus(corpus, minutes=args.synthesize_minutes,
                                  seed=cfg["train"]["seed"])
        else:
            raise ConfigurationError(
                "no corpus given: pass --corpus DIR or --synthesize-minutes N")
    corpus = Path(corpus)
    if corpus.is_file():
        index = CorpusIndex.load(corpus)
    else:
        index = build_index(corpus, seed=cfg["train"]["seed"])
    index.save(out_dir / "corpus_index.json")
    if index.rejects:
        _say(f"indexed {len(index.entries)} files ({len(index.rejects)} rejected)")

    train_cfg = train_config_from(cfg)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    last_line = {"n": 0}

    def on_step(step: int, metrics: dict) -> None:
        if args.quiet:
            return
        every = max(1, train_cfg.steps // 20)
        if step % every == 0 or step == train_cfg.steps - 1:
            frag = metrics["acc_malicious"]
            frag_s = "-" if frag is None else f"{frag:.3f}"
            _say(f"step {step:>6}  total={metrics['loss_total']:+.4f}  "
                 f"robust={metrics['loss_robustness']:.4f}  "
                 f"acc_b={metrics['acc_benign']:.3f}  acc_m={frag_s}")
            last_line["n"] = step

    result = fit(index, train_cfg, out_dir, resume_from=args.resume, on_step=on_step)
    _say(f"finished {result.steps_completed} steps")
    _say(f"checkpoint={result.checkpoint_path}")
    _say(f"checkpoint_sha256={checkpoint_hash(result.checkpoint_path)}")
    _say(f"log={result.log_path}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="semimark",
        description="Semi-fragile audio watermarking: embed payloads that "
                    "survive benign edits and break under voice tampering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML or JSON config file (see README)")
    p.add_argument("--server", help="URL of a running service; default is in-process")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    q = sub.add_parser("embed", help="watermark a WAV with a hex payload")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--message", required=True, help="payload hex, 4 digits for 16 bits")
    q.add_argument("--checkpoint", help="trained model checkpoint")
    q.set_defaults(func=cmd_embed)

    q = sub.add_parser("extract", help="recover the payload from a WAV")
    q.add_argument("input")
    q.add_argument("--checkpoint", help="trained model checkpoint")
    q.add_argument("--json", action="store_true", help="machine-readable output")
    q.set_defaults(func=cmd_extract)

    q = sub.add_parser("attack", help="apply one distortion to a WAV")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--kind", required=True,
                   help="crop, gaussian_noise, resample_chain, lowpass_filter, "
                        "requantize, identity, pitch_shift")
    q.add_argument("--params", help='JSON object, e.g. \'{"snr_db": 20}\'')
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_attack)

    q = sub.add_parser("bench", help="run a benchmark suite manifest")
    q.add_argument("manifest", help="JSON or YAML suite manifest")
    q.add_argument("--checkpoint", help="trained model checkpoint")
    q.add_argument("--format", choices=("table", "csv", "json"))
    q.add_argument("--out", help="write the rendered report here (plus a .json twin)")
    q.set_defaults(func=cmd_bench)

    q = sub.add_parser("report", help="re-render a saved JSON report")
    q.add_argument("report")
    q.add_argument("--format", default="table", choices=("table", "csv", "json"))
    q.add_argument("--out")
    q.set_defaults(func=cmd_report)

    q = sub.add_parser("train", help="train a watermark model")
    q.add_argument("--corpus", help="directory of WAVs or a saved corpus_index.json")
    q.add_argument("--out", help="run directory for checkpoints and logs")
    q.add_argument("--profile", choices=("default", "desk"),
                   help="desk = small model that trains on one CPU core")
    q.add_argument("--steps", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--batch-size", type=int)
    q.add_argument("--clip-seconds", type=float)
    q.add_argument("--resume", help="checkpoint to continue from")
    q.add_argument("--synthesize-minutes", type=float,
                   help="generate a synthetic corpus of this length if none given")
    q.add_argument("--quiet", action="store_true")
    q.set_defaults(func=cmd_train)

    return p


def _flag_overrides(args) -> dict:
    train: dict = {}
    for flag, key in (("steps", "steps"), ("seed", "seed"),
                      ("batch_size", "batch_size"), ("clip_seconds", "clip_seconds")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    out: dict = {}
    if train:
        out["train"] = train
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, overrides=_flag_overrides(args),
                             profile=getattr(args, "profile", None))
        register_adapters_from(cfg)
        return args.func(args, cfg)
    except (InvalidInputError, ConfigurationError, CorpusError) as exc:
        _fail(str(exc))
        return 2
    except ServiceError as exc:
        _fail(str(exc))
        return 2 if exc.status_code in _USAGE_STATUSES else 1
    except FileNotFoundError as exc:
        _fail(str(exc))
        return 2
    except SemimarkError as exc:
        _fail(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
