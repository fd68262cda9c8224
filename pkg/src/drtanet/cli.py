"""Command-line entry point: ``drtanet <command> [--config FILE] [--section.key=value ...]``.

Configuration is a JSON document with up to four sections whose keys are the
field names of the corresponding dataclasses::

    {"model": {...ModelConfig...}, "train": {...TrainConfig...},
     "data": {...DatasetSpec...}, "val": {...DatasetSpec...}}

Any key can be overridden on the command line as ``--model.width_mult=0.25``.
Values are parsed as JSON when possible (``true``, ``[64,64]``, ``0.5``) and
taken as plain strings otherwise (``--model.attention_mode=fixed(3)``).

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import subprocess
import sys
from dataclasses import MISSING, fields
from pathlib import Path

from . import __version__
from .attention import ScopeSpec, export_attention_heatmaps
from .core import load_checkpoint, no_grad, save_checkpoint
from .data import DatasetSpec, ImagePair, load_from_spec, load_mask, load_png_pair, pair_paths, save_mask, write_dataset
from .metrics import MetricAccumulator, binarize
from .network import ChangeNet, ModelConfig, count_stats, images_to_tensor
from .training import TrainConfig, evaluate, predict_logits, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetSpec, "val": DatasetSpec}
COMMAND_SECTIONS = {
    "gen-data": ("data",),
    "train": ("model", "train", "data", "val"),
    "eval": ("model", "data"),
    "infer": ("model",),
    "stats": ("model",),
    "gradcheck": (),
    "export-attn": ("model",),
}

log = logging.getLogger("drtanet")


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _field_defaults(cls) -> list[tuple[str, str]]:
    out = []
    for f in fields(cls):
        if f.default is not MISSING:
            default = f.default
        elif f.default_factory is not MISSING:  # pragma: no cover - no such fields today
            default = f.default_factory()
        else:
            default = "<required>"
        out.append((f.name, json.dumps(default) if not isinstance(default, str) else default))
    return out


def keys_help(sections) -> str:
    lines = ["configuration keys (JSON sections or --section.key=value overrides):"]
    for sec in sections:
        lines.append(f"  {sec}:")
        for name, default in _field_defaults(SECTIONS[sec]):
            lines.append(f"    --{sec}.{name}  (default {default})")
    return "\n".join(lines)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str], allowed: tuple[str, ...]) -> dict:
    out: dict = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}; overrides take the form --section.key=value")
        key, value = tok[2:].split("=", 1)
        section, name = key.split(".", 1)
        if section not in allowed:
            raise UsageError(f"section {section!r} is not used by this command (accepted: {', '.join(allowed) or 'none'})")
        known = {f.name for f in fields(SECTIONS[section])}
        if name not in known:
            raise UsageError(f"unknown key {section}.{name}; valid keys: {', '.join(sorted(known))}")
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def load_config(path, overrides: dict, allowed: tuple[str, ...]) -> dict:
    doc: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config file {p} must hold a JSON object of sections")
        for section, body in doc.items():
            if section not in SECTIONS:
                raise UsageError(f"config file {p}: unknown section {section!r} (valid: {', '.join(SECTIONS)})")
            known = {f.name for f in fields(SECTIONS[section])}
            bad = sorted(set(body) - known)
            if bad:
                raise UsageError(f"config file {p}: unknown key {section}.{bad[0]}; valid keys: {', '.join(sorted(known))}")
    merged = {sec: dict(doc.get(sec, {})) for sec in allowed}
    for sec, vals in overrides.items():
        merged[sec].update(vals)
    return merged


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid {section} configuration: {exc}") from None


# ---------------------------------------------------------------------------
# manifests


def version_string() -> str:
    """``git describe``-style identifier of the running code."""
    here = Path(__file__).resolve().parent
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if res.returncode == 0 and res.stdout.strip():
            return f"v{__version__}-{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(out_dir: Path, command: str, config: dict, seed, outputs: list, started: str) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": version_string(),
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# model loading


def _model_from(args, cfg: dict) -> ChangeNet:
    values = dict(cfg.get("model", {}))
    if getattr(args, "checkpoint", None):
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint {ckpt} not found")
        side = ckpt.parent / "config.json"
        if side.is_file():
            stored = json.loads(side.read_text()).get("model", {})
            values = {**stored, **values}
    model = ChangeNet(_build(ModelConfig, values, "model"), seed=getattr(args, "seed", 0) or 0)
    if getattr(args, "checkpoint", None):
        state = load_checkpoint(args.checkpoint)  # unreadable files are runtime failures
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"checkpoint {args.checkpoint} does not fit the model configuration: {exc}") from None
    return model


def _pairs_from_args(args, size) -> list[ImagePair]:
    if args.root:
        if not Path(args.root).is_dir():
            raise UsageError(f"dataset directory {args.root} not found")
        return [load_png_pair(a, b).resized(size) for a, b, _ in pair_paths(args.root)]
    if not args.t0 or not args.t1:
        raise UsageError("give --root DIR or matching --t0/--t1 image paths")
    if len(args.t0) != len(args.t1):
        raise UsageError(f"--t0 lists {len(args.t0)} images but --t1 lists {len(args.t1)}")
    pairs = []
    for a, b in zip(args.t0, args.t1):
        for p in (a, b):
            if not Path(p).is_file():
                raise UsageError(f"image {p} not found")
        pairs.append(load_png_pair(a, b).resized(size))
    return pairs


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    spec = _build(DatasetSpec, cfg["data"], "data")
    if spec.source != "synthetic":
        raise UsageError("gen-data writes synthetic datasets only (set --data.source=synthetic)")
    out = Path(args.out)
    pairs = load_from_spec(spec)
    write_dataset(pairs, out)
    outputs = sorted(p.relative_to(out) for p in out.rglob("*.png"))
    print(f"wrote {len(pairs)} pairs to {out}")
    return out, _jsonable({"data": cfg["data"]}), spec.seed, outputs


def cmd_train(args, cfg):
    tconf = _build(TrainConfig, cfg["train"], "train")
    mconf = _build(ModelConfig, cfg["model"], "model")
    spec = _build(DatasetSpec, cfg["data"], "data")
    pairs = [p.resized(mconf.input_size) for p in load_from_spec(spec)]
    val = None
    if cfg.get("val"):
        vspec = _build(DatasetSpec, cfg["val"], "val")
        val = [p.resized(mconf.input_size) for p in load_from_spec(vspec)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = _jsonable({"model": mconf.to_dict(), "train": tconf.to_dict(), "data": cfg["data"], "val": cfg.get("val", {})})
    (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    model = ChangeNet(mconf, seed=tconf.seed)
    result = train(model, pairs, tconf, val_pairs=val, out_dir=out)
    save_checkpoint(out / "final.ckpt", model.state_dict())
    print(f"best aggregate F1 {result.best_f1:.4f} at epoch {result.best_epoch}; {result.seconds:.1f} s")
    outputs = ["config.json", "best.ckpt", "final.ckpt", "metrics.csv", "losses.json"]
    return out, snapshot, tconf.seed, outputs


def cmd_eval(args, cfg):
    spec = _build(DatasetSpec, cfg["data"], "data")
    if args.pred:
        pred_dir = Path(args.pred)
        if not pred_dir.is_dir():
            raise UsageError(f"prediction directory {pred_dir} not found")
        truth = load_from_spec(spec)
        acc = MetricAccumulator()
        for pair in truth:
            path = pred_dir / f"{pair.name}.png"
            if not path.is_file():
                raise UsageError(f"no predicted mask {path} for pair {pair.name}")
            acc.update(load_mask(path), pair.mask)
        agg, per = acc.aggregate(), acc.per_image_mean()
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint FILE or --pred DIR")
        model = _model_from(args, cfg)
        pairs = [p.resized(model.config.input_size) for p in load_from_spec(spec)]
        agg, per = evaluate(model, pairs)
    print(agg.format())
    print(per.format())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics = {r.mode: {k: getattr(r, k) for k in ("tp", "fp", "fn", "precision", "recall", "f1")} for r in (agg, per)}
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        return out, _jsonable(cfg), spec.seed, ["metrics.json"]
    return None


def cmd_infer(args, cfg):
    model = _model_from(args, cfg)
    pairs = _pairs_from_args(args, model.config.input_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logits = predict_logits(model, pairs)
    outputs = []
    for i, (pair, z) in enumerate(zip(pairs, logits)):
        name = pair.name or f"{i:05d}"
        path = out / f"{name}.png"
        save_mask(path, binarize(z))
        outputs.append(path.name)
    print(f"wrote {len(outputs)} masks to {out}")
    return out, _jsonable({"model": model.config.to_dict(), "checkpoint": str(args.checkpoint)}), None, outputs


def cmd_stats(args, cfg):
    conf = _build(ModelConfig, cfg["model"], "model")
    stats = count_stats(conf)
    if args.json:
        print(json.dumps({
            "mac_count": stats.mac_count,
            "param_count": stats.param_count,
            "embedding_param_count": stats.embedding_param_count,
            "non_embedding_param_count": stats.non_embedding_param_count,
            "breakdown": stats.breakdown,
        }, indent=2))
    else:
        print(f"config: {conf.to_json()}")
        print(stats.format())
    return None


def cmd_gradcheck(args, cfg):
    from .verify import TOLERANCE, gradcheck_suite

    def show(res):
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4s} {res.name:<40s} max rel. error {res.max_error:.3e} ({res.seconds:.1f} s)", flush=True)

    results = gradcheck_suite(seed=args.seed, include_model=not args.skip_model, model_samples=args.samples, log=show)
    worst = max(r.max_error for r in results)
    print(f"max rel. error over {len(results)} checks: {worst:.3e} (tolerance {TOLERANCE:g})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
    return None


def cmd_export_attn(args, cfg):
    model = _model_from(args, cfg)
    pairs = _pairs_from_args(args, model.config.input_size)[:1]
    pair = pairs[0]
    model.eval()
    with no_grad():
        t0 = images_to_tensor(pair.t0, model.dtype)
        t1 = images_to_tensor(pair.t1, model.dtype)
        f0, f1 = model.encode_pair(t0, t1)
        _, weights = model.attention_stack_forward(f0, f1, return_weights=True)
    out = Path(args.out)
    scopes = [ScopeSpec.square(k) for k in model.config.scopes()]
    written = export_attention_heatmaps(weights, scopes, out)
    print(f"wrote {len(written)} heatmaps to {out}")
    return out, _jsonable({"model": model.config.to_dict(), "checkpoint": args.checkpoint}), None, [Path(w).name for w in written]


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic dataset directory"),
    "train": (cmd_train, "train a model; writes checkpoints, metric log and loss curve"),
    "eval": (cmd_eval, "print aggregate and per-image-mean metrics"),
    "infer": (cmd_infer, "write predicted change masks as PNG"),
    "stats": (cmd_stats, "print MAC and parameter counts"),
    "gradcheck": (cmd_gradcheck, "run the 64-bit finite-difference gradient suite"),
    "export-attn": (cmd_export_attn, "write per-level, per-head attention heatmaps"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drtanet",
        description="Temporal-attention change detection.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure",
    )
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=keys_help(COMMAND_SECTIONS[name]),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        if COMMAND_SECTIONS[name]:
            p.add_argument("--config", help="JSON configuration document")
        if name in ("gen-data", "train", "infer", "export-attn"):
            p.add_argument("--out", required=True, help="output directory")
        if name == "eval":
            p.add_argument("--out", help="optional directory for metrics.json and a manifest")
            p.add_argument("--pred", help="directory of predicted mask PNGs named like the dataset pairs")
        if name in ("eval", "infer", "export-attn"):
            p.add_argument("--checkpoint", required=name == "infer", help="model checkpoint file")
            p.add_argument("--seed", type=int, default=0, help="initialization seed when no checkpoint is given")
        if name in ("infer", "export-attn"):
            p.add_argument("--root", help="dataset directory with t0/ and t1/ subdirectories")
            p.add_argument("--t0", nargs="+", help="t0 image paths")
            p.add_argument("--t1", nargs="+", help="t1 image paths, in the same order")
        if name == "stats":
            p.add_argument("--json", action="store_true", help="print JSON instead of a table")
        if name == "gradcheck":
            p.add_argument("--seed", type=int, default=0, help="seed for random inputs")
            p.add_argument("--samples", type=int, default=4, help="coordinates checked per model parameter tensor")
            p.add_argument("--skip-model", action="store_true", help="check operations only")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(message)s")
    if not args.command:
        parser.print_help()
        return EXIT_USAGE
    fn, _ = COMMANDS[args.command]
    allowed = COMMAND_SECTIONS[args.command]
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    try:
        cfg = load_config(getattr(args, "config", None), parse_overrides(extra, allowed), allowed)
        produced = fn(args, cfg)
        if produced is not None:
            out, snapshot, seed, outputs = produced
            write_manifest(Path(out), args.command, snapshot, seed, outputs, started)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic for any runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
