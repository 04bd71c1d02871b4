"""crynet command line: features, train, eval, infer, analyze.

Exit codes: 0 success, 1 input/config error, 2 domain error (silent clip).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .audio import extract_features, read_feature_file, write_feature_file
from .checkpoint import checkpoint_load
from .complexity import count_flops, instrumented_flops
from .config import FrontendConfig, RunConfig
from .errors import AllSilentError, CryNetError
from .model import ABLATION_NAMESPACES, LABELS, EmotionLabel, build, parameter_namespaces
from .train import evaluate, split_dataset, train

log = logging.getLogger("crynet")

FEATURE_SUFFIX = ".cryf"


class UsageError(Exception):
    """Bad input or configuration; maps to exit status 1."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.frames is not None:
        overrides["target_frames"] = args.frames
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    for flag in args.ablate or ():
        overrides[{"mca": "use_mca", "rse": "use_rse", "diffattn": "use_diff_attn"}[flag]] = False
    if getattr(args, "model", None):
        overrides["model_kind"] = args.model
    if getattr(args, "dataset_root", None):
        overrides["dataset_root"] = args.dataset_root
    if getattr(args, "cache_dir", None):
        overrides["cache_dir"] = args.cache_dir
    return cfg.replace(**overrides) if overrides else cfg


def _wav_jobs(root: Path, manifest: str | None) -> list[tuple[Path, str]]:
    if manifest:
        jobs = []
        for lineno, line in enumerate(Path(manifest).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            path, _, label = line.rpartition(",")
            label = label.strip()
            if not path or label not in LABELS:
                raise UsageError(f"{manifest}:{lineno}: expected 'path,label' with a known label")
            p = Path(path.strip())
            jobs.append((p if p.is_absolute() else root / p, label))
        return jobs
    return [(wav, label) for label in LABELS
            for wav in sorted((root / label).glob("*.wav")) if (root / label).is_dir()]


def _extract_one(job):
    path, label, out_path, frontend = job
    try:
        write_feature_file(out_path, extract_features(path, frontend).values)
        return None
    except (CryNetError, OSError, ValueError) as exc:
        return f"{path}: {type(exc).__name__}: {exc}"


def load_cache(cache_dir: str | Path) -> tuple[list[tuple[str, int]], np.ndarray]:
    """All cached feature maps under ``<cache>/<label>/``, in sorted order."""
    cache = Path(cache_dir)
    if not cache.is_dir():
        raise UsageError(f"feature cache {cache} does not exist")
    entries, arrays = [], []
    for label in LABELS:
        for path in sorted((cache / label).glob(f"*{FEATURE_SUFFIX}")):
            entries.append((str(path), int(EmotionLabel.from_name(label))))
            arrays.append(read_feature_file(path))
    if not entries:
        raise UsageError(f"feature cache {cache} contains no {FEATURE_SUFFIX} files")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise UsageError(f"cached feature maps differ in shape: {sorted(shapes)}")
    return entries, np.stack(arrays)


def _split_arrays(cfg: RunConfig, entries, features):
    index = split_dataset(entries, cfg.seed, cfg.model.num_classes)
    mask = np.array(index.is_test)
    labels = np.array([label for _, label in entries])
    return features[~mask], labels[~mask], features[mask], labels[mask]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_features(args) -> int:
    cfg = _resolve_config(args)
    root = Path(cfg.dataset_root)
    if not cfg.dataset_root or not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    if not cfg.cache_dir:
        raise UsageError("--cache-dir is required")
    cache = Path(cfg.cache_dir)
    jobs = []
    for wav, label in _wav_jobs(root, args.manifest):
        (cache / label).mkdir(parents=True, exist_ok=True)
        jobs.append((wav, label, cache / label / (wav.stem + FEATURE_SUFFIX), cfg.frontend))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(job) for job in jobs]
    failures = [r for r in results if r is not None]
    for msg in failures:
        log.warning("skipped %s", msg)
    processed = len(jobs) - len(failures)
    print(f"features: processed={processed} failed={len(failures)} cache={cache}")
    if processed == 0:
        raise UsageError("no audio files were processed")
    return 0


def _audit_header(model, cfg: RunConfig) -> list[str]:
    m = cfg.model
    present = parameter_namespaces(model)
    ablated = [k for k, ns in ABLATION_NAMESPACES.items() if ns not in present]
    return [
        f"model={model.kind} use_mca={str(m.use_mca).lower()} use_rse={str(m.use_rse).lower()} "
        f"use_diff_attn={str(m.use_diff_attn).lower()}",
        f"params={model.num_parameters()} seed={cfg.seed} epochs={cfg.train.epochs} "
        f"batch={cfg.train.batch_size} lr={cfg.train.lr!r}",
        "absent_namespaces=" + ",".join(ablated),
    ]


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.cache_dir:
        raise UsageError("--cache-dir is required")
    entries, features = load_cache(cfg.cache_dir)
    if features.shape[1] != cfg.model.input_coeffs:
        raise UsageError(f"cached maps have {features.shape[1]} coefficients, "
                         f"model expects {cfg.model.input_coeffs}")
    train_x, train_y, test_x, test_y = _split_arrays(cfg, entries, features)
    model = build(cfg.model_kind, cfg.model, seed=cfg.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    result = train(model, train_x, train_y, test_x, test_y, cfg.train, cfg.seed,
                   log_path=log_path, checkpoint_path=out, log_header=_audit_header(model, cfg))
    final = result.history[-1].test_acc if result.history else float("nan")
    print(f"train: epochs={len(result.history)} final_test_acc={final:.4f} "
          f"best_test_acc={result.best_test_acc:.4f} checkpoint={out} log={log_path}")
    return 0


def _explicit_model_config(args):
    if args.config or args.ablate or args.frames is not None:
        return _resolve_config(args).model
    return None


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    model = checkpoint_load(ckpt, _explicit_model_config(args))
    cfg = _resolve_config(args)
    if args.seed is None and not args.config:
        cfg = cfg.replace(seed=model.seed)  # reproduce the split used in training
    if not cfg.cache_dir:
        raise UsageError("--cache-dir is required")
    entries, features = load_cache(cfg.cache_dir)
    train_x, train_y, test_x, test_y = _split_arrays(cfg, entries, features)
    x, y = {"train": (train_x, train_y), "test": (test_x, test_y),
            "all": (features, np.array([lab for _, lab in entries]))}[args.split]
    cm = evaluate(model, x, y)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "confusion_counts.csv").write_text(cm.to_csv(), encoding="utf-8")
    (out_dir / "confusion_percent.csv").write_text(cm.to_csv(percent=True), encoding="utf-8")
    print(f"eval: split={args.split} accuracy={cm.accuracy:.4f} correct={cm.correct} total={cm.total}")
    return 0


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    model = checkpoint_load(ckpt)
    frontend = RunConfig.from_file(args.config).frontend if args.config else FrontendConfig()
    feats = extract_features(args.wav, frontend).values
    probs = model.predict_proba(feats[None])[0]
    label = LABELS[int(np.argmax(probs))]
    print(json.dumps({"probabilities": {n: float(p) for n, p in zip(LABELS, probs)},
                      "label": label}))
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    frames = cfg.model.target_frames
    reports = {}
    for kind in ("improved", "baseline"):
        model = build(kind, cfg.model, seed=cfg.seed)
        report = count_flops(model, frames)
        reports[kind] = report
        print(f"[{kind}]")
        print(report.to_text(), end="")
        if args.verify:
            runtime = instrumented_flops(model, frames, seed=cfg.seed)
            total = sum(runtime.values())
            print(f"instrumented_flops = {total}")
            print(f"analytic_matches_instrumented = {str(total == report.flops).lower()}")
    imp, base = reports["improved"], reports["baseline"]
    print("[comparison]")
    print(f"params_improved_over_baseline = {imp.total_params / base.total_params:.4f}")
    print(f"flops_improved_over_baseline = {imp.flops / base.flops:.4f}")
    print(f"improved_params_exceed_baseline = {str(imp.total_params > base.total_params).lower()}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat 'key = value' run config file (default: built-in defaults)")
    parser.add_argument("--seed", type=int, default=None, help="seed for every random choice (default: 0)")
    parser.add_argument("--ablate", action="append", choices=sorted(ABLATION_NAMESPACES),
                        help="switch off a module of the improved model; repeatable (default: none)")
    parser.add_argument("--frames", type=int, default=None, help="frames per clip T (default: 298)")
    parser.add_argument("--epochs", type=int, default=None, help="training epochs (default: 700)")
    parser.add_argument("--lr", type=float, default=None, help="Adam learning rate (default: 2e-5)")
    parser.add_argument("--batch", type=int, default=None, help="mini-batch size (default: 64)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crynet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="convert <root>/<label>/*.wav to cached MFCC maps")
    _common(p)
    p.add_argument("dataset_root", nargs="?", help="dataset root with one directory per label (default: dataset_root from config)")
    p.add_argument("--cache-dir", help="output directory for .cryf feature files (default: cache_dir from config)")
    p.add_argument("--manifest", help="optional 'path,label' file instead of the directory layout (default: none)")
    p.add_argument("--workers", type=int, default=1, help="parallel extraction processes (default: 1)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="split the cache 8:2 and train")
    _common(p)
    p.add_argument("--cache-dir", help="feature cache written by 'features' (default: cache_dir from config)")
    p.add_argument("--model", choices=("improved", "baseline"), default=None,
                   help="architecture (default: improved)")
    p.add_argument("--out", default="model.crym", help="final checkpoint; best goes to <out>.best (default: model.crym)")
    p.add_argument("--log", default=None, help="epoch log path (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrices")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate (required)")
    p.add_argument("--cache-dir", help="feature cache written by 'features' (default: cache_dir from config)")
    p.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="which part of the seeded 8:2 split to score (default: test)")
    p.add_argument("--out-dir", default=".", help="where confusion_counts.csv and confusion_percent.csv go (default: .)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one WAV file")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (required)")
    p.add_argument("wav", help="16-bit PCM WAV file (required)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="parameter and FLOP report, improved vs baseline")
    _common(p)
    p.add_argument("--verify", action="store_true",
                   help="also run an instrumented forward and compare FLOP totals (default: off)")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AllSilentError as exc:
        print(f"error: AllSilent: {exc}", file=sys.stderr)
        return 2
    except (UsageError, CryNetError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
