"""Command-line interface: enhance, train-score, verify, report, synth."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, metrics, synthetic
from .enhancers import ALGORITHMS, EnhanceConfig, enhance
from .sampler import LambdaSchedule
from .score import LABELS, DsmTrainConfig, dsm_train, load_model, save_model
from .sde import SdeParams, complex_normal
from .spectral import AmplitudeTransform, StftConfig, istft, read_wav, stft, write_wav

logger = logging.getLogger("diffusese")

SCHEMA_VERSION = 1
VOLATILE_KEYS = ("timing",)
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input or configuration; reported with exit code 2."""


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2, allow_nan=False)
        f.write("\n")


def strip_volatile(doc):
    """Drop wall-clock fields (recursively) so reports can be compared for determinism."""
    if isinstance(doc, dict):
        return {k: strip_volatile(v) for k, v in doc.items() if k not in VOLATILE_KEYS}
    if isinstance(doc, list):
        return [strip_volatile(v) for v in doc]
    return doc


def _finite(x: float) -> float:
    return metrics.capped(x) if math.isinf(x) else float(x)


# ---------------------------------------------------------------------------
# enhance
# ---------------------------------------------------------------------------

# CLI / config-file key -> EnhanceConfig field
_CONFIG_KEYS = {
    "steps": "N",
    "sigma_r": "sigma_r",
    "nmf_rank": "nmf_rank",
    "nmf_iters": "nmf_iters",
    "em_iters": "em_iters",
    "posterior_samples": "posterior_samples",
    "langevin_r": "langevin_r",
    "corrector": "corrector",
    "seed": "seed",
}
_EXTRA_KEYS = ("alg", "lambda", "lambda_schedule", "alpha", "beta")


def effective_config(args) -> tuple[EnhanceConfig, AmplitudeTransform, dict]:
    """Merge built-in defaults < config file < CLI flags; return config, transform, snapshot."""
    merged = {}
    if args.config:
        try:
            merged.update(read_json(args.config))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from None
        unknown = sorted(set(merged) - set(_CONFIG_KEYS) - set(_EXTRA_KEYS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for key in list(_CONFIG_KEYS) + list(_EXTRA_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    alg = merged.get("alg", "diffuseen")
    if alg not in ALGORITHMS:
        raise UsageError(f"unknown algorithm {alg!r}; choose from {', '.join(ALGORITHMS)}")
    kw = {field: merged[key] for key, field in _CONFIG_KEYS.items() if key in merged}
    if "lambda" in merged or "lambda_schedule" in merged:
        base = EnhanceConfig(algorithm=alg).lam
        try:
            kw["lam"] = LambdaSchedule(merged.get("lambda_schedule", base.kind),
                                       float(merged.get("lambda", base.value)))
        except ValueError as e:
            raise UsageError(str(e)) from None
    try:
        cfg = EnhanceConfig(algorithm=alg, **kw)
        transform = AmplitudeTransform(float(merged.get("alpha", 1.0)),
                                       float(merged.get("beta", 1.0)))
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    snap = cfg.snapshot()
    snap["transform"] = asdict(transform)
    return cfg, transform, snap


def utterance_seed(seed: int, utt_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(utt_id.encode("utf-8"))])


def enhance_file(job: dict) -> dict:
    """Enhance one WAV file; returns the report (also written next to the output)."""
    t0 = time.perf_counter()
    cfg: EnhanceConfig = job["cfg"]
    transform: AmplitudeTransform = job["transform"]
    stft_cfg = StftConfig()
    src, dst = Path(job["input"]), Path(job["output"])
    model = load_model(job["model"])
    if model.sde != cfg.sde:
        logger.warning("model SDE %s differs from run SDE; using the model's", model.sde)
        cfg = EnhanceConfig(**{**cfg.__dict__, "sde": model.sde})
    x, rate = read_wav(src, stft_cfg.sample_rate)
    X = transform.forward(stft(x, stft_cfg))
    rng = np.random.default_rng(utterance_seed(cfg.seed, src.name))
    res = enhance(X, model, cfg, rng)
    s_hat = istft(transform.inverse(res.speech), stft_cfg, len(x))
    dst.parent.mkdir(parents=True, exist_ok=True)
    outputs = {"speech": dst.name}
    clipped = {"speech": write_wav(dst, s_hat, rate)}
    n_hat = None
    if res.noise is not None:
        n_hat = istft(transform.inverse(res.noise), stft_cfg, len(x))
        if cfg.algorithm == "paradiffuse-en":
            noise_path = dst.with_name(dst.stem + ".noise.wav")
            outputs["noise"] = noise_path.name
            clipped["noise"] = write_wav(noise_path, n_hat, rate)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "enhance",
        "algorithm": cfg.algorithm,
        "library_version": __version__,
        "seed": cfg.seed,
        "config": job["snapshot"],
        "input": str(src),
        "model": str(job["model"]),
        "outputs": outputs,
        "clipped_samples": clipped,
        "metrics": {},
    }
    if res.noise is not None:
        report["metrics"]["mixture_consistency"] = metrics.mixture_consistency(
            X, res.speech, res.noise)
    if job.get("clean"):
        clean, _ = read_wav(job["clean"], stft_cfg.sample_rate)
        if len(clean) != len(x):
            raise UsageError(f"{job['clean']}: length {len(clean)} != input length {len(x)}")
        report["metrics"]["si_sdr"] = _finite(metrics.si_sdr(s_hat, clean))
        report["metrics"]["si_sdr_input"] = _finite(metrics.si_sdr(x, clean))
        noise_ref = job.get("noise_ref")
        noise = read_wav(noise_ref, stft_cfg.sample_rate)[0] if noise_ref else x - clean
        scores = metrics.si_decomposition(s_hat, clean, noise)
        report["metrics"].update(scores.capped())
    if job.get("log_steps"):
        report["steps"] = res.log.rows
    report["timing"] = {"wall_seconds": time.perf_counter() - t0}
    write_json(dst.with_suffix(".json"), report)
    return report


def cmd_enhance(args) -> int:
    cfg, transform, snap = effective_config(args)
    if args.dump_schedule:
        Path(args.dump_schedule).write_text(cfg.schedule().to_csv(), encoding="utf-8")
    if not Path(args.model).is_file():
        raise UsageError(f"model file {args.model} not found; train one with "
                         "`diffusese train-score` or pass --model PATH")
    paths = [Path(p) for p in args.paths]
    if len(paths) < 2:
        raise UsageError("need at least one input WAV and an output path")
    inputs, out = paths[:-1], paths[-1]
    missing = [str(p) for p in inputs if not p.is_file()]
    if missing:
        raise UsageError(f"input file(s) not found: {', '.join(missing)}")
    if len(inputs) == 1 and out.suffix.lower() == ".wav":
        targets = [out]
    else:
        targets = [out / p.name for p in inputs]
    if (args.clean or args.noise_ref) and len(inputs) > 1:
        raise UsageError("--clean/--noise-ref need a single input file")
    jobs = [{"input": str(i), "output": str(o), "model": args.model, "cfg": cfg,
             "transform": transform, "snapshot": snap, "clean": args.clean,
             "noise_ref": args.noise_ref, "log_steps": args.log_steps}
            for i, o in zip(inputs, targets)]
    try:
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                reports = list(pool.map(enhance_file, jobs))
        else:
            reports = [enhance_file(j) for j in jobs]
    except (ValueError, OSError) as e:
        raise UsageError(str(e)) from None
    if not args.quiet:
        for r in reports:
            m = r["metrics"]
            extra = f" si_sdr={m['si_sdr']:.2f} dB" if "si_sdr" in m else ""
            print(f"{r['input']} -> {r['outputs']['speech']} ({r['algorithm']}){extra}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-score
# ---------------------------------------------------------------------------


def load_grids(directory: Path, transform: AmplitudeTransform, segment: int) -> list:
    """Spectrogram grids from ``*.wav`` (cut into ``segment``-frame pieces) and ``*.npy`` files."""
    grids = []
    cfg = StftConfig()
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() == ".wav":
            X = transform.forward(stft(read_wav(path, cfg.sample_rate)[0], cfg))
            for k in range(X.shape[1] // segment):
                grids.append(X[:, k * segment:(k + 1) * segment])
        elif path.suffix.lower() == ".npy":
            grids.append(np.asarray(np.load(path), dtype=complex))
    return grids


def cmd_train_score(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"dataset directory {data} not found")
    transform = AmplitudeTransform(args.alpha, args.beta)
    if args.label == "joint":
        dataset = {LABELS[k]: load_grids(data / k, transform, args.segment_frames)
                   if (data / k).is_dir() else [] for k in ("speech", "noise")}
        if not all(dataset.values()):
            raise UsageError(f"joint training needs non-empty {data}/speech and {data}/noise")
        label = None
    else:
        dataset = load_grids(data, transform, args.segment_frames)
        if not dataset:
            raise UsageError(f"no .wav or .npy files in {data}")
        label = LABELS[args.label]
    try:
        tcfg = DsmTrainConfig(steps=args.steps, batch_size=args.batch_size,
                              learning_rate=args.lr, seed=args.seed)
        history = []
        model = dsm_train(dataset, tcfg, SdeParams(), label=label, hidden=args.hidden,
                          history=history)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    curve = out.with_suffix(".curve.csv")
    with open(curve, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(history))
    if not args.quiet:
        print(f"trained {args.label} model for {args.steps} steps; final loss "
              f"{history[-1] if history else float('nan'):.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from . import verify

    names = args.suite or list(verify.SUITES)
    results = []
    for name in names:
        fn = verify.SUITES[name]
        kwargs = {}
        if args.seeds is not None and name == "nmf":
            kwargs["seeds"] = args.seeds
        if args.runs is not None and name in ("conjugate", "prior"):
            kwargs["runs"] = args.runs
        res = fn(**kwargs)
        results.append(res)
        print(res.line(), flush=True)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def aggregate(reports: list) -> dict:
    """mean and standard error per (algorithm, metric)."""
    table = {}
    for r in reports:
        for metric, value in r.get("metrics", {}).items():
            table.setdefault(r["algorithm"], {}).setdefault(metric, []).append(float(value))
    out = {}
    for alg, ms in sorted(table.items()):
        out[alg] = {}
        for metric, vals in sorted(ms.items()):
            n = len(vals)
            se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
            out[alg][metric] = {"mean": float(np.mean(vals)), "se": se, "n": n}
    return out


def cmd_report(args) -> int:
    directory = Path(args.directory)
    files = sorted(directory.glob("*.json")) if directory.is_dir() else []
    if not files:
        raise UsageError(f"no JSON reports in {directory}")
    reports, bad = [], []
    for path in files:
        try:
            doc = read_json(path)
            if not isinstance(doc, dict) or "schema_version" not in doc or "algorithm" not in doc:
                raise ValueError("missing schema_version/algorithm")
            if not isinstance(doc.get("metrics", {}), dict):
                raise ValueError("metrics is not an object")
            reports.append(doc)
        except (ValueError, OSError) as e:
            bad.append(path)
            logger.warning("skipping malformed report %s: %s", path, e)
    if not reports:
        print(f"all {len(bad)} report files are malformed", file=sys.stderr)
        return EXIT_USAGE
    agg = aggregate(reports)
    metric_names = sorted({m for ms in agg.values() for m in ms})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "n"] + [f"{m}_{s}" for m in metric_names for s in ("mean", "se")])
    lines = []
    for alg, ms in agg.items():
        n = max((v["n"] for v in ms.values()), default=0)
        row = [alg, n]
        cells = []
        for m in metric_names:
            v = ms.get(m)
            row += [repr(v["mean"]), repr(v["se"])] if v else ["", ""]
            cells.append(f"{v['mean']:.2f} +/- {v['se']:.2f}" if v else "-")
        w.writerow(row)
        lines.append(f"{alg:<16}" + "".join(f"{c:>22}" for c in cells))
    out_csv = Path(args.output) if args.output else directory / "summary.csv"
    out_csv.write_text(buf.getvalue(), encoding="utf-8")
    header = f"{'algorithm':<16}" + "".join(f"{m:>22}" for m in metric_names)
    print(header)
    print("\n".join(lines))
    if bad:
        print(f"skipped {len(bad)} malformed file(s): {', '.join(p.name for p in bad)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    """Write a synthetic corpus: mixtures with clean/noise references and analytic priors."""
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    cfg = StftConfig()
    from .verify import synthetic_setup

    speech, joint, w0 = synthetic_setup(args.seed, args.samples, cfg)
    save_model(speech, out / "speech_prior.json")
    save_model(joint, out / "joint_prior.json")
    rng = np.random.default_rng(args.seed)
    for k in range(args.count):
        mix = synthetic.make_mixture(rng, args.samples, cfg, speech, noise_w=w0, snr=args.snr)
        peak = max(np.max(np.abs(mix.mixture)), 1e-12) / 0.9
        for name, sig in (("mix", mix.mixture), ("clean", mix.speech), ("noise", mix.noise)):
            write_wav(out / f"{k:03d}_{name}.wav", sig / peak)
    if args.grids:
        for label, prior in (("speech", speech), ("noise", joint.models[0])):
            d = out / "grids" / label
            d.mkdir(parents=True, exist_ok=True)
            for k in range(args.grids):
                if label == "speech":
                    g = synthetic.sample_speech(prior, (cfg.n_freq, 32), rng)
                else:
                    g = np.sqrt(prior.var) * complex_normal(rng, (cfg.n_freq, 32))
                np.save(d / f"{k:03d}.npy", g)
    if not args.quiet:
        print(f"wrote {args.count} mixtures at {args.snr:g} dB to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffusese",
                                description="Unsupervised diffusion-based speech enhancement")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("enhance", help="enhance WAV file(s)")
    e.add_argument("paths", nargs="+", help="input WAV(s) followed by output WAV or directory")
    e.add_argument("--alg", choices=ALGORITHMS, help="algorithm (default diffuseen)")
    e.add_argument("--model", required=True, help="score model file (JSON)")
    e.add_argument("--config", help="JSON config file (overridden by flags)")
    e.add_argument("--steps", type=int, help="reverse steps N (default 30)")
    e.add_argument("--lambda", dest="lambda", type=float, help="guidance weight")
    e.add_argument("--lambda-schedule", choices=("constant", "sigma"))
    e.add_argument("--sigma-r", type=float, help="observation perturbation std (default 5e-4)")
    e.add_argument("--nmf-rank", type=int, help="NMF rank (default 4)")
    e.add_argument("--nmf-iters", type=int, help="multiplicative updates per M-step (default 1)")
    e.add_argument("--em-iters", type=int, help="EM iterations for udiffse (default 5)")
    e.add_argument("--posterior-samples", type=int, help="posterior samples per E-step (udiffse)")
    e.add_argument("--langevin-r", type=float, help="Langevin step factor r (default 0.5)")
    e.add_argument("--corrector", action=argparse.BooleanOptionalAction, default=None,
                   help="force the Langevin corrector on/off")
    e.add_argument("--alpha", type=float, help="magnitude compression exponent (default 1)")
    e.add_argument("--beta", type=float, help="magnitude scale (default 1)")
    e.add_argument("--seed", type=int, help="base seed (default 0)")
    e.add_argument("--clean", help="clean reference WAV for metrics")
    e.add_argument("--noise-ref", help="noise reference WAV for SI-SIR/SI-SAR")
    e.add_argument("--dump-schedule", help="write the diffusion schedule as CSV")
    e.add_argument("--log-steps", action="store_true", help="include per-step diagnostics")
    e.add_argument("--jobs", type=int, default=1, help="parallel workers")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_enhance)

    t = sub.add_parser("train-score", help="fit a toy score model by denoising score matching")
    t.add_argument("data", help="directory of .wav/.npy files (joint: speech/ and noise/ subdirs)")
    t.add_argument("output", help="model file to write (JSON)")
    t.add_argument("--label", choices=("speech", "noise", "joint"), default="speech")
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--segment-frames", type=int, default=32)
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train_score)

    v = sub.add_parser("verify", help="run the oracle verification suites")
    v.add_argument("--suite", action="append",
                   choices=("kernel", "tweedie", "prior", "conjugate", "nmf", "posterior",
                            "wiener", "metrics", "dsm", "consistency", "stft", "determinism"),
                   help="suite to run (repeatable; default all)")
    v.add_argument("--seeds", type=int, help="seed count for the nmf suite")
    v.add_argument("--runs", type=int, help="run count for the prior/conjugate suites")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="aggregate per-utterance JSON reports")
    r.add_argument("directory")
    r.add_argument("--output", help="CSV path (default DIRECTORY/summary.csv)")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic corpus with analytic priors")
    s.add_argument("output")
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--samples", type=int, default=16000)
    s.add_argument("--snr", type=float, default=0.0)
    s.add_argument("--grids", type=int, default=0, help="also write N training grids per label")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
