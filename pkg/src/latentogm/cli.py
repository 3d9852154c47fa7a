"""Command-line entry point: ``latentogm <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical abort. Every successful run writes a run-manifest JSON next to
its output recording the command, config hash, seed and artifact hashes.
"""
from __future__ import annotations

import argparse
import base64
import csv
import html
import io
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .errors import ConfigError, DataError, NumericalAbort, RejectedInputError, ShapeError
from .util import config_hash, read_json, sha256_file, write_json

logger = logging.getLogger("latentogm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(path, cls):
    if path is None:
        return cls()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        d = read_json(p)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return cls.from_dict(d)


def _hash_artifacts(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and not f.name.startswith("run_"):
                    out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


def write_run_manifest(path, command: str, argv, config: dict | None, seed, inputs, outputs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(
        path,
        {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "config": config,
            "config_hash": None if config is None else config_hash(config),
            "seed": seed,
            "inputs": _hash_artifacts(inputs),
            "outputs": _hash_artifacts(outputs),
        },
    )
    return path


def _run_path_for(out, command: str) -> Path:
    out = Path(out)
    if out.suffix:  # a file output
        return out.with_name(f"run_{command}_{out.stem}.json")
    return out / f"run_{command}.json"


# --------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args, argv):
    from .gridworld import SimConfig, generate_dataset

    cfg = _load_config(args.config, SimConfig)
    if args.scenes is not None:
        cfg.n_scenes = args.scenes
        cfg.validate()
    m = generate_dataset(cfg, args.seed, args.out, workers=args.workers)
    print(f"wrote {len(m.sequences)} sequences to {m.root}")
    write_run_manifest(_run_path_for(args.out, "simulate"), "simulate", argv, cfg.to_dict(), args.seed,
                       [] if args.config is None else [args.config], [m.path])


def cmd_train_repr(args, argv):
    from .repr_train import ReprTrainConfig, train_representation

    cfg = _load_config(args.config, ReprTrainConfig)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    res = train_representation(args.data, cfg, args.out, log_path=args.log)
    last = res.history[-1] if res.history else {}
    print(f"checkpoint {res.checkpoint}; final recon {last.get('recon', float('nan')):.4f}")
    write_run_manifest(_run_path_for(args.out, "train-repr"), "train-repr", argv, cfg.to_dict(), cfg.seed,
                       [Path(args.data) / "manifest.json"], [res.checkpoint, res.log_path])


def cmd_encode(args, argv):
    from .latent_predict import encode_dataset

    lm = encode_dataset(args.data, args.encoder, args.out, sample_seed=args.sample_seed)
    print(f"encoded {len(lm.sequences)} sequences to {lm.root}")
    write_run_manifest(_run_path_for(args.out, "encode"), "encode", argv, None, args.sample_seed,
                       [args.encoder, Path(args.data) / "manifest.json"], [args.out])


def cmd_train_pred(args, argv):
    from .latent_predict import PredictorConfig, encoder_generator_hashes, train_predictor

    cfg = _load_config(args.config, PredictorConfig)
    if args.seed is not None:
        cfg.seed = args.seed
    before = encoder_generator_hashes(args.repr) if args.repr else None
    res = train_predictor(args.latents, cfg, args.out, log_path=args.log)
    if before is not None and encoder_generator_hashes(args.repr) != before:
        raise DataError("stage-1 parameters changed during predictor training")
    print(f"checkpoint {res.checkpoint}; best val {res.best_val:.5f} (constant-latent {res.baseline_val:.5f})")
    write_run_manifest(_run_path_for(args.out, "train-pred"), "train-pred", argv, cfg.to_dict(), cfg.seed,
                       [Path(args.latents) / "manifest.json"] + ([args.repr] if args.repr else []),
                       [res.checkpoint, res.log_path])


def cmd_predict(args, argv):
    from .latent_predict import copy_last_predictions, predict_ogms

    if args.baseline == "copy-last":
        pm = copy_last_predictions(args.data, args.out, T=args.rollout, split=args.split)
        inputs = [Path(args.data) / "manifest.json"]
    else:
        missing = [n for n in ("encoder", "generator", "predictor") if getattr(args, n) is None]
        if missing:
            raise UsageError(f"predict needs --{', --'.join(missing)} (or --baseline copy-last)")
        pm = predict_ogms(args.encoder, args.generator, args.predictor, args.data, args.out,
                          T=args.rollout, split=args.split)
        inputs = [args.encoder, args.generator, args.predictor, Path(args.data) / "manifest.json"]
    print(f"wrote {len(pm.sequences)} predicted windows to {pm.root}")
    write_run_manifest(_run_path_for(args.out, "predict"), "predict", argv,
                       {"rollout": pm.P, "split": args.split, "baseline": args.baseline}, None, inputs, [pm.path])


def cmd_evaluate(args, argv):
    from .metrics import evaluate

    rep = evaluate(args.pred, args.truth, thresholds=tuple(args.thresholds), split=args.split)
    rep.meta["label"] = args.label
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save_json(out)
    csv_path = out.with_suffix(".csv")
    rep.save_csv(csv_path)
    print(rep.summary(args.label))
    write_run_manifest(_run_path_for(out, "evaluate"), "evaluate", argv,
                       {"thresholds": list(args.thresholds), "split": args.split}, None,
                       [Path(args.pred) / "manifest.json", Path(args.truth) / "manifest.json"], [out, csv_path])


def cmd_analyze(args, argv):
    from . import analysis
    from .manifest import DatasetManifest
    from .ogm import read_sequence
    from .repr_train import load_frames

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.experiment == "sample":
        ref = None
        if args.data:
            ref = load_frames(DatasetManifest.load(args.data), "train")
        stats = analysis.run_sample(args.ckpt, args.n, args.seed, out, reference_frames=ref)
    elif args.experiment == "swap":
        frames = load_frames(DatasetManifest.load(args.data), args.split)
        stats = analysis.run_swap(args.ckpt, frames, args.pairs, args.seed, out, partner=args.partner)
    else:
        m = DatasetManifest.load(args.data)
        ids = m.by_id()
        if args.sequence not in ids:
            raise DataError(f"no sequence {args.sequence!r} in {m.root}")
        frames = read_sequence(m.resolve(ids[args.sequence])).stacked()
        if not 0 <= args.start < args.start + args.gap < len(frames):
            raise ConfigError(f"frames {args.start} and {args.start + args.gap} not in sequence")
        stats = analysis.run_interpolate(args.ckpt, frames[args.start], frames[args.start + args.gap],
                                         args.steps, out, tag=f"_{args.sequence}_{args.start}")
    print(json.dumps(stats, indent=2))
    write_run_manifest(out / f"run_analyze_{args.experiment}.json", f"analyze {args.experiment}", argv,
                       {k: v for k, v in vars(args).items() if k != "func"}, getattr(args, "seed", None),
                       [args.ckpt], [out])


def _png_b64(fig) -> str:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=80, metadata={"Software": None})
    return base64.b64encode(buf.getvalue()).decode()


def build_report(runs_dir, out_path) -> Path:
    """Static HTML summary of every log, evaluation report and montage under ``runs_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = Path(runs_dir)
    if not runs.is_dir():
        raise DataError(f"{runs} is not a directory")
    sections = [f"<h1>Run report: {html.escape(str(runs))}</h1>"]

    logs = sorted(runs.rglob("*.log.csv"))
    for log in logs:
        with open(log) as f:
            rows = list(csv.DictReader(f))
        if not rows:
            continue
        x_key = "step" if "step" in rows[0] else "epoch"
        fig, ax = plt.subplots(figsize=(6, 3))
        for k in rows[0]:
            if k == x_key:
                continue
            ax.plot([float(r[x_key]) for r in rows], [float(r[k]) for r in rows], label=k)
        ax.set_xlabel(x_key)
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        sections.append(f"<h2>Loss curves: {html.escape(log.name)}</h2>"
                        f'<img src="data:image/png;base64,{_png_b64(fig)}">')
        plt.close(fig)

    reports = []
    for p in sorted(runs.rglob("*.json")):
        try:
            d = read_json(p)
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(d, dict) and "per_horizon" in d and "overall" in d:
            reports.append((p, d))
    if reports:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        rows = ["<tr><th>report</th><th>IS</th><th>MSE</th><th>windows</th></tr>"]
        for p, d in reports:
            label = d.get("meta", {}).get("label") or p.stem
            ph = d["per_horizon"]
            ax.errorbar([r["t"] for r in ph], [r["is_mean"] for r in ph], yerr=[r["is_se"] for r in ph],
                        label=label, capsize=2)
            o = d["overall"]
            rows.append(f"<tr><td>{html.escape(label)}</td><td>{o['is_mean']:.3f} ± {o['is_se']:.3f}</td>"
                        f"<td>{o['mse_mean']:.4f} ± {o['mse_se']:.4f}</td>"
                        f"<td>{d.get('meta', {}).get('n_windows', '')}</td></tr>")
        ax.set_xlabel("horizon step")
        ax.set_ylabel("IS (lower is better)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        sections.append("<h2>Evaluation</h2><table border=1>" + "".join(rows) + "</table>"
                        f'<img src="data:image/png;base64,{_png_b64(fig)}">')
        plt.close(fig)

    for png in sorted(runs.rglob("*.png")):
        b64 = base64.b64encode(png.read_bytes()).decode()
        sections.append(f"<h2>{html.escape(png.name)}</h2><img src=\"data:image/png;base64,{b64}\">")

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("<!doctype html><html><head><meta charset='utf-8'><title>latentogm report</title>"
                   "</head><body>" + "\n".join(sections) + "</body></html>\n")
    return out


def cmd_report(args, argv):
    out = build_report(args.runs, args.out)
    print(f"wrote {out}")
    write_run_manifest(_run_path_for(out, "report"), "report", argv, None, None, [], [out])


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentogm", description="Latent-space occupancy grid prediction pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic OGM dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, help="override n_scenes")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-repr", help="train the stage-1 autoencoder")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_repr)

    s = sub.add_parser("encode", help="encode a dataset into latents with a frozen encoder")
    s.add_argument("--encoder", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sample-seed", type=int, help="store posterior samples instead of means")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train-pred", help="train the stage-2 latent predictor")
    s.add_argument("--config")
    s.add_argument("--latents", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--seed", type=int)
    s.add_argument("--repr", help="stage-1 checkpoint to verify as unchanged")
    s.set_defaults(func=cmd_train_pred)

    s = sub.add_parser("predict", help="predict future grids for every test window")
    s.add_argument("--encoder")
    s.add_argument("--generator")
    s.add_argument("--predictor")
    s.add_argument("--data", required=True)
    s.add_argument("--rollout", type=int)
    s.add_argument("--split", default="test")
    s.add_argument("--baseline", choices=["copy-last"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--label", default="model")
    s.add_argument("--thresholds", type=float, nargs=2, default=[0.25, 0.75])
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", help="latent-space experiments")
    asub = s.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    a = asub.add_parser("sample", help="decode samples from the prior")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--n", type=int, default=16)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--data", help="dataset for the reference class histogram")
    a.add_argument("--out", required=True)
    a = asub.add_parser("swap", help="style/content swap statistics")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--pairs", type=int, default=100)
    a.add_argument("--partner", choices=["data", "prior"], default="data",
                   help="where the swapped-in latent comes from")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a = asub.add_parser("interpolate", help="interpolate between two frames of a sequence")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sequence", required=True)
    a.add_argument("--start", type=int, default=0)
    a.add_argument("--gap", type=int, default=5)
    a.add_argument("--steps", type=int, default=8)
    a.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("report", help="static HTML summary of a runs directory")
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"latentogm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except UsageError as e:
        print(f"latentogm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError, RejectedInputError) as e:
        print(f"latentogm: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        print(f"latentogm: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as e:
        print(f"latentogm: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
