"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import phantom
from . import pipeline as P
from .metrics import CCCReport
from .nn.checkpoint import CheckpointFormatError
from .radiomics import ExtractConfig, extract_all, write_feature_csv
from .seeding import substream
from .volume import Volume, VolumeFormatError, load_volume, save_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PGM_WINDOW = (-1000.0, 400.0)
DEFAULTS = P.RunConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags whose default lives in RunConfig (None here)."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _d(name: str) -> str:
    return f"(default: {getattr(DEFAULTS, name)})"


def _add_run_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    """Flags that overlay RunConfig; default None means 'not given'."""
    p.add_argument("--config", help="JSON file with RunConfig keys; flags take precedence")
    p.add_argument("--seed", type=int, help=f"master seed {_d('seed')}")
    p.add_argument("--out-dir", help=f"output directory {_d('out_dir')}")
    p.add_argument("--manifest", help="dataset manifest.json")
    spec = {
        "arch": dict(choices=["unetpp", "unet"], help=f"encoder-decoder topology {_d('arch')}"),
        "recon_loss": dict(choices=["l2", "l1"], help=f"reconstruction loss {_d('recon_loss')}"),
        "method": dict(choices=list(P.METHODS), help=f"standardization method {_d('method')}"),
        "epochs1": dict(type=int, help=f"phase-1 epochs {_d('epochs1')}"),
        "epochs2": dict(type=int, help=f"phase-2 epochs {_d('epochs2')}"),
        "batch": dict(type=int, help=f"batch size {_d('batch')}"),
        "lr": dict(type=float, help=f"phase-1 learning rate {_d('lr')}"),
        "lr2": dict(type=float, help=f"phase-2 learning rate {_d('lr2')}"),
        "lambda_aux": dict(type=float, help=f"weight of the x0-estimate loss term {_d('lambda_aux')}"),
        "lam": dict(type=float, help=f"image-space weight inside that term {_d('lam')}"),
        "start_mode": dict(help=f"pure-noise or truncated:T {_d('start_mode')}"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, **spec[name])


def effective_config(args) -> P.RunConfig:
    """RunConfig defaults, overlaid by --config JSON, overlaid by explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        values.update(doc)
    for f in fields(P.RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return P.RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _echo(cfg: P.RunConfig, out_dir: Path, name: str, outputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    print(json.dumps({"effective_config": cfg.to_dict()}, sort_keys=True))
    P.write_run_manifest(out_dir / f"run_{name}.json", cfg, outputs)


def _require(value, flag: str):
    if value is None or value == "":
        raise UsageError(f"{flag} is required")
    return value


# ------------------------------------------------------------- commands

def cmd_phantom_gen(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out_dir or "data")
    tmpl = phantom.PhantomTemplate(dims=(args.size, args.size, args.slices))
    if not 0 <= args.n_train <= args.n:
        raise UsageError("--n-train must be between 0 and --n")
    pairs = phantom.make_paired_dataset(args.n, tmpl, seed=cfg.seed)
    path = phantom.write_dataset(pairs, out, args.n_train, {
        "seed": cfg.seed, "template": {"dims": list(tmpl.dims)},
        "kernels": {"smooth_sigma_vox": phantom.SMOOTH.smooth_sigma_vox,
                    "sharp_amount": phantom.SHARP.sharp_amount,
                    "sharp_sigma_vox": phantom.SHARP.sharp_sigma_vox}})
    print(json.dumps({"effective_config": {"n": args.n, "n_train": args.n_train, "seed": cfg.seed,
                                           "size": args.size, "slices": args.slices}}, sort_keys=True))
    print(f"wrote {len(pairs)} pairs to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    _require(cfg.manifest, "--manifest")
    out = Path(cfg.out_dir)
    if args.phase == "phase1":
        if cfg.method == "ddpm-only":
            raise UsageError("ddpm-only has no phase 1")
        res = P.train_phase1(cfg, progress=print)
    else:
        ck = args.phase1 or (str(out / "phase1.ltck") if cfg.method == "ltdiff" else None)
        res = P.train_phase2(cfg, ck, progress=print)
    _echo(cfg, out, args.phase, {"checkpoint": res.checkpoint, "loss_curve": res.curve})
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_standardize(args) -> int:
    cfg = effective_config(args)
    _require(cfg.manifest, "--manifest")
    run = Path(cfg.out_dir)
    p1 = args.phase1 or (str(run / "phase1.ltck") if cfg.method != "ddpm-only" else None)
    p2 = args.phase2 or (str(run / "phase2.ltck") if cfg.method != "autoencoder" else None)
    models = P.load_models(cfg.method, p1, p2)
    out = Path(args.std_dir) if args.std_dir else run / "standardized"
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for e in P.load_entries(cfg.manifest, args.split):
        a = load_volume(e.a)
        ap = P.standardize(a, models, cfg.start_mode, substream(cfg.seed, "sampling", e.index), cfg.crop)
        name = f"pair{e.index:04d}_aprime.ltdv"
        save_volume(ap, out / name)
        index[str(e.index)] = name
    (out / "standardized.json").write_text(json.dumps({"volumes": index}, indent=2, sort_keys=True) + "\n")
    _echo(cfg, run, "standardize", {"standardized": out})
    print(f"wrote {len(index)} volumes to {out}")
    return EXIT_OK


def _load_std(std_dir) -> dict[int, Volume]:
    path = Path(std_dir) / "standardized.json"
    if not path.is_file():
        raise P.DataError(f"no standardized.json in {std_dir}")
    doc = json.loads(path.read_text())
    return {int(k): load_volume(Path(std_dir) / v) for k, v in doc["volumes"].items()}


def _synth_volumes(args, entries) -> dict[int, Volume]:
    if args.against == "b":
        return {e.index: load_volume(e.b) for e in entries}
    if args.against == "a":
        return {e.index: load_volume(e.a) for e in entries}
    return _load_std(_require(args.std_dir, "--std-dir"))


def cmd_features(args) -> int:
    entries = P.load_entries(_require(args.manifest, "--manifest"), args.split)
    vols = {e.index: load_volume(e.b) for e in entries} if args.image == "b" else (
        {e.index: load_volume(e.a) for e in entries} if args.image == "a" else _load_std(_require(args.std_dir, "--std-dir")))
    rows = []
    for e in entries:
        if e.index not in vols:
            raise P.DataError(f"no volume for pair {e.index}")
        v = vols[e.index]
        rois = P.lesion_rois(e, v) if args.roi_policy == "lesion" else P.window_rois(e, load_volume(e.b))
        for r in rois:
            try:
                rows.append((f"pair{e.index:04d}", r.roi_id, extract_all(v, r.mask, ExtractConfig())))
            except ValueError as exc:
                print(f"skip {r.roi_id}: {exc}", file=sys.stderr)
    out = Path(args.out or "features.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_feature_csv(out, rows)
    print(f"wrote {len(rows)} feature rows to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    entries = P.load_entries(_require(args.manifest, "--manifest"), args.split)
    synth = _synth_volumes(args, entries)
    res = P.evaluate(entries, synth, args.roi_policy, workers=args.workers)
    out = Path(args.out_dir or "eval")
    paths = P.write_eval(res, out)
    print(json.dumps({"effective_config": {"manifest": args.manifest, "split": args.split,
                                           "roi_policy": args.roi_policy, "against": args.against,
                                           "std_dir": args.std_dir}}, sort_keys=True))
    print(render_table(res.baseline, res.model))
    print(json.dumps({"outputs": paths}, sort_keys=True))
    return EXIT_OK


def render_table(baseline: CCCReport | None, model: CCCReport) -> str:
    """Per-class mean +/- std CCC, one row per class, columns aligned."""
    head = ["class", "n"] + (["baseline (A vs B)"] if baseline else []) + ["model (A' vs B)"]
    rows = []
    for cls, (m, sd, n) in model.summary.items():
        row = [cls, str(n)]
        if baseline:
            bm, bsd, _ = baseline.summary[cls]
            row.append(f"{bm:.2f} +/- {bsd:.2f}")
        row.append(f"{m:.2f} +/- {sd:.2f}")
        rows.append(row)
    widths = [max(len(r[k]) for r in [head] + rows) for k in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def to_pgm_bytes(img: np.ndarray, window=PGM_WINDOW) -> bytes:
    """8-bit binary PGM of a 2D HU image mapped linearly over ``window``."""
    lo, hi = window
    g = np.clip((img.astype(np.float64) - lo) / (hi - lo), 0, 1)
    pix = np.rint(g * 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def cmd_report(args) -> int:
    model = CCCReport.from_csv(args.ccc)
    baseline = CCCReport.from_csv(args.baseline) if args.baseline else None
    text = render_table(baseline, model)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.pgm_dir:
        entries = P.load_entries(_require(args.manifest, "--manifest"), args.split)
        std = _load_std(_require(args.std_dir, "--std-dir"))
        out = Path(args.pgm_dir)
        out.mkdir(parents=True, exist_ok=True)
        for e in entries[: args.n_dumps]:
            a, b = load_volume(e.a), load_volume(e.b)
            k = a.shape[0] // 2
            sep = np.full((a.shape[1], 2), PGM_WINDOW[0], dtype=np.float32)
            panel = np.concatenate([a.data[k], sep, b.data[k], sep, std[e.index].data[k]], axis=1)
            (out / f"pair{e.index:04d}_A_B_Aprime.pgm").write_bytes(to_pgm_bytes(panel))
        print(f"wrote slice panels (A | B | A') to {out}")
    return EXIT_OK


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    root = _Parser(prog="ctharmonize", description="CT kernel standardization on paired phantoms.",
                   formatter_class=fmt)
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic paired phantoms", formatter_class=fmt)
    phs = ph.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = phs.add_parser("gen", help="generate a paired dataset", formatter_class=fmt)
    gen.add_argument("--n", type=int, default=64, help="number of pairs")
    gen.add_argument("--n-train", type=int, default=32, help="pairs in the train split; the rest are eval")
    gen.add_argument("--size", type=int, default=64, help="in-plane size in voxels")
    gen.add_argument("--slices", type=int, default=4, help="slices per volume")
    gen.add_argument("--config", help="JSON file with RunConfig keys (only seed is used)")
    gen.add_argument("--seed", type=int, help=f"master seed {_d('seed')}")
    gen.add_argument("--out-dir", help="output directory (default: data)")
    gen.set_defaults(func=cmd_phantom_gen)

    tr = sub.add_parser("train", help="training phases", formatter_class=fmt)
    trs = tr.add_subparsers(dest="phase", required=True, parser_class=_Parser)
    p1 = trs.add_parser("phase1", help="train the encoder-decoder", formatter_class=fmt)
    _add_run_flags(p1, ["arch", "recon_loss", "method", "epochs1", "batch", "lr"])
    p1.set_defaults(func=cmd_train)
    p2 = trs.add_parser("phase2", help="train the latent denoiser", formatter_class=fmt)
    _add_run_flags(p2, ["arch", "recon_loss", "method", "epochs2", "batch", "lr2", "lambda_aux", "lam"])
    p2.add_argument("--phase1", help="phase-1 checkpoint (default: OUT_DIR/phase1.ltck)")
    p2.set_defaults(func=cmd_train)

    st = sub.add_parser("standardize", help="map A volumes to the standard domain", formatter_class=fmt)
    _add_run_flags(st, ["method", "start_mode"])
    st.add_argument("--phase1", help="phase-1 checkpoint (default: OUT_DIR/phase1.ltck)")
    st.add_argument("--phase2", help="phase-2 checkpoint (default: OUT_DIR/phase2.ltck)")
    st.add_argument("--split", default="eval", choices=["train", "eval"], help="which pairs")
    st.add_argument("--std-dir", help="where A' volumes go (default: OUT_DIR/standardized)")
    st.set_defaults(func=cmd_standardize)

    fe = sub.add_parser("features", help="extract radiomic features to CSV", formatter_class=fmt)
    fe.add_argument("--manifest", help="dataset manifest.json")
    fe.add_argument("--split", default="eval", choices=["train", "eval"], help="which pairs")
    fe.add_argument("--image", default="b", choices=["a", "b", "std"], help="which image of each pair")
    fe.add_argument("--std-dir", help="standardized volumes (for --image std)")
    fe.add_argument("--roi-policy", default="lesion", choices=["lesion", "window"], help="ROI definition")
    fe.add_argument("--out", help="CSV path (default: features.csv)")
    fe.set_defaults(func=cmd_features)

    ev = sub.add_parser("evaluate", help="CCC and relative error against B", formatter_class=fmt)
    ev.add_argument("--manifest", help="dataset manifest.json")
    ev.add_argument("--split", default="eval", choices=["train", "eval"], help="which pairs")
    ev.add_argument("--std-dir", help="standardized volumes")
    ev.add_argument("--against", default="std", choices=["std", "a", "b"],
                    help="volumes compared with B: standardized, A itself, or B itself")
    ev.add_argument("--roi-policy", default="lesion", choices=["lesion", "window"], help="ROI definition")
    ev.add_argument("--workers", type=int, default=1, help="feature extraction processes")
    ev.add_argument("--out-dir", help="output directory (default: eval)")
    ev.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="render CCC tables and slice panels", formatter_class=fmt)
    rp.add_argument("--ccc", required=True, help="model CCC CSV")
    rp.add_argument("--baseline", help="baseline CCC CSV")
    rp.add_argument("--out", help="also write the table here")
    rp.add_argument("--pgm-dir", help="write A | B | A' middle-slice panels as PGM here")
    rp.add_argument("--manifest", help="dataset manifest.json (for --pgm-dir)")
    rp.add_argument("--std-dir", help="standardized volumes (for --pgm-dir)")
    rp.add_argument("--split", default="eval", choices=["train", "eval"], help="which pairs")
    rp.add_argument("--n-dumps", type=int, default=4, help="number of panels")
    rp.set_defaults(func=cmd_report)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except P.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (P.DataError, VolumeFormatError, CheckpointFormatError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
