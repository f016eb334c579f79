"""Command-line driver for the whole pipeline.

Every subcommand writes exactly one JSON run manifest recording the resolved
configuration, the seed, wall times and a sha256 of every file it produced.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics, phantom, stats
from .kspace import ConfigError, DegradeConfig, default_window, degrade, make_training_pair
from .net import NetworkConfig, ShapeError, load_weights
from .sweep import run_sweep
from .train import TrainConfig, load_config, super_resolve, train, write_loss_log
from .volume import Roi3D, Volume3D, normalize, read_volume, write_volume

log = logging.getLogger("volsr")

SUFFIX = ".srv"
# keys of a training config that describe the data rather than the network
DATA_KEYS = {"frac", "pf", "axes", "grid", "window"}


class StageFailed(RuntimeError):
    pass


# ---------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    seed: int | None = None
    threads: int | None = None
    config: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)  # path -> sha256
    stages: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)  # the only fields that may differ between runs
    wall_time_s: float = 0.0

    def record(self, *paths, root=None) -> None:
        """Checksum files (directories recursively); keys are relative to ``root`` if given."""
        for p in paths:
            p = Path(p)
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            for q in files:
                self.outputs[str(q.relative_to(root) if root else q)] = sha256(q)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- file helpers


def volume_files(root) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such file or directory")
    files = sorted(root.rglob(f"*{SUFFIX}"))
    if not files:
        raise FileNotFoundError(f"{root}: no {SUFFIX} volumes found")
    return files


def _volume_id(path: Path, root: Path) -> str:
    if root.is_file():
        return path.stem
    return str(path.relative_to(root).with_suffix(""))


def _map_volumes(src, dst, fn) -> list[Path]:
    """Apply ``fn`` to one volume or a directory tree of volumes, mirroring the layout."""
    src, dst = Path(src), Path(dst)
    written = []
    for path in volume_files(src):
        out = dst if src.is_file() else dst / path.relative_to(src)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_volume(fn(read_volume(path), path), out)
        written.append(out)
    return written


def _ints(count):
    def parse(text) -> tuple[int, ...]:
        try:
            vals = tuple(int(v) for v in text.split(","))
        except ValueError:
            vals = ()
        if len(vals) != count or min(vals) < 1:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated positive integers, got {text!r}")
        return vals
    return parse


def data_settings(rest: dict, dims) -> tuple[DegradeConfig, tuple, tuple]:
    unknown = set(rest) - DATA_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = DegradeConfig.uniform(float(rest.get("frac", 0.5)), float(rest.get("pf", 0.75)),
                                rest.get("axes", "yz"))
    grid = tuple(int(v) for v in rest.get("grid", dims))
    window = tuple(int(v) for v in rest.get("window", default_window(grid)))
    if len(grid) != 3 or len(window) != 2:
        raise ConfigError(f"grid needs 3 and window 2 values, got {grid} and {window}")
    return cfg, grid, window


# ---------------------------------------------------------------- stage functions


def make_corpus(out_dir, count, seed, dims, spacing, n_vessels, noise, softness, window, roi_size):
    """Render ``count`` phantoms plus their truth sidecar into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = phantom.corpus_specs(count, seed, dims=dims, spacing=spacing, n_vessels=n_vessels,
                                 noise_sigma=noise, softness=softness, window=window,
                                 roi_size=roi_size)
    rows = []
    for i, spec in enumerate(specs):
        vol, truth = phantom.generate(spec)
        name = f"phantom_{i:03d}"
        write_volume(vol, out_dir / f"{name}{SUFFIX}")
        rows.append((name, truth))
    phantom.write_truth(out_dir / "truth.csv", rows)
    return rows


def window_offset(dims, window, spacing) -> np.ndarray:
    """Physical shift (mm) from full-grid coordinates to centred-window coordinates."""
    lo = [(n - w) // 2 for n, w in zip(dims[:2], window)]
    return np.array([lo[0] * spacing[0], lo[1] * spacing[1], 0.0])


CONTOUR_FIELDS = ["id", "center_x", "center_y", "center_z", "radius", "normal_x", "normal_y", "normal_z"]
ROI_FIELDS = ["id", "roi", "lo_x", "hi_x", "lo_y", "hi_y", "lo_z", "hi_z"]


def write_contours(path, rows) -> None:
    """``rows``: (id, center, radius, normal) circles for edge sharpness."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTOUR_FIELDS)
        for vid, center, radius, normal in rows:
            w.writerow([vid, *(f"{c:.6f}" for c in center), f"{radius:.6f}", *(f"{n:.6f}" for n in normal)])


def read_contours(path) -> dict[str, list]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            center = [float(r[f"center_{a}"]) for a in "xyz"]
            normal = [float(r[f"normal_{a}"]) for a in "xyz"]
            out.setdefault(r["id"], []).append(metrics.circle_contour(center, float(r["radius"]), normal))
    return out


def write_rois(path, rows) -> None:
    """``rows``: (id, Roi3D) pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROI_FIELDS)
        for vid, roi in rows:
            w.writerow([vid, roi.name, *(v for pair in zip(roi.lo, roi.hi) for v in pair)])


def read_rois(path) -> dict[str, dict[str, Roi3D]]:
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            lo = tuple(int(r[f"lo_{a}"]) for a in "xyz")
            hi = tuple(int(r[f"hi_{a}"]) for a in "xyz")
            out.setdefault(r["id"], {})[r["roi"]] = Roi3D(lo, hi, r["roi"])
    return out


def evaluate_dirs(truth_dir, test_dir, contours=None, rois=None) -> list[metrics.MetricReport]:
    truth_dir, test_dir = Path(truth_dir), Path(test_dir)
    reports = []
    for path in volume_files(truth_dir):
        vid = _volume_id(path, truth_dir)
        other = test_dir if test_dir.is_file() else test_dir / path.relative_to(truth_dir)
        if not other.exists():
            raise FileNotFoundError(f"no test volume for {vid!r} (expected {other})")
        ref, tst = read_volume(path), read_volume(other)
        rep = metrics.MetricReport(vid, metrics.ssim(tst, ref), metrics.mse(tst, ref))
        if contours and vid in contours:
            rep.edge_sharpness = float(np.mean([metrics.edge_sharpness(tst, c) for c in contours[vid]]))
        boxes = (rois or {}).get(vid, {})
        if "blood" in boxes and "lung" in boxes:
            rep.snr = metrics.snr(tst, boxes["blood"], boxes["lung"])
        if "blood" in boxes and "myocardium" in boxes:
            rep.cnr = metrics.cnr(tst, boxes["blood"], boxes["myocardium"])
        reports.append(rep)
    return reports


def infer_volume(net_cfg, params, v: Volume3D, name: str = "") -> Volume3D:
    if v.data.min() < 0 or v.data.max() > 1:
        log.warning("%s: input outside [0, 1], normalising before inference", name or "volume")
        v = normalize(v)
    return super_resolve(net_cfg, params, [v])[0]


# ---------------------------------------------------------------- subcommands


def cmd_phantom(args, man: RunManifest):
    dims = args.dims
    window = tuple(args.window) if args.window else default_window(dims)
    man.config = {"count": args.count, "dims": dims, "spacing": args.spacing, "vessels": args.vessels,
                  "noise": args.noise, "softness": args.softness, "window": window,
                  "roi_size": args.roi_size}
    make_corpus(args.out_dir, args.count, args.seed, dims, (args.spacing,) * 3, args.vessels,
                args.noise, args.softness, window, args.roi_size)
    man.record(args.out_dir)
    return Path(args.out_dir) / "manifest.json"


def cmd_degrade(args, man: RunManifest):
    cfg = DegradeConfig.uniform(args.frac, args.pf, args.axes)
    man.config = asdict(cfg)
    man.inputs = [str(args.input)]
    written = _map_volumes(args.input, args.out, lambda v, _: degrade(v, cfg))
    man.record(*written)
    return _sidecar(args.out)


def _sidecar(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _load_pairs(corpus, rest):
    files = volume_files(corpus)
    clean = [read_volume(p) for p in files]
    cfg, grid, window = data_settings(rest, clean[0].shape)
    return [make_training_pair(v, cfg, grid, window) for v in clean], cfg, grid, window


def cmd_train(args, man: RunManifest):
    net_cfg, tcfg, rest = load_config(args.config)
    if args.seed is not None:
        tcfg = TrainConfig(**{**asdict(tcfg), "seed": args.seed})
    pairs, dcfg, grid, window = _load_pairs(args.corpus, rest)
    man.seed = tcfg.seed
    man.config = {"network": asdict(net_cfg), "train": asdict(tcfg), "degrade": asdict(dcfg),
                  "grid": grid, "window": window}
    man.inputs = [str(args.corpus), str(args.config)]
    res = train(pairs, net_cfg, tcfg, checkpoint=Path(args.out))
    write_loss_log(args.log, res.history)
    man.record(args.out, args.log)
    return _sidecar(args.out)


def cmd_infer(args, man: RunManifest):
    net_cfg, params = load_weights(args.weights)
    man.config = {"network": asdict(net_cfg)}
    man.inputs = [str(args.weights), str(args.input)]
    per_volume = {}

    def run(v, path):
        t0 = time.perf_counter()
        out = infer_volume(net_cfg, params, v, str(path))
        per_volume[str(path)] = time.perf_counter() - t0
        return out

    written = _map_volumes(args.input, args.out, run)
    man.timings["per_volume_s"] = per_volume
    man.record(*written)
    return _sidecar(args.out)


def cmd_eval(args, man: RunManifest):
    contours = read_contours(args.contours) if args.contours else None
    rois = read_rois(args.rois) if args.rois else None
    man.inputs = [str(p) for p in (args.truth, args.test, args.contours, args.rois) if p]
    metrics.write_report(args.out, evaluate_dirs(args.truth, args.test, contours, rois))
    man.record(args.out)
    return _sidecar(args.out)


def cmd_sweep(args, man: RunManifest):
    net_cfg, params = load_weights(args.weights)
    clean = [read_volume(p) for p in volume_files(args.corpus)]
    rest = {}
    if args.config:
        _, _, rest = load_config(args.config)
    base, grid, window = data_settings(rest, clean[0].shape)
    man.config = {"network": asdict(net_cfg), "degrade": asdict(base), "grid": grid, "window": window}
    man.inputs = [str(args.weights), str(args.corpus)]
    run_sweep(net_cfg, params, clean, base, grid, window).write(args.out)
    man.record(args.out)
    return _sidecar(args.out)


def cmd_stats(args, man: RunManifest):
    _, ref, tst = stats.read_pairs(args.pairs)
    ratings = stats.read_ratings(args.ratings) if args.ratings else None
    man.inputs = [str(p) for p in (args.pairs, args.ratings) if p]
    stats.write_agreement(args.out, stats.agreement(ref, tst, ratings))
    man.record(args.out)
    return _sidecar(args.out)


# ---------------------------------------------------------------- end to end

E2E = {
    "dims": (32, 32, 32),
    "spacing": 1.6,
    "window": (24, 24),
    "n_train": 12,
    "n_test": 4,
    "vessels": 2,
    "noise": 0.01,
    "softness": 1.6,
    "roi_size": 1,
    "levels": 2,
    "base_channels": 8,
    "epochs": 12,
    "batch_size": 2,
    "lr": 1e-3,
    "frac": 0.5,
    "pf": 0.75,
}


def _write_pairs(path, ref, tst):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "reference", "test"])
        for i, (a, b) in enumerate(zip(ref, tst)):
            w.writerow([i, repr(float(a)), repr(float(b))])


def _write_ratings(path, ref, tst):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "rater", "value"])
        for i, (a, b) in enumerate(zip(ref, tst)):
            w.writerow([i, "reference", repr(float(a))])
            w.writerow([i, "test", repr(float(b))])


def end_to_end(out_dir, seed: int, man: RunManifest, settings: dict = E2E) -> dict:
    """phantom -> degrade -> train -> infer -> eval -> sweep -> stats on a small fixed setup."""
    s = settings
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dims, window = tuple(s["dims"]), tuple(s["window"])
    spacing = (float(s["spacing"]),) * 3
    cfg = DegradeConfig.uniform(s["frac"], s["pf"])
    net_cfg = NetworkConfig(levels=s["levels"], base_channels=s["base_channels"])
    tcfg = TrainConfig(lr=s["lr"], batch_size=s["batch_size"], epochs=s["epochs"], seed=seed)
    man.seed = seed
    man.config = {k: list(v) if isinstance(v, tuple) else v for k, v in s.items()}
    state: dict = {}

    def stage(name, fn, outputs):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            fn()
        except Exception as exc:
            raise StageFailed(f"stage {name!r} failed: {exc}") from exc
        entry = {"name": name, "outputs": {}}
        for p in outputs:
            sub = RunManifest(name)
            sub.record(out / p, root=out)
            entry["outputs"].update(sub.outputs)
        man.outputs.update(entry["outputs"])
        man.stages.append(entry)
        man.timings[name] = time.perf_counter() - t0

    def do_phantom():
        common = (dims, spacing, s["vessels"], s["noise"], s["softness"], window, s["roi_size"])
        make_corpus(out / "train_hr", s["n_train"], 2 * seed, *common)
        state["test"] = make_corpus(out / "test_hr", s["n_test"], 2 * seed + 1, *common)

    def do_degrade():
        off = window_offset(dims, window, spacing)
        contours, rois = [], []
        for name, truth in state["test"]:
            hr = read_volume(out / "test_hr" / f"{name}{SUFFIX}")
            lr, target = make_training_pair(hr, cfg, dims, window)
            for sub in ("test_lr", "test_target"):
                (out / sub).mkdir(exist_ok=True)
            write_volume(lr, out / "test_lr" / f"{name}{SUFFIX}")
            write_volume(target, out / "test_target" / f"{name}{SUFFIX}")
            for vt in truth.vessels:
                contours.append((name, np.asarray(vt.center) - off, vt.diameter / 2, vt.axis))
            lo_shift = np.array([(n - w) // 2 for n, w in zip(dims[:2], window)] + [0])
            for roi in truth.rois.values():
                rois.append((name, Roi3D(np.asarray(roi.lo) - lo_shift, np.asarray(roi.hi) - lo_shift,
                                         roi.name)))
        write_contours(out / "contours.csv", contours)
        write_rois(out / "rois.csv", rois)

    def do_train():
        files = volume_files(out / "train_hr")
        pairs = [make_training_pair(read_volume(p), cfg, dims, window) for p in files]
        res = train(pairs, net_cfg, tcfg, checkpoint=out / "weights.srw")
        write_loss_log(out / "loss.csv", res.history)

    def do_infer():
        _, params = load_weights(out / "weights.srw")
        per_volume = {}

        def run(v, path):
            t0 = time.perf_counter()
            res = infer_volume(net_cfg, params, v, path.name)
            per_volume[path.name] = time.perf_counter() - t0
            return res

        _map_volumes(out / "test_lr", out / "test_sr", run)
        man.timings["infer_per_volume_s"] = per_volume

    def do_eval():
        contours = read_contours(out / "contours.csv")
        rois = read_rois(out / "rois.csv")
        for tag in ("lr", "sr"):
            reports = evaluate_dirs(out / "test_target", out / f"test_{tag}", contours, rois)
            metrics.write_report(out / f"report_{tag}.csv", reports)
            state[tag] = reports

    def do_sweep():
        _, params = load_weights(out / "weights.srw")
        clean = [read_volume(p) for p in volume_files(out / "test_hr")]
        run_sweep(net_cfg, params, clean, cfg, dims, window).write(out / "sweep.csv")

    def do_stats():
        off = window_offset(dims, window, spacing)
        diam = {"reference": [], "lr": [], "sr": []}
        for name, truth in state["test"]:
            vols = {"reference": read_volume(out / "test_target" / f"{name}{SUFFIX}"),
                    "lr": read_volume(out / "test_lr" / f"{name}{SUFFIX}"),
                    "sr": read_volume(out / "test_sr" / f"{name}{SUFFIX}")}
            for vt in truth.vessels:
                c = np.asarray(vt.center) - off
                for k, v in vols.items():
                    diam[k].append(phantom.measure_diameter(v, c, vt.axis))
        for tag in ("lr", "sr"):
            _write_pairs(out / f"diameters_{tag}.csv", diam["reference"], diam[tag])
            _write_ratings(out / f"ratings_{tag}.csv", diam["reference"], diam[tag])
            ratings = stats.read_ratings(out / f"ratings_{tag}.csv")
            report = stats.agreement(diam["reference"], diam[tag], ratings)
            stats.write_agreement(out / f"agreement_{tag}.csv", report)

    stage("phantom", do_phantom, ["train_hr", "test_hr"])
    stage("degrade", do_degrade, ["test_lr", "test_target", "contours.csv", "rois.csv"])
    stage("train", do_train, ["weights.srw", "loss.csv"])
    stage("infer", do_infer, ["test_sr"])
    stage("eval", do_eval, ["report_lr.csv", "report_sr.csv"])
    stage("sweep", do_sweep, ["sweep.csv"])
    stage("stats", do_stats, [f"{k}_{t}.csv" for t in ("lr", "sr") for k in ("diameters", "ratings", "agreement")])
    return {tag: float(np.mean([r.ssim for r in state[tag]])) for tag in ("lr", "sr")}


def cmd_e2e(args, man: RunManifest):
    seed = 7 if args.seed is None else args.seed
    summary = end_to_end(args.out_dir, seed, man)
    log.info("held-out mean SSIM: low-res %.4f, super-resolved %.4f", summary["lr"], summary["sr"])
    return Path(args.out_dir) / "manifest.json"


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    common.add_argument("--manifest", type=Path, default=None, help="run manifest path")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="volsr", description="Single-volume 3D super-resolution pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a phantom corpus")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--dims", type=_ints(3), default=(64, 64, 32))
    s.add_argument("--spacing", type=float, default=1.6)
    s.add_argument("--vessels", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--softness", type=float, default=1.6)
    s.add_argument("--window", type=_ints(2), default=None, help="in-plane training window, e.g. 48,48")
    s.add_argument("--roi-size", type=int, default=3)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("degrade", parents=[common], help="k-space truncation + partial Fourier")
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--frac", type=float, default=0.5)
    s.add_argument("--pf", type=float, default=0.75)
    s.add_argument("--axes", default="yz")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", parents=[common], help="train the network on a clean corpus")
    s.add_argument("--corpus", type=Path, required=True)
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--log", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="super-resolve one volume or a directory")
    s.add_argument("--weights", type=Path, required=True)
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="image-quality report against the truth")
    s.add_argument("--truth", type=Path, required=True)
    s.add_argument("--test", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--contours", type=Path, default=None)
    s.add_argument("--rois", type=Path, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="resolution sweep with a fixed network")
    s.add_argument("--weights", type=Path, required=True)
    s.add_argument("--corpus", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--config", type=Path, default=None, help="flat TOML with frac/pf/grid/window")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("stats", parents=[common], help="Bland-Altman and ICC agreement")
    s.add_argument("--pairs", type=Path, required=True)
    s.add_argument("--ratings", type=Path, default=None)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("e2e", parents=[common], help="run every stage on a small fixed setup")
    s.add_argument("--out-dir", type=Path, default=Path("e2e_out"))
    s.set_defaults(func=cmd_e2e)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "phantom" and args.seed is None:
        args.seed = 0
    man = RunManifest(args.command, seed=args.seed, threads=args.threads)
    limits = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
    t0 = time.perf_counter()
    try:
        with limits:
            default_path = args.func(args, man)
    except (ShapeError, ConfigError) as exc:
        log.error("%s", exc)
        return 2
    except (StageFailed, ValueError, OSError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    man.wall_time_s = time.perf_counter() - t0
    man.timings["total_s"] = man.wall_time_s
    man.write(args.manifest or default_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
