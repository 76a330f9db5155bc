"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure. Error messages name the stage that failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from canopysr import __version__, io
from canopysr.autoencoder import PatchAutoencoder
from canopysr.baseline import InverseResponseBaseline
from canopysr.config import RunConfig
from canopysr.dataset import build_dataset, read_dataset, resplit_dataset, write_dataset
from canopysr.errors import CanopySRError, ConfigError, DataError, UsageError
from canopysr.metrics import evaluate_dataset
from canopysr.pipeline import LatentFlowSR
from canopysr.scene import normalize_target
from canopysr.training import LossCurve
from canopysr import verify


class _Stage:
    name = "startup"


STAGE = _Stage()


def stage(name: str) -> None:
    STAGE.name = name


def _config(args) -> RunConfig:
    stage("config")
    return RunConfig.load(args.config, args.set or ())


def _write_manifest(out: Path, cfg: RunConfig, command: str, inputs: dict, outputs: list[str],
                    extra: dict | None = None) -> None:
    """Manifest with the digests of inputs and outputs plus the resolved config."""
    text = cfg.to_text()
    io.write_text(out / "config.resolved.ini", text)
    man = {
        "kind": command,
        "version": __version__,
        "config_digest": hashlib.sha256(text.encode()).hexdigest(),
        "inputs": inputs,
        "outputs": {name: io.file_digest(out / name) for name in outputs},
    }
    man.update(extra or {})
    io.write_json(out / f"{command}.manifest.json", man)


def _dataset_digest(root: Path) -> dict:
    return {"dataset_manifest": io.file_digest(root / "manifest.json"),
            "dataset_stats": io.file_digest(root / "stats.json")}


def _write_curve(path: Path, curve: LossCurve) -> None:
    io.write_csv(path, LossCurve.HEADER, [(s, repr(l), f"{t:.3f}") for s, l, t in curve.rows])


# -- subcommands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    stage("generate scenes")
    ds = build_dataset(cfg.data)
    stage("write dataset")
    write_dataset(ds, out)
    _write_manifest(out, cfg, "gen-data", {}, ["manifest.json", "stats.json"],
                    {"tiles": len(ds.tiles), "rejected": len(ds.rejected)})
    print(f"wrote {len(ds.tiles)} tiles ({len(ds.rejected)} rejected) to {out}")
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    root = Path(args.data)
    cell = args.cell if args.cell is not None else cfg.data.checker_cell
    stage("split")
    ds = resplit_dataset(root, cell)
    cfg.data.checker_cell = cell
    _write_manifest(root, cfg, "split", {}, ["manifest.json", "stats.json"],
                    {"cell": cell, "train": len(ds.fold("train")),
                     "validation": len(ds.fold("validation"))})
    print(f"cell={cell}: {len(ds.fold('train'))} train, {len(ds.fold('validation'))} validation")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _config(args)
    root, out = Path(args.data), Path(args.out)
    stage("load dataset")
    ds = read_dataset(root)
    X, y, _ = ds.arrays("train")
    stage("train autoencoders")
    est = LatentFlowSR(source_ae=cfg.autoencoders.source(), target_ae=cfg.autoencoders.target())
    est.fit_autoencoders(X, y, ds.stats)
    stage("check reconstruction")
    train_rmse = est.target_ae_.reconstruction_rmse(normalize_target(y, ds.stats))
    _, yv, _ = ds.arrays("validation")
    val_rmse = est.target_ae_.reconstruction_rmse(normalize_target(yv, ds.stats))
    stage("write checkpoints")
    for name, ae in (("source_ae", est.source_ae_), ("target_ae", est.target_ae_)):
        io.save_checkpoint(out / f"{name}.vsrc", ae.to_checkpoint(stats_digest=ds.stats.digest))
        _write_curve(out / f"{name}_loss.csv", ae.curve_)
    report = {"target_rmse_train": train_rmse, "target_rmse_validation": val_rmse,
              "target_rmse_threshold": cfg.autoencoders.target_rmse_threshold,
              "passed": train_rmse <= cfg.autoencoders.target_rmse_threshold}
    io.write_json(out / "reconstruction.json", report)
    _write_manifest(out, cfg, "train-ae", _dataset_digest(root),
                    ["source_ae.vsrc", "target_ae.vsrc", "source_ae_loss.csv",
                     "target_ae_loss.csv", "reconstruction.json"])
    print(json.dumps(report))
    return 0


def _load_autoencoders(ae_dir: Path):
    stage("load autoencoders")
    src = io.load_checkpoint(ae_dir / "source_ae.vsrc")
    tgt = io.load_checkpoint(ae_dir / "target_ae.vsrc")
    for name, ck in (("source", src), ("target", tgt)):
        if not ck.frozen:
            raise UsageError(f"{name} autoencoder checkpoint is not frozen")
    return src, tgt


def cmd_train_flow(args) -> int:
    cfg = _config(args)
    root, ae_dir, out = Path(args.data), Path(args.ae), Path(args.out)
    stage("load dataset")
    ds = read_dataset(root)
    X, y, _ = ds.arrays("train")
    src, tgt = _load_autoencoders(ae_dir)
    est = LatentFlowSR(uvit=cfg.uvit, flow=cfg.flow, integrator=cfg.integrator)
    est.stats_ = ds.stats
    est.source_ae_ = PatchAutoencoder.from_checkpoint(src)
    est.target_ae_ = PatchAutoencoder.from_checkpoint(tgt)
    before = (src.digest, tgt.digest)
    stage("train flow")
    est.fit_flow(X, y)
    after = (est.source_ae_.digest(), est.target_ae_.digest())
    stage("write checkpoint")
    io.save_checkpoint(out / "flow.vsrc", est.flow_checkpoint())
    _write_curve(out / "flow_loss.csv", est.curve_)
    inputs = _dataset_digest(root)
    inputs.update({"source_ae": io.file_digest(ae_dir / "source_ae.vsrc"),
                   "target_ae": io.file_digest(ae_dir / "target_ae.vsrc")})
    _write_manifest(out, cfg, "train-flow", inputs, ["flow.vsrc", "flow_loss.csv"],
                    {"ae_digests_before": before, "ae_digests_after": after})
    print(f"flow trained for {len(est.curve_.rows)} steps, final loss {est.curve_.rows[-1][1]:.5f}")
    return 0


def _select(ids: list[str], limit: int | None, seed: int) -> np.ndarray:
    idx = np.arange(len(ids))
    if limit is not None and limit < len(ids):
        idx = np.sort(np.random.default_rng(seed).choice(len(ids), size=limit, replace=False))
    return idx


def cmd_infer(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    src, tgt = _load_autoencoders(Path(args.ae))
    stage("load flow")
    flow = io.load_checkpoint(Path(args.flow) / "flow.vsrc")
    est = LatentFlowSR.from_checkpoints(src, tgt, flow, cfg.integrator)
    est.batch_size = args.batch_size
    stage("load inputs")
    inputs = {"flow": io.file_digest(Path(args.flow) / "flow.vsrc")}
    if args.input:
        images = np.stack([io.load_tile(p) for p in args.input])
        ids = [Path(p).name.split(".")[0] for p in args.input]
        inputs.update({f"input:{i}": io.file_digest(p) for i, p in zip(ids, args.input)})
    else:
        if not args.data:
            raise ConfigError("infer needs --data or --input")
        ds = read_dataset(args.data)
        images, _, ids = ds.arrays(args.fold)
        sel = _select(ids, args.limit, args.subset_seed)
        images, ids = images[sel], [ids[i] for i in sel]
        inputs.update(_dataset_digest(Path(args.data)))
    stage("integrate")
    preds, records = est.predict_with_records(images)
    stage("write predictions")
    names, lines = [], []
    for k, (tid, p) in enumerate(zip(ids, preds)):
        name = f"tiles/{tid}.pred.vsrt"
        io.save_tile(out / name, p)
        names.append(name)
    for b, rec in enumerate(records):
        batch_ids = ids[b * est.batch_size:(b + 1) * est.batch_size]
        lines.append(json.dumps({"tiles": batch_ids, "t": rec.t, "error_norms": rec.error_norms,
                                 "n_evals": rec.n_evals, "rejected": rec.rejected,
                                 "conditioning_drift": rec.conditioning_drift}))
    io.write_text(out / "trajectory.jsonl", "\n".join(lines) + "\n")
    _write_manifest(out, cfg, "infer", inputs, names + ["trajectory.jsonl"],
                    {"tiles": ids, "fold": None if args.input else args.fold,
                     "integrator": asdict(cfg.integrator)})
    print(f"wrote {len(ids)} predictions to {out}")
    return 0


def _load_fields(root: Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None]:
    """Height fields by tile id, plus coarse composites when ``root`` is a dataset."""
    if (root / "manifest.json").exists():
        ds = read_dataset(root)
        return ({t.tile_id: t.chm[0] for t in ds.tiles}, {t.tile_id: t.coarse for t in ds.tiles})
    man_path = root / "infer.manifest.json"
    if not man_path.exists():
        raise DataError(f"{root} is neither a dataset nor an inference output")
    man = io.read_json(man_path)
    fields = {}
    for tid in man["tiles"]:
        rel = f"tiles/{tid}.pred.vsrt"
        if io.file_digest(root / rel) != man["outputs"][rel]:
            raise DataError(f"prediction {tid}: digest mismatch")
        fields[tid] = io.load_tile(root / rel)[0]
    return fields, None


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    pred_root, ref_root, out = Path(args.pred), Path(args.ref), Path(args.out)
    stage("load fields")
    preds, _ = _load_fields(pred_root)
    refs_all, coarse = _load_fields(ref_root)
    if args.fold:
        folds = {t.tile_id: t.fold for t in read_dataset(ref_root, verify=False).tiles}
        preds = {k: v for k, v in preds.items() if folds.get(k) == args.fold}
    refs = {k: refs_all[k] for k in preds if k in refs_all}
    stage("evaluate")
    report = evaluate_dataset(preds, refs, cfg.metrics)
    stage("write report")
    io.write_text(out / "report.csv", report.to_csv())
    io.write_text(out / "report.json", report.to_json())
    outputs = ["report.csv", "report.json"]
    if args.baseline:
        if coarse is None:
            raise DataError("--baseline needs a dataset as --ref")
        base = InverseResponseBaseline(sr_factor=cfg.data.sr_factor, clip_max=cfg.data.clip_max)
        bpred = {k: base.predict_one(coarse[k])[0] for k in preds}
        brep = evaluate_dataset(bpred, refs, cfg.metrics)
        io.write_text(out / "baseline_report.csv", brep.to_csv())
        io.write_text(out / "baseline_report.json", brep.to_json())
        outputs += ["baseline_report.csv", "baseline_report.json"]
    if args.pgm:
        for k in list(preds)[: args.pgm]:
            io.save_pgm16(out / "renders" / f"{k}.pred.pgm", preds[k], cfg.data.clip_max)
            io.save_pgm16(out / "renders" / f"{k}.ref.pgm", refs[k], cfg.data.clip_max)
            outputs += [f"renders/{k}.pred.pgm", f"renders/{k}.ref.pgm"]
    inputs = {"pred_root": str(pred_root), "ref_root": str(ref_root)}
    _write_manifest(out, cfg, "evaluate", inputs, outputs)
    s = report.summary()
    print(json.dumps({k: s[k] for k in ("n", "mae", "me", "block_r2", "ee")}))
    return 0


def cmd_grad_check(args) -> int:
    _config(args)
    stage("gradient check")
    report = verify.gradcheck_report(args.seed)
    for row in report["checks"]:
        print(f"{'PASS' if row['passed'] else 'FAIL'} {row['name']}: "
              f"max rel err {row['max_rel_error']:.2e} over {row['n_checked']} points")
    print(f"max relative error {report['max_rel_error']:.3e}")
    if args.out:
        io.write_json(Path(args.out) / "grad_check.json", report)
    return 0 if report["passed"] else 4


def cmd_solver_check(args) -> int:
    _config(args)
    stage("solver check")
    report = verify.solver_report()
    for row in report["checks"]:
        print(f"{'PASS' if row['passed'] else 'FAIL'} {row['name']}: {row['value']}")
    if args.out:
        io.write_json(Path(args.out) / "solver_check.json", report)
    return 0 if report["passed"] else 4


# -- argument parsing -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canopysr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic paired dataset")
    sp.add_argument("--out", required=True)

    sp = add("split", cmd_split, "reassign checkerboard folds")
    sp.add_argument("--data", required=True)
    sp.add_argument("--cell", type=int)

    sp = add("train-ae", cmd_train_ae, "pretrain and freeze both autoencoders")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-flow", cmd_train_flow, "train the velocity network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ae", required=True, help="directory with frozen autoencoder checkpoints")
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "predict fine height fields")
    sp.add_argument("--ae", required=True)
    sp.add_argument("--flow", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data")
    sp.add_argument("--input", nargs="+", help="coarse tile files instead of a dataset")
    sp.add_argument("--fold", default="validation", choices=("train", "validation"))
    sp.add_argument("--limit", type=int)
    sp.add_argument("--subset-seed", type=int, default=0)
    sp.add_argument("--batch-size", type=int, default=64)

    sp = add("evaluate", cmd_evaluate, "score predictions against references")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fold", choices=("train", "validation"))
    sp.add_argument("--baseline", action="store_true", help="also score the inverse-response upsampler")
    sp.add_argument("--pgm", type=int, default=0, metavar="N", help="write PGM renders of N tiles")

    sp = add("grad-check", cmd_grad_check, "finite-difference check of every op and a small U-ViT")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("solver-check", cmd_solver_check, "verify the dopri5 integrator")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    STAGE.name = "startup"
    try:
        return args.func(args)
    except CanopySRError as exc:
        print(f"canopysr {args.command}: {STAGE.name}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"canopysr {args.command}: {STAGE.name}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
