"""Command-line front end: ``crossdev-sca <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import align, attacks, io, pca, pipeline, synth
from .core import TraceError
from .nn import TrainConfig, init, train

log = logging.getLogger("crossdev_sca")


def _write_rows(path, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = synth.desk_config(
        args.devices, args.traces_per_device, args.length, args.seed,
        noise_sigma=args.noise, leak_strength=args.leak_strength,
        background_scale=args.background_scale, n_leak=args.leaks,
    )
    if args.vary_plaintext:
        cfg.vary = "plaintext"
        cfg.fixed_key_byte = args.key
    data = synth.synth_dataset(cfg)
    if args.misalign:
        data = synth.inject_misalignment(data, args.misalign, np.random.default_rng([args.seed, 0x5]))
    io.write_traces(args.out, data, synth.manifest_entries(cfg, {"misalign": args.misalign}))
    print(f"wrote {data.n_traces} x {data.n_samples} traces to {args.out}")
    return 0


def cmd_align(args) -> int:
    data = io.read_traces(args.inp)
    reference = data.samples[args.reference_index]
    if args.mode == "iterative":
        result = align.realign_set(data, reference, args.band)
        out, width = result.aligned, result.modified_reference.size
    else:
        out = align.warp_set_to_reference(data, reference, args.band, args.normalize)
        width = out.n_samples
    if args.resample:
        out = align.resample_set(out, args.resample)
    io.write_traces(args.out, out, {"aligned_from": args.inp, "mode": args.mode,
                                    "reference_index": args.reference_index,
                                    "aligned_width": width, "resample": args.resample or "none"})
    print(f"aligned width {width}, wrote {out.n_traces} x {out.n_samples} to {args.out}")
    return 0


def cmd_pca_fit(args) -> int:
    model = pca.fit(io.read_traces(args.inp), args.components)
    io.write_pca(args.out, model)
    frac = pca.explained_variance(model)
    scope = "total" if model.is_full else "retained"
    print(f"kept {model.p} of {model.n_features} components; "
          f"first component explains {frac[0]:.4f} of {scope} variance")
    return 0


def cmd_pca_project(args) -> int:
    model = io.read_pca(args.model)
    data = io.read_traces(args.inp)
    io.write_traces(args.out, pca.project_set(model, data), {"projected_from": args.inp, "p": model.p})
    return 0


def cmd_train(args) -> int:
    train_set = io.read_traces(args.inp)
    val_set = io.read_traces(args.val) if args.val else None
    model_pca = io.read_pca(args.pca) if args.pca else None
    x = train_set.samples if model_pca is None else pca.project(model_pca, train_set)
    val = None
    if val_set is not None:
        val = (val_set.samples if model_pca is None else pca.project(model_pca, val_set),
               val_set.key_bytes)
    net = init(args.arch, x.shape[1], args.seed)
    cfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, l2_lambda=args.l2, seed=args.seed)
    report = train(net, (x, train_set.key_bytes), val, cfg)
    io.write_model(args.out, net, model_pca)
    line = f"final loss {report.loss[-1]:.4f}, train accuracy {report.train_accuracy[-1]:.4f}"
    if report.val_accuracy:
        line += f", validation accuracy {report.val_accuracy[-1]:.4f}"
    print(line + f" ({report.wall_time:.1f} s)")
    return 0


def cmd_evaluate(args) -> int:
    net, model_pca, reference, meta = io.read_model(args.model)
    pre = pipeline.Preprocessor(reference=reference, pca=model_pca,
                                trim=meta.get("trim", 0),
                                resample_length=meta.get("resample_length"),
                                band=meta.get("band"), normalize=meta.get("normalize", True))
    data = io.read_traces(args.inp)
    x = pre.transform(data.samples)
    pred = net.predict(x)
    rows = []
    for d in data.devices:
        mask = data.device_ids == d
        rows.append([d, int(mask.sum()), repr(float(np.mean(pred[mask] == data.key_bytes[mask])))])
    _write_rows(args.out, ["device", "n_traces", "accuracy"], rows)
    return 0


def cmd_attack_cpa(args) -> int:
    result = attacks.cpa(io.read_traces(args.inp), args.plaintext_byte)
    rows = [[int(g), repr(float(result.scores[g]))] for g in result.ranking]
    _write_rows(args.out, ["guess", "score"], rows)
    return 0


def cmd_attack_template(args) -> int:
    train_set = io.read_traces(args.train)
    test_set = io.read_traces(args.test)
    pois = attacks.dom_poi(train_set, args.pois)
    templates = attacks.fit_templates(train_set, pois)
    pred = attacks.template_attack(templates, test_set)
    acc = float(np.mean(pred == test_set.key_bytes))
    print(f"POIs {pois.indices.tolist()}, accuracy {acc:.4f}", file=sys.stderr)
    conf = attacks.confusion_matrix(test_set.key_bytes, pred)
    _write_rows(args.out, ["true"] + [str(k) for k in range(256)],
                [[k] + conf[k].tolist() for k in range(256)])
    if args.ellipses:
        if templates.k != 2:
            raise ValueError("ellipses need exactly two POIs")
        rows = []
        for c, mu, cov in zip(templates.classes, templates.means, templates.covs):
            for n_sigma in (1, 2, 3):
                for x, y in attacks.mahalanobis_ellipse(mu, cov, n_sigma, args.ellipse_points):
                    rows.append([int(c), n_sigma, repr(float(x)), repr(float(y))])
        _write_rows(args.ellipses, ["class", "sigma", "x", "y"], rows)
    return 0


def cmd_diag_outliers(args) -> int:
    devices, means = attacks.device_mean_traces(io.read_traces(args.inp))
    counts = attacks.outlier_count(means)
    _write_rows(args.out, ["device", "outliers"], [[d, int(c)] for d, c in zip(devices, counts)])
    return 0


def _print_summary(report: pipeline.AttackReport) -> None:
    print(f"{report.method}: avg {report.avg:.4f}  max {report.max:.4f}  min {report.min:.4f}  "
          f"(train {sum(report.train_seconds):.1f} s, predict {sum(report.predict_seconds):.1f} s)")


def cmd_pipeline_run(args) -> int:
    cfg = pipeline.load_config(args.config)
    report = pipeline.run(cfg, model_out=args.model_out)
    if args.out:
        pipeline.report_emit(report, args.out)
    _print_summary(report)
    return 0


def cmd_pipeline_matrix(args) -> int:
    cfg = pipeline.load_config(args.config)
    data = pipeline.load_dataset(cfg)
    if args.groups == "loo":
        report = pipeline.leave_one_out(cfg, data)
    else:
        report = pipeline.cross_matrix(cfg, attacks.form_groups(int(args.groups), len(data.devices)), data)
    if args.out:
        pipeline.report_emit(report, args.out)
    _print_summary(report)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossdev-sca", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-device trace set")
    s.add_argument("--devices", type=int, default=5)
    s.add_argument("--traces-per-device", type=int, default=2560)
    s.add_argument("--length", type=int, default=512)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--leak-strength", type=float, default=0.75)
    s.add_argument("--background-scale", type=float, default=6.0)
    s.add_argument("--leaks", type=int, default=16, help="number of leak positions")
    s.add_argument("--vary-plaintext", action="store_true",
                   help="fix the key and cycle plaintexts (CPA setup)")
    s.add_argument("--key", type=int, default=0, help="key byte with --vary-plaintext")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--misalign", type=int, default=0, help="max random shift in samples")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("align", help="DTW-realign a trace set")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--reference-index", type=int, default=0)
    s.add_argument("--mode", choices=("iterative", "reference"), default="iterative")
    s.add_argument("--band", type=int, default=None)
    s.add_argument("--no-normalize", dest="normalize", action="store_false",
                   help="reference mode: compute paths on raw amplitudes")
    s.add_argument("--resample", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    pc = sub.add_parser("pca", help="fit or apply a PCA model").add_subparsers(dest="pca_cmd", required=True)
    s = pc.add_parser("fit")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--components", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pca_fit)
    s = pc.add_parser("project")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pca_project)

    s = sub.add_parser("train", help="train an MLP or CNN key-byte classifier")
    s.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--val", default=None)
    s.add_argument("--pca", default=None, help="PCA model applied first and stored with the network")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--l2", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="per-device accuracy of a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_evaluate)

    at = sub.add_parser("attack", help="classical attacks").add_subparsers(dest="attack_cmd", required=True)
    s = at.add_parser("cpa")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--plaintext-byte", type=int, default=None,
                   help="override the per-trace plaintext labels")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_attack_cpa)
    s = at.add_parser("template")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--pois", type=int, default=2)
    s.add_argument("--out", default=None, help="confusion matrix CSV")
    s.add_argument("--ellipses", default=None, help="1/2/3-sigma contour CSV (two POIs only)")
    s.add_argument("--ellipse-points", type=int, default=64)
    s.set_defaults(func=cmd_attack_template)

    dg = sub.add_parser("diag", help="device diagnostics").add_subparsers(dest="diag_cmd", required=True)
    s = dg.add_parser("outliers")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_diag_outliers)

    pl = sub.add_parser("pipeline", help="end-to-end experiments").add_subparsers(dest="pipe_cmd", required=True)
    s = pl.add_parser("run")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="report directory")
    s.add_argument("--model-out", default=None)
    s.set_defaults(func=cmd_pipeline_run)
    s = pl.add_parser("matrix")
    s.add_argument("--config", required=True)
    s.add_argument("--groups", default="1", help="group size j, or 'loo' for leave-one-out")
    s.add_argument("--out", default=None, help="report directory")
    s.set_defaults(func=cmd_pipeline_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TraceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
