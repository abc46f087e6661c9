"""``demorph`` command line: gen-data, train, demorph, eval, plot.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure during training, 4 unreadable or incompatible checkpoint.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import evalkit
from ._validation import ConfigurationError, DimensionError
from .checkpoint import CheckpointError
from .config import resolve
from .demorpher import BranchedDemorpher, DemorphOutput, TrainingDiverged, demorph_iterative
from .morphops import default_comparator, genuine_scores, make_dataset
from .storage import MANIFEST_NAME, load_dataset, read_pgm, save_dataset, write_pgm
from .tensorcore import NonFiniteError

logger = logging.getLogger("demorph")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4
CONFIG_NAME = "run_config.txt"


class CliError(Exception):
    def __init__(self, msg, code=EXIT_VALIDATION):
        super().__init__(msg)
        self.code = code


def _write_config(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, CONFIG_NAME), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_manifest(cfg):
    if not os.path.exists(os.path.join(cfg.data_dir, MANIFEST_NAME)):
        raise CliError(f"no dataset manifest in {cfg.data_dir!r}; run gen-data first")
    return load_dataset(cfg.data_dir)


def _load_model(cfg):
    if not os.path.exists(cfg.checkpoint):
        raise CliError(f"checkpoint {cfg.checkpoint!r} not found", EXIT_CHECKPOINT)
    est = BranchedDemorpher.load(cfg.checkpoint)
    est.set_params(inference=cfg.mode)
    return est


def _estimator(cfg):
    tc = cfg.train_config()
    return BranchedDemorpher(T=tc.T, epochs=tc.epochs, lr=tc.lr, batch_size=tc.batch_size, base_width=tc.base_width,
                             time_embed_dim=tc.time_embed_dim, activation=tc.activation, beta_start=tc.beta_start,
                             beta_end=tc.beta_end, t_min=tc.t_min, clean_fraction=tc.clean_fraction,
                             inference=cfg.mode, seed=tc.seed)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(cfg, force=False):
    if os.path.isdir(cfg.data_dir) and os.listdir(cfg.data_dir) and not force:
        raise CliError(f"{cfg.data_dir!r} is not empty; pass --force to overwrite")
    manifest = make_dataset(cfg.n_ids, cfg.n_morphs, cfg.img_size, cfg.seed, cfg.warp_strength, cfg.blend,
                            cfg.train_fraction)
    save_dataset(manifest, cfg.data_dir)
    _write_config(cfg, cfg.data_dir)
    counts = manifest.counts
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return manifest


def _same_training_setup(est, fresh):
    keep = ("epochs", "inference", "verbose")
    a = {k: v for k, v in est.get_params().items() if k not in keep}
    b = {k: v for k, v in fresh.get_params().items() if k not in keep}
    return a == b


def cmd_train(cfg, force=False):
    manifest = _load_manifest(cfg)
    X, Y = manifest.arrays("train", morphs_only=True)
    fresh = _estimator(cfg)
    est = None
    if os.path.exists(cfg.checkpoint) and not force:
        est = BranchedDemorpher.load(cfg.checkpoint)
        if not _same_training_setup(est, fresh) or est.config_.img_size != manifest.size:
            raise CliError(f"checkpoint {cfg.checkpoint!r} was trained with a different setup; use --force",
                           EXIT_CHECKPOINT)
        est.set_params(epochs=cfg.epochs)
        print(f"resuming from epoch {est.epochs_done_}")
    else:
        est = fresh.initialize(manifest.size)
    os.makedirs(cfg.report_dir, exist_ok=True)
    _write_config(cfg, cfg.report_dir)
    loss_path = os.path.join(cfg.report_dir, "train_loss.csv")
    extra = {"data_digest": manifest.digest()}
    t0 = time.time()

    def on_epoch(model, stats):
        done = model.epochs_done_
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            model.save(cfg.checkpoint, extra)
        print(f"epoch {done:4d}  loss {stats.mean_loss:.5f}  flip {stats.flip_rate:.3f}  {time.time() - t0:6.1f}s",
              flush=True)

    try:
        est.resume(X, Y, callback=on_epoch)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged ({exc}); last checkpoint kept at {cfg.checkpoint}", EXIT_NUMERIC) from exc
    if est.epochs_done_ == 0 or not os.path.exists(cfg.checkpoint):
        est.save(cfg.checkpoint, extra)
    with open(loss_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "flip_rate"])
        for s in est.history_:
            w.writerow([s.epoch + 1, repr(s.mean_loss), repr(s.flip_rate)])
    return est


def _summary_path(cfg):
    return os.path.join(cfg.report_dir, "summary.json")


def cmd_demorph(cfg, input_path, out_dir=None, seed=0):
    est = _load_model(cfg)
    try:
        x = read_pgm(input_path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read input image: {exc}") from exc
    if x.shape != (est.config_.img_size, est.config_.img_size):
        raise CliError(f"input is {x.shape}, model expects {est.config_.img_size}x{est.config_.img_size}")
    out = est.demorph(x, seed=seed)
    out_dir = out_dir or os.path.splitext(input_path)[0] + "_demorph"
    os.makedirs(out_dir, exist_ok=True)
    write_pgm(os.path.join(out_dir, "O1.pgm"), out.o1)
    write_pgm(os.path.join(out_dir, "O2.pgm"), out.o2)
    comp = default_comparator(x.shape[0])
    d = evalkit.disagreement(out.o1, out.o2, comp)
    meta = {"input": os.path.abspath(input_path), "mode": cfg.mode, "disagreement": d, "tau_mad": None,
            "is_attack": None}
    if os.path.exists(_summary_path(cfg)):
        with open(_summary_path(cfg), encoding="utf-8") as fh:
            tau_mad = json.load(fh)["mad"]["threshold"]
        meta.update(tau_mad=tau_mad, is_attack=bool(d > tau_mad))
    _write_json(os.path.join(out_dir, "demorph.json"), meta)
    print(json.dumps(meta, sort_keys=True))
    return meta


def _run_outputs(est, samples, mode, seed):
    X = np.stack([s.x for s in samples])
    if mode == "direct":
        pairs = est.transform(X)
        return [DemorphOutput(p[0], p[1]) for p in pairs]
    return [demorph_iterative(est.model_, s.x, est.schedule_, seed + k) for k, s in enumerate(samples)]


def cmd_eval(cfg):
    manifest = _load_manifest(cfg)
    est = _load_model(cfg)
    test = manifest.test
    if not test:
        raise CliError("test split is empty")
    morphs = [s for s in test if s.is_morph]
    bona = [s for s in test if not s.is_morph]
    if not morphs or not bona:
        raise CliError("test split needs both morph and bona fide samples")
    comp = default_comparator(manifest.size)
    outs = _run_outputs(est, test, cfg.mode, cfg.seed)
    by_id = list(zip(outs, test))

    rest = evalkit.restoration_accuracy([(o, s) for o, s in by_id if s.is_morph], comp.tau, comp)
    hists = evalkit.similarity_histograms(by_id, comparator=comp, bins=cfg.hist_bins)

    dis = [(evalkit.disagreement(o.o1, o.o2, comp), s.is_morph) for o, s in by_id]
    # threshold from alternate samples of each class, rates on the rest
    role = [None] * len(dis)
    for label in (True, False):
        idx = [k for k, d in enumerate(dis) if d[1] == label]
        for j, k in enumerate(idx):
            role[k] = "calibration" if j % 2 == 0 else "evaluation"
    calib = [d for d, r in zip(dis, role) if r == "calibration"]
    held = [d for d, r in zip(dis, role) if r == "evaluation"]
    tau_mad = evalkit.eer_threshold(calib)
    mad = evalkit.mad_metrics([(d > tau_mad, lab) for d, lab in held], threshold=tau_mad)
    curve = evalkit.roc_det_points(dis)

    gen = genuine_scores(comp, manifest.size)
    gen_median = float(np.median(gen))
    bf_scores = np.array(hists.scores["bonafide"]["o1_o2"])
    m = hists.median
    replication = {
        "genuine_median": gen_median,
        "bonafide_o1o2_above_genuine_median": float(np.mean(bf_scores > gen_median)),
        "bonafide_o1o2_above_tau": float(np.mean(bf_scores > comp.tau)),
        "morph_o1o2_median": m("morph", "o1_o2"),
        "morph_o1i1_median": m("morph", "o1_i1"),
        "morph_o2i2_median": m("morph", "o2_i2"),
    }
    os.makedirs(cfg.report_dir, exist_ok=True)
    files = evalkit.export_report(rest, {"mad": curve}, cfg.report_dir, hists)
    with open(os.path.join(cfg.report_dir, "mad_scores.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "is_morph", "disagreement", "role"])
        for k, ((d, lab), r) in enumerate(zip(dis, role)):
            w.writerow([k, int(lab), repr(d), r])
    files.append("mad_scores.csv")
    _write_config(cfg, cfg.report_dir)
    summary = {
        "mode": cfg.mode,
        "tau": comp.tau,
        "restoration": {"subject1": rest.acc_subject1, "subject2": rest.acc_subject2, "n": rest.n_samples},
        "mad": {"apcer": mad.apcer, "bpcer": mad.bpcer, "acer": mad.acer, "threshold": mad.threshold,
                "n_attack": mad.n_attack, "n_bonafide": mad.n_bonafide, "auc": curve.auc},
        "replication": replication,
        "files": sorted(files + [CONFIG_NAME, "summary.json"]),
    }
    _write_json(_summary_path(cfg), summary)
    print(f"{'':24s}{'Subject 1':>12s}{'Subject 2':>12s}")
    print(f"{'Restoration accuracy':24s}{100 * rest.acc_subject1:11.2f}%{100 * rest.acc_subject2:11.2f}%")
    print(f"{'':24s}{'APCER':>10s}{'BPCER':>10s}{'ACER':>10s}{'AUC':>10s}")
    print(f"{'MAD (disagreement)':24s}{100 * mad.apcer:9.2f}%{100 * mad.bpcer:9.2f}%{100 * mad.acer:9.2f}%"
          f"{curve.auc:10.3f}")
    return summary


def cmd_plot(cfg):
    """Re-render SVG plots from the curve CSVs in ``report_dir``."""
    if not os.path.isdir(cfg.report_dir):
        raise CliError(f"report directory {cfg.report_dir!r} not found")
    auc = {}
    if os.path.exists(_summary_path(cfg)):
        with open(_summary_path(cfg), encoding="utf-8") as fh:
            auc["mad"] = json.load(fh)["mad"]["auc"]
    written = []
    for fname in sorted(os.listdir(cfg.report_dir)):
        if not fname.endswith("_curve.csv"):
            continue
        name = fname[: -len("_curve.csv")]
        with open(os.path.join(cfg.report_dir, fname), encoding="utf-8") as fh:
            curve = evalkit.parse_curve_csv(fh.read(), auc.get(name, float("nan")))
        for out_name, text in evalkit.curve_svgs(name, curve).items():
            with open(os.path.join(cfg.report_dir, out_name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(out_name)
    if not written:
        raise CliError(f"no *_curve.csv files in {cfg.report_dir!r}; run eval first")
    print("\n".join(written))
    return written


# -- entry point ----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--profile", choices=["smoke", "standard"])
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--mode", choices=["direct", "iterative"], help="inference mode")
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--checkpoint")
    common.add_argument("--report-dir", dest="report_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="demorph", description="Reference-free face de-morphing on synthetic data.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render identities and morphs")
    sub.add_parser("train", parents=[common], help="train (or resume) the branched UNet")
    p = sub.add_parser("demorph", parents=[common], help="split one PGM image into two outputs")
    p.add_argument("input", help="input PGM image")
    p.add_argument("--out", help="output directory")
    sub.add_parser("eval", parents=[common], help="restoration, histograms and MAD reports")
    sub.add_parser("plot", parents=[common], help="redraw SVG plots from report CSVs")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        cfg = resolve(args.profile, args.config, {"seed": args.seed, "mode": args.mode, "data_dir": args.data_dir,
                                                  "checkpoint": args.checkpoint, "report_dir": args.report_dir})
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force)
        elif args.command == "demorph":
            cmd_demorph(cfg, args.input, args.out, cfg.seed)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "plot":
            cmd_plot(cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
