"""Command-line entry point: ``mitodet <subcommand> [options]``.

Exit codes
    0  success
    1  unexpected internal error
    2  usage error (bad arguments)
    3  configuration error
    4  missing input file
    5  unreadable model file
    6  invalid input data
    7  pipeline error (degenerate tile, no tissue, ...)

On failure one line is written to stderr:
``error: code=<code> exit=<n> message=<text>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import candidates as cd
from . import config as cfgmod
from . import metrics, mining, registration, stain, synth, wsi
from .errors import ConfigError, MitodetError, ModelFileError

log = logging.getLogger("mitodet")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_MODEL, EXIT_DATA, EXIT_PIPELINE = range(8)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def load_image(path) -> np.ndarray:
    """A slide directory (manifest + tiles) or a single raster image, as uint8 RGB."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such slide: {p}")
    if p.is_dir():
        return wsi.read_slide(p)[0]
    return np.asarray(Image.open(p).convert("RGB"))


def load_any_model(path, workers: int = 1):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such model: {p}")
    if p.suffix == ".txt":
        return mining.load_ensemble(p, workers)
    from .modelio import load_model

    return load_model(p)


def _log_path(args):
    if args.log:
        return Path(args.log)
    out = getattr(args, "out", None)
    if not out:
        return None
    out = Path(out)
    return out / "run.log" if out.is_dir() or not out.suffix else out.with_name(out.name + ".log")


def _setup_logging(args):
    root = logging.getLogger("mitodet")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(fmt)
    err.setLevel(logging.INFO if args.verbose else logging.WARNING)
    root.addHandler(err)
    path = _log_path(args)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(path, mode="w")
        fh.setFormatter(fmt)
        root.addHandler(fh)
    root.propagate = False


def resolve_config(args) -> cfgmod.RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    cfg = cfgmod.load(args.config, overrides)
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def _mask(img, cfg):
    return wsi.tissue_mask(img, cfg.infer.tissue_scale, cfg.infer.od_threshold)


def _pairs(slides, refs, what):
    slides, refs = slides or [], refs or []
    if len(slides) != len(refs):
        raise UsageError(f"{what}: every --{what}slide needs a matching --{what}reference")
    return list(zip(slides, refs))


def _patch_data(cfg, pairs):
    from .experiment import slide_patches

    pos, neg = [], []
    for slide, ref in pairs:
        p, n, _ = slide_patches(load_image(slide), cd.read_points(ref), cfg.detector, cfg.ensemble.label_radius)
        pos.append(p)
        neg.append(n)
    if not pos:
        raise UsageError("no training slides given")
    return np.concatenate(pos), np.concatenate(neg)


def _datasets(cfg, args):
    from .experiment import _dataset

    pos, neg = _patch_data(cfg, _pairs(args.slide, args.reference, ""))
    vpos, vneg = _patch_data(cfg, _pairs(args.val_slide, args.val_reference, "val-"))
    return pos, neg, _dataset(vpos, vneg)


def _write_gray(path, a, lo, hi):
    v = np.clip((np.asarray(a, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray(np.rint(v * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = replace(cfg.synth, seed=cfg.seed)
    if args.pair:
        pair = synth.generate_pair(sc)
        he = pair.he
        wsi.write_slide(out / "phh3", pair.phh3, args.tile_size)
        cd.write_points(out / "phh3_truth.csv", pair.mitoses_phh3)
        (out / "shift.txt").write_text(f"dx = {pair.shift[0]}\ndy = {pair.shift[1]}\n")
    else:
        he = synth.generate_slide(sc)
    wsi.write_slide(out / "he", he.image, args.tile_size)
    cd.write_points(out / "truth.csv", he.mitoses)
    print(f"mitoses={len(he.mitoses)}")


def cmd_hed(args, cfg):
    img = load_image(args.slide)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = stain.to_reflectance(img)
    if args.augment:
        p = stain.stain_augment(p, cfg.stain, np.random.default_rng(cfg.seed))
        Image.fromarray(stain.to_uint8(p)).save(out / "augmented.png")
    s = stain.rgb_to_hed(p)
    np.save(out / "hed.npy", s.astype(np.float32))
    for k, name in enumerate(("hematoxylin", "eosin", "dab")):
        _write_gray(out / f"{name}.png", s[..., k], 0.0, max(float(s[..., k].max()), 1e-6))
    print(f"hed_max={s[..., 0].max():.4f},{s[..., 1].max():.4f},{s[..., 2].max():.4f}")


def cmd_augment_preview(args, cfg):
    from .augment import augment_patch

    img = load_image(args.slide)
    patch = cd.extract_patches(img, [(args.x, args.y)], cfg.augment.input_size)[0]
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for fam in list("RSECHBGT") + ["RSECHBGT"]:
        if not set(fam) <= set(cfg.augment.enabled_families):
            continue
        c = cfg.augment.with_families(fam)
        rows.append(np.concatenate([stain.to_uint8(augment_patch(patch, c, rng)) for _ in range(args.n)], axis=1))
    Image.fromarray(np.concatenate(rows, axis=0)).save(args.out)
    print(f"rows={len(rows)} cols={args.n}")


def cmd_candidates(args, cfg):
    img = load_image(args.slide)
    cands = cd.detect_candidates(img, cfg.detector)
    if args.reference:
        cands = cd.label_candidates(cands, cd.read_points(args.reference), cfg.ensemble.label_radius)
    cd.write_candidates(args.out, cands)
    npos = sum(c.label == cd.Label.POSITIVE for c in cands)
    print(f"candidates={len(cands)} positive={npos}")


def cmd_register(args, cfg):
    a, b = load_image(args.he), load_image(args.phh3)
    g = registration.global_register(a, b, cfg.registration, np.random.default_rng(cfg.seed), workers=cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    residuals = None
    if args.points:
        pts = cd.read_points(args.points)
        local = [registration.local_register((x - g.shift.dx, y - g.shift.dy), a, b, g.shift, cfg.registration)
                 for x, y in pts]
        moved = np.array([(r.x, r.y) for r in local]).reshape(-1, 2)
        cd.write_points(out / "registered.csv", moved)
        residuals = [float(np.hypot(r.local.dx + r.subpixel[0], r.local.dy + r.subpixel[1])) for r in local]
    (out / "report.txt").write_text(registration.registration_report(g, residuals))
    print(f"shift={g.shift.dx},{g.shift.dy}")


def cmd_build_reference(args, cfg):
    from .experiment import build_reference

    clf = load_any_model(args.classifier) if args.classifier else None
    a, b = load_image(args.he), load_image(args.phh3)
    ref, g, local = build_reference(a, b, clf, cfg.registration, cfg.seed, cfg.workers, cfg.phh3.threshold)
    cd.write_points(args.out, ref)
    residuals = [float(np.hypot(r.local.dx + r.subpixel[0], r.local.dy + r.subpixel[1])) for r in local]
    Path(args.out).with_suffix(".report.txt").write_text(registration.registration_report(g, residuals))
    print(f"reference={len(ref)} shift={g.shift.dx},{g.shift.dy}")


def cmd_train(args, cfg):
    from .experiment import _dataset
    from .modelio import save_model
    from .nn import build_network, predict_proba, train

    pos, neg, val = _datasets(cfg, args)
    rng = np.random.default_rng(cfg.seed)
    if args.mine_with:
        scores = predict_proba(load_any_model(args.mine_with, cfg.workers), neg)
        idx = mining.hard_negative_sample(scores, cfg.mining.n_hard_negatives, rng)
    else:
        idx = mining.uniform_negative_sample(len(neg), cfg.mining.n_easy_negatives, rng)
    gamma = args.gamma if args.gamma is not None else cfg.ensemble.gamma
    tc = replace(cfg.train, seed=cfg.seed)
    m = train(_dataset(pos, neg[idx]), val, build_network(gamma), tc, cfg.augment)
    save_model(m, args.out)
    print(f"val_f1={m.val_f1:.4f} epoch={m.epoch}")


def cmd_ensemble_train(args, cfg):
    from .experiment import _dataset
    from .modelio import save_model
    from .nn import build_network, predict_proba, train

    pos, neg, val = _datasets(cfg, args)
    scores = predict_proba(load_any_model(args.mine_with, cfg.workers), neg)
    k = cfg.ensemble.k
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = mining.build_bootstrap_datasets(len(pos), scores, k, cfg.mining.n_hard_negatives, cfg.seed)
    names = []
    for i, ((_, idx), ms) in enumerate(zip(sets, mining.member_seeds(cfg.seed, k))):
        m = train(_dataset(pos, neg[idx]), val, build_network(cfg.ensemble.gamma), replace(cfg.train, seed=ms),
                  cfg.augment)
        save_model(m, out / f"member{i}.mdl")
        names.append(f"member{i}.mdl")
        log.info("member %d val_f1 %.4f", i, m.val_f1)
    mining.write_manifest(out / "ensemble.txt", names, cfg.seed)
    print(f"members={k} manifest={out / 'ensemble.txt'}")


def cmd_distill(args, cfg):
    from .experiment import _dataset
    from .modelio import save_model

    pos, neg, val = _datasets(cfg, args)
    e = load_any_model(args.ensemble, cfg.workers)
    if not isinstance(e, mining.EnsembleModel):
        e = mining.EnsembleModel([e], cfg.seed, cfg.workers)
    m = mining.distill(e, _dataset(pos, neg), val, cfg.ensemble.student_gamma, replace(cfg.train, seed=cfg.seed),
                       cfg.augment)
    save_model(m, args.out)
    print(f"val_f1={m.val_f1:.4f} epoch={m.epoch}")


def cmd_infer(args, cfg):
    img = load_image(args.slide)
    model = load_any_model(args.model, cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    pm = wsi.dense_probability_map(img, model, _mask(img, cfg), cfg.infer.tile_cells, cfg.workers)
    dt = time.perf_counter() - t0
    dets = wsi.postprocess(pm, cfg.infer.d, cfg.infer.floor)
    wsi.write_pmap(out / "pmap.bin", pm)
    wsi.write_pmap_preview(out / "pmap.png", pm)
    wsi.write_detections(out / "detections.csv", dets)
    mpx = img.shape[0] * img.shape[1] / 1e6
    log.info("dense inference %.2f Mpixel in %.2fs (%.3f Mpixel/s)", mpx, dt, mpx / max(dt, 1e-9))
    print(f"detections={len(dets)} mpixel_per_s={mpx / max(dt, 1e-9):.3f}")


def cmd_hotspot(args, cfg):
    img = load_image(args.slide)
    dets = wsi.read_detections(args.detections)
    delta = args.delta if args.delta is not None else cfg.grade.delta
    g = cfg.grade
    s = wsi.summarize(dets, _mask(img, cfg), delta, g.theta1, g.theta2, area_mm2=g.area_mm2, mpp=g.mpp,
                      stride=g.stride, min_tissue=g.min_tissue)
    text = s.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_grade(args, cfg):
    if args.count < 0:
        raise ValueError("count must be >= 0")
    g = wsi.grade(args.count, cfg.grade.theta1, cfg.grade.theta2)
    print(f"grade={g}")
    print(f"score={wsi.proliferation_score(args.count)}")


def _read_column(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return [float(t) for t in p.read_text().split()]


def _slides(args):
    dets, truth = args.detections or [], args.truth or []
    if len(dets) != len(truth) or not dets:
        raise UsageError("give one --truth per --detections (at least one pair)")
    return [(wsi.read_detections(d), cd.read_points(t)) for d, t in zip(dets, truth)]


def cmd_eval(args, cfg):
    lines = []
    if args.detections or args.truth:
        slides = _slides(args)
        delta = args.delta if args.delta is not None else cfg.grade.delta
        tp = n_pred = n_truth = 0
        for det, truth in slides:
            r = metrics.match_f1(wsi.apply_threshold(det, delta)[:, :2], truth, cfg.match)
            tp, n_pred, n_truth = tp + r.tp, n_pred + r.n_pred, n_truth + r.n_truth
        p, r_, f = metrics._prf(tp, n_pred, n_truth)
        lines += [f"delta = {delta}", f"precision = {p:.6f}", f"recall = {r_:.6f}", f"f1 = {f:.6f}"]
        sw = metrics.sweep_threshold(slides, cfg.match)
        lines += [f"best_delta = {sw.best_delta:.3f}", f"best_f1 = {sw.best_score:.6f}"]
        if args.curve:
            metrics.write_curve(args.curve, sw.curve)
    if args.grades_pred or args.grades_true:
        if not (args.grades_pred and args.grades_true):
            raise UsageError("--grades-pred and --grades-true go together")
        a = [int(v) for v in _read_column(args.grades_pred)]
        b = [int(v) for v in _read_column(args.grades_true)]
        lines.append(f"kappa = {metrics.kappa_quadratic(a, b):.6f}")
    if args.scores_pred or args.scores_true:
        if not (args.scores_pred and args.scores_true):
            raise UsageError("--scores-pred and --scores-true go together")
        lines.append(f"spearman = {metrics.spearman(_read_column(args.scores_pred), _read_column(args.scores_true)):.6f}")
    if not lines:
        raise UsageError("nothing to evaluate")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_sweep(args, cfg):
    sw = metrics.sweep_threshold(_slides(args), cfg.match)
    metrics.write_curve(args.out, sw.curve)
    print(f"best_delta={sw.best_delta:.3f} best_f1={sw.best_score:.6f} "
          f"span={metrics.curve_span(sw.curve):.6f}")


# ---------------------------------------------------------------- parser


def _data_args(p):
    p.add_argument("--slide", action="append", help="training slide (repeat; pairs with --reference)")
    p.add_argument("--reference", action="append", help="reference points CSV x,y for the matching --slide")
    p.add_argument("--val-slide", action="append", help="validation slide (repeat)")
    p.add_argument("--val-reference", action="append", help="reference CSV for the matching --val-slide")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key = value config file (default: ${cfgmod.ENV_VAR})")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--workers", type=int, help="parallel workers (results do not depend on it)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--log", help="run log path (default: next to the output)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    ap = argparse.ArgumentParser(prog="mitodet", description="Whole-slide mitosis detection pipeline.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic slide (and optionally its PHH3 pair)")
    p.add_argument("--out", required=True)
    p.add_argument("--pair", action="store_true", help="also write the restained PHH3 slide")
    p.add_argument("--tile-size", type=int, default=512)

    p = add("hed", cmd_hed, "color deconvolution into hematoxylin/eosin/DAB channels")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--augment", action="store_true", help="apply stain augmentation first")

    p = add("augment-preview", cmd_augment_preview, "grid of augmented versions of one patch")
    p.add_argument("--slide", required=True)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p.add_argument("--n", type=int, default=6, help="samples per row")
    p.add_argument("--out", required=True)

    p = add("candidates", cmd_candidates, "detect (and optionally label) mitosis candidates")
    p.add_argument("--slide", required=True)
    p.add_argument("--reference", help="reference points CSV for labeling")
    p.add_argument("--out", required=True)

    p = add("register", cmd_register, "global (and local) registration of a PHH3 slide to its H&E slide")
    p.add_argument("--he", required=True)
    p.add_argument("--phh3", required=True)
    p.add_argument("--points", help="PHH3-frame points CSV to map into the H&E frame")
    p.add_argument("--out", required=True)

    p = add("build-reference", cmd_build_reference, "PHH3 candidates -> classifier -> registered H&E reference")
    p.add_argument("--he", required=True)
    p.add_argument("--phh3", required=True)
    p.add_argument("--classifier", help="PHH3 candidate classifier model (omit to keep all candidates)")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train one detector network")
    _data_args(p)
    p.add_argument("--mine-with", help="model whose scores drive hard-negative sampling")
    p.add_argument("--gamma", type=float)
    p.add_argument("--out", required=True)

    p = add("ensemble-train", cmd_ensemble_train, "train a bootstrap ensemble on hard-mined negatives")
    _data_args(p)
    p.add_argument("--mine-with", required=True, help="model whose scores drive hard-negative sampling")
    p.add_argument("--out", required=True, help="output directory (members + ensemble.txt)")

    p = add("distill", cmd_distill, "distill an ensemble into a smaller student")
    _data_args(p)
    p.add_argument("--ensemble", required=True, help="ensemble manifest (.txt) or single model")
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "dense probability map and detections for a slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--model", required=True, help="model file or ensemble manifest (.txt)")
    p.add_argument("--out", required=True)

    p = add("hotspot", cmd_hotspot, "hotspot count, grade and score for a slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--out")

    p = add("grade", cmd_grade, "grade from a hotspot mitosis count")
    p.add_argument("--count", type=int, required=True)

    p = add("eval", cmd_eval, "detection F1, grading kappa and score Spearman")
    p.add_argument("--detections", action="append")
    p.add_argument("--truth", action="append")
    p.add_argument("--delta", type=float)
    p.add_argument("--curve", help="write the F1-vs-delta curve CSV here")
    p.add_argument("--grades-pred")
    p.add_argument("--grades-true")
    p.add_argument("--scores-pred")
    p.add_argument("--scores-true")
    p.add_argument("--out")

    p = add("sweep", cmd_sweep, "F1 over the detection threshold grid")
    p.add_argument("--detections", action="append")
    p.add_argument("--truth", action="append")
    p.add_argument("--out", required=True)
    return ap


def _fail(code: str, status: int, message: str) -> int:
    msg = " ".join(str(message).split())
    sys.stderr.write(f"error: code={code} exit={status} message={msg}\n")
    return status


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging(args)
        cfg = resolve_config(args)
        log.info("command %s", args.command)
        for line in cfg.to_text().splitlines():
            log.info("config %s", line)
        args.func(args, cfg)
        return EXIT_OK
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail(exc.code, EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail("missing_input", EXIT_MISSING, exc)
    except ModelFileError as exc:
        return _fail(exc.code, EXIT_MODEL, exc)
    except MitodetError as exc:
        return _fail(exc.code, EXIT_PIPELINE, exc)
    except ValueError as exc:
        return _fail("invalid_input", EXIT_DATA, exc)
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
