"""Command-line front end.

Subcommands: ``unsupervised`` (evolve one contour on one image), ``fit``
(distill a support image/mask into a signature), ``predict`` (evolve a query
against a signature and score it), ``pipeline`` (overview -> candidates ->
parallel predictions -> accept/reject -> metrics), and ``eval`` (compare
prediction and ground-truth directories).

Exit codes: 0 success, 2 usage or configuration problems, 3 degenerate data
(empty masks, no candidates, collapsed contours).  Every command writes a
JSON run manifest (inputs with SHA-256 hashes, config snapshot, stage
timings, outputs) atomically at the end of the run.  Runs are deterministic:
the same flags and seed reproduce contour and score files bit for bit.

The ``SOFTCONTOUR_THREADS`` environment variable overrides the pipeline worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evolution as ev
from . import features as ft
from . import geometry as geo
from . import imgio
from . import pipeline as pl
from . import region_stats as rs
from . import render

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEGENERATE = 3

DEFAULT_FRAME_STRIDE = 10
THREADS_ENV_VAR = "SOFTCONTOUR_THREADS"


class _UsageError(Exception):
    pass


class _DegenerateError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _fail_usage(message):
    raise _UsageError(message)


def _require_file(path, what):
    if path is None:
        _fail_usage(f"missing required {what}")
    if not os.path.isfile(path):
        _fail_usage(f"{what} not found: {path}")
    return path


def _load_image_checked(path):
    _require_file(path, "image")
    try:
        return imgio.load_image(path)
    except Exception as exc:
        _fail_usage(f"unreadable PNG {path}: {exc}")


def _load_config(args):
    if getattr(args, "config", None):
        _require_file(args.config, "config file")
        config = ev.EvolutionConfig.from_json(args.config)
    elif getattr(args, "preset", None):
        config = ev.PRESETS[args.preset]()
    else:
        config = ev.EvolutionConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config.validate()


def _make_extractor(args):
    name = getattr(args, "extractor", "identity")
    weights = getattr(args, "weights", None)
    if name == "conv":
        _require_file(weights, "--weights (required for the conv extractor)")
    try:
        return ft.make_extractor(name, weights), name
    except ft.WeightFormatError as exc:
        _fail_usage(str(exc))


class _Manifest:
    """Collects run metadata and writes it atomically at the end."""

    def __init__(self, command, args):
        self.payload = {
            "command": command,
            "argv": {k: v for k, v in vars(args).items() if k != "func"},
            "inputs": {},
            "outputs": [],
            "timings": {},
            "failures": 0,
            "status": "ok",
        }
        self._t0 = time.perf_counter()
        self._stage_start = self._t0

    def add_input(self, path):
        if path and os.path.isfile(path):
            self.payload["inputs"][str(path)] = imgio.sha256_file(path)

    def add_output(self, path):
        self.payload["outputs"].append(str(path))

    def stage(self, name):
        now = time.perf_counter()
        self.payload["timings"][name] = round(now - self._stage_start, 6)
        self._stage_start = now

    def set(self, key, value):
        self.payload[key] = value

    def write(self, path):
        self.payload["timings"]["total"] = round(time.perf_counter() - self._t0, 6)
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.payload, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        os.replace(tmp, path)


def _manifest_path(args, primary_output):
    if getattr(args, "manifest", None):
        return args.manifest
    return str(primary_output) + ".manifest.json"


def _write_score(path, score):
    with open(path, "w") as fh:
        fh.write(f"{score:.9g}\n")


def _default_init(config):
    return geo.circle_contour(n_nodes=config.n_nodes)


def _resolve_init_contour(args, config, image=None):
    if getattr(args, "init_contour", None):
        _require_file(args.init_contour, "init contour")
        return geo.load_contour(args.init_contour)
    if getattr(args, "auto_init", False):
        if image is None:
            _fail_usage("--auto-init needs an image")
        candidates = pl.extract_candidates(image, n_nodes=config.n_nodes)
        if not candidates:
            raise _DegenerateError("no candidate found for --auto-init")
        largest = max(candidates, key=lambda c: c.area_px)
        r0, c0, r1, c1 = largest.box
        h, w = image.shape[:2]
        scale = np.array([(c1 - c0) / w, (r1 - r0) / h])
        offset = np.array([c0 / w, r0 / h])
        return largest.contour * scale + offset
    return _default_init(config)


# ---------------------------------------------------------------------------
# unsupervised


def _cmd_unsupervised(args):
    manifest = _Manifest("unsupervised", args)
    config = _load_config(args)
    if args.out_frames:
        config.snapshot_stride = args.frame_stride
    extractor, _ = _make_extractor(args)
    image = _load_image_checked(args.image)
    for path in (args.image, args.init_contour, args.config, args.weights):
        manifest.add_input(path)
    init = _resolve_init_contour(args, config)
    manifest.set("config", config.to_dict())
    manifest.stage("setup")

    contour, trace = ev.evolve_unsupervised(image, init, config, extractor)
    manifest.stage("evolve")

    geo.save_contour(args.out_contour, contour)
    manifest.add_output(args.out_contour)
    if args.out_overlay:
        render.save_overlay(image, [contour], args.out_overlay)
        manifest.add_output(args.out_overlay)
    if args.out_frames:
        snapshots = trace.snapshots + [(trace.n_epochs, contour)]
        for path in render.save_frames(image, snapshots, args.out_frames):
            manifest.add_output(path)
    if args.out_loss_curve:
        render.save_loss_curve(trace, args.out_loss_curve)
        manifest.add_output(args.out_loss_curve)
    manifest.stage("report")
    manifest.set("status", trace.status)
    manifest.set("n_epochs_run", trace.n_epochs)
    manifest.write(_manifest_path(args, args.out_contour))
    if trace.status in (ev.STATUS_COLLAPSED, ev.STATUS_DEGENERATE):
        print(f"evolution ended early: {trace.status}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _cmd_fit(args):
    manifest = _Manifest("fit", args)
    config = _load_config(args)
    extractor, extractor_name = _make_extractor(args)
    image = _load_image_checked(args.image)
    _require_file(args.mask, "mask")
    mask = imgio.load_mask(args.mask)
    if args.macenko:
        image = pl.macenko_normalize(image)
    for path in (args.image, args.mask, args.config, args.weights):
        manifest.add_input(path)
    manifest.set("config", config.to_dict())
    manifest.stage("setup")

    signature = ev.fit_support(
        image, mask, config, extractor, extractor_name=extractor_name
    )
    manifest.stage("fit")
    signature.save(args.out_signature)
    manifest.add_output(args.out_signature)
    manifest.add_output(args.out_signature + ev.SIGNATURE_SUFFIX)
    manifest.write(_manifest_path(args, args.out_signature))
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _load_signature_checked(path):
    _require_file(path, "signature")
    try:
        return ev.SupportSignature.load(path)
    except ft.WeightFormatError as exc:
        _fail_usage(f"corrupt signature {path}: {exc}")


def _check_signature_config(signature, args, config):
    if getattr(args, "config", None):
        centers = tuple(float(c) for c in config.isoline_centers)
        if centers != tuple(signature.centers):
            _fail_usage(
                f"config isoline_centers {centers} do not match "
                f"signature centers {tuple(signature.centers)}"
            )
    else:
        config.isoline_centers = tuple(signature.centers)
        config.isoline_weights = tuple(signature.weights)


def _cmd_predict(args):
    manifest = _Manifest("predict", args)
    config = _load_config(args)
    signature = _load_signature_checked(args.signature)
    _check_signature_config(signature, args, config)
    extractor, _ = _make_extractor(args)
    image = _load_image_checked(args.image)
    if args.macenko:
        image = pl.macenko_normalize(image)
    for path in (args.signature, args.image, args.init_contour, args.config, args.weights):
        manifest.add_input(path)
    init = _resolve_init_contour(args, config, image=image)
    manifest.set("config", config.to_dict())
    manifest.stage("setup")

    result = ev.predict_query(signature, image, init, config, extractor)
    manifest.stage("predict")

    geo.save_contour(args.out_contour, result.contour)
    manifest.add_output(args.out_contour)
    _write_score(args.out_score, result.score)
    manifest.add_output(args.out_score)
    if args.out_overlay:
        render.save_overlay(image, [result.contour], args.out_overlay)
        manifest.add_output(args.out_overlay)
    manifest.set("status", result.trace.status)
    manifest.set("score", result.score)
    manifest.write(_manifest_path(args, args.out_contour))
    if result.rejected:
        print(f"prediction rejected: {result.trace.status}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


def _predict_candidate_worker(payload):
    """Run one candidate prediction in a worker process."""
    (cand_dict, patch, signature, config_dict, extractor_name, weights_path) = payload
    cand = pl.Candidate.from_dict(cand_dict)
    try:
        config = ev.EvolutionConfig.from_dict(config_dict)
        extractor = ft.make_extractor(extractor_name, weights_path)
        result = ev.predict_query(signature, patch, cand.contour, config, extractor)
        return {
            "cc_id": cand.cc_id,
            "contour": [[float(x), float(y)] for x, y in result.contour],
            "score": result.score,
            "status": result.trace.status,
            "rejected": result.rejected,
            "error": None,
        }
    except Exception as exc:  # per-candidate failures never abort the batch
        return {
            "cc_id": cand.cc_id,
            "contour": None,
            "score": 0.0,
            "status": "error",
            "rejected": True,
            "error": f"{type(exc).__name__}: {exc}",
        }


def _pipeline_workers(args):
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            workers = int(env)
        except ValueError:
            _fail_usage(f"{THREADS_ENV_VAR} must be an integer, got {env!r}")
    elif args.workers:
        workers = args.workers
    else:
        workers = os.cpu_count() or 1
    if workers < 1:
        _fail_usage("worker count must be at least 1")
    return workers


def _load_patch_for(candidate, overview, patches_dir, use_macenko):
    if patches_dir is None:
        r0, c0, r1, c1 = candidate.box
        patch = overview[r0:r1, c0:c1]
    else:
        path = os.path.join(patches_dir, f"{candidate.cc_id}.png")
        _require_file(path, f"patch for candidate {candidate.cc_id}")
        patch = imgio.load_image(path)
    if use_macenko:
        patch = pl.macenko_normalize(patch)
    return patch


def _cmd_pipeline(args):
    manifest = _Manifest("pipeline", args)
    if (args.score_threshold is None) == (args.labels is None):
        _fail_usage("need exactly one of --score-threshold or --labels")
    if args.patches is None and not args.self_extract:
        _fail_usage("need --patches DIR or --self-extract")
    config = _load_config(args)
    signature = _load_signature_checked(args.signature)
    _check_signature_config(signature, args, config)
    _make_extractor(args)  # validate extractor/weights before the fan-out
    overview = _load_image_checked(args.overview)
    for path in (args.overview, args.signature, args.config, args.weights, args.labels):
        manifest.add_input(path)
    os.makedirs(args.out, exist_ok=True)
    manifest.set("config", config.to_dict())
    manifest.stage("setup")

    candidates = pl.extract_candidates(overview, n_nodes=config.n_nodes)
    candidates_path = os.path.join(args.out, "candidates.json")
    pl.save_candidates(candidates_path, candidates)
    manifest.add_output(candidates_path)
    manifest.stage("extract_candidates")
    if not candidates:
        manifest.set("status", "no_candidates")
        manifest.set("failures", 0)
        manifest.write(os.path.join(args.out, "manifest.json"))
        print("no candidates found", file=sys.stderr)
        return EXIT_OK

    jobs = []
    for cand in candidates:
        patch = _load_patch_for(cand, overview, args.patches, args.macenko)
        jobs.append((
            cand.to_dict(), patch, signature, config.to_dict(),
            args.extractor, args.weights,
        ))
    workers = _pipeline_workers(args)
    if workers == 1 or len(jobs) == 1:
        results = [_predict_candidate_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_predict_candidate_worker, jobs))
    results.sort(key=lambda r: r["cc_id"])
    manifest.set("failures", sum(1 for r in results if r["error"] is not None))
    manifest.stage("predict")

    scores = np.array([r["score"] for r in results])
    if args.labels is not None:
        with open(args.labels) as fh:
            label_map = json.load(fh)
        try:
            labels = np.array([bool(label_map[str(r["cc_id"])]) for r in results])
        except KeyError as exc:
            _fail_usage(f"--labels file is missing candidate {exc}")
        threshold = pl.choose_threshold(scores, labels)
    else:
        labels = None
        threshold = args.score_threshold
    accepted = [
        r["cc_id"]
        for r in results
        if r["score"] >= threshold and not r["rejected"]
    ]

    contours_dir = os.path.join(args.out, "contours")
    overlays_dir = os.path.join(args.out, "overlays")
    os.makedirs(contours_dir, exist_ok=True)
    os.makedirs(overlays_dir, exist_ok=True)
    by_id = {c.cc_id: c for c in candidates}
    for r in results:
        if r["contour"] is None:
            continue
        cpath = os.path.join(contours_dir, f"{r['cc_id']}.json")
        geo.save_contour(cpath, np.asarray(r["contour"]))
        manifest.add_output(cpath)
        patch = _load_patch_for(by_id[r["cc_id"]], overview, args.patches, args.macenko)
        opath = os.path.join(overlays_dir, f"{r['cc_id']}.png")
        render.save_overlay(patch, [np.asarray(r["contour"])], opath)
        manifest.add_output(opath)

    scores_path = os.path.join(args.out, "scores.csv")
    with open(scores_path, "w") as fh:
        fh.write("cc_id,score,accepted,status\n")
        for r in results:
            fh.write(
                f"{r['cc_id']},{r['score']:.9g},"
                f"{int(r['cc_id'] in accepted)},{r['status']}\n"
            )
    manifest.add_output(scores_path)
    decisions_path = os.path.join(args.out, "decisions.json")
    with open(decisions_path, "w") as fh:
        json.dump(
            {"threshold": float(threshold), "accepted": accepted}, fh,
            indent=2, sort_keys=True,
        )
        fh.write("\n")
    manifest.add_output(decisions_path)
    hist_path = os.path.join(args.out, "score_histogram.png")
    render.save_score_histogram(scores, threshold, hist_path, labels)
    manifest.add_output(hist_path)

    if args.gt:
        pred_masks = {}
        gt_masks = {}
        for r in results:
            gt_path = os.path.join(args.gt, f"{r['cc_id']}.png")
            if not os.path.isfile(gt_path):
                continue
            gt_masks[str(r["cc_id"])] = imgio.load_mask(gt_path)
            if r["cc_id"] in accepted and r["contour"] is not None:
                shape = gt_masks[str(r["cc_id"])].shape
                pred_masks[str(r["cc_id"])] = geo.contour_to_binary_mask(
                    np.asarray(r["contour"]), shape, config.sharpness
                )
        metrics = pl.evaluate_instance_pairs(pred_masks, gt_masks)
        metrics_path = os.path.join(args.out, "metrics.json")
        with open(metrics_path, "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add_output(metrics_path)
    manifest.stage("report")
    manifest.write(os.path.join(args.out, "manifest.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args):
    manifest = _Manifest("eval", args)
    if not os.path.isdir(args.pred):
        _fail_usage(f"prediction directory not found: {args.pred}")
    if not os.path.isdir(args.gt):
        _fail_usage(f"ground-truth directory not found: {args.gt}")
    gt_masks = {}
    for name in sorted(os.listdir(args.gt)):
        stem, ext = os.path.splitext(name)
        if ext.lower() == ".png":
            path = os.path.join(args.gt, name)
            gt_masks[stem] = imgio.load_mask(path)
            manifest.add_input(path)
    pred_masks = {}
    for name in sorted(os.listdir(args.pred)):
        stem, ext = os.path.splitext(name)
        path = os.path.join(args.pred, name)
        if ext.lower() == ".png":
            pred_masks[stem] = imgio.load_mask(path)
        elif ext.lower() == ".json":
            if stem not in gt_masks:
                print(f"warning: no ground truth for {name}", file=sys.stderr)
                continue
            pred_masks[stem] = geo.contour_to_binary_mask(
                geo.load_contour(path), gt_masks[stem].shape
            )
        else:
            continue
        manifest.add_input(path)
    for stem in sorted(set(pred_masks) ^ set(gt_masks)):
        side = "ground truth" if stem in gt_masks else "prediction"
        print(f"warning: {side}-only instance '{stem}'", file=sys.stderr)
    manifest.stage("load")

    metrics = pl.evaluate_instance_pairs(pred_masks, gt_masks)
    with open(args.out, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output(args.out)
    if args.plot:
        ious = [m["iou"] for m in metrics["matches"]]
        render.save_score_histogram(
            np.asarray(ious if ious else [0.0]), None, args.plot
        )
        manifest.add_output(args.plot)
    manifest.stage("report")
    manifest.write(_manifest_path(args, args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common_evolution_flags(sub, oneshot=False):
    sub.add_argument("--config", help="evolution config JSON")
    sub.add_argument("--preset", choices=sorted(ev.PRESETS),
                     help="named parameter preset (ignored with --config)")
    sub.add_argument("--extractor", choices=["identity", "conv"], default="identity")
    sub.add_argument("--weights", help="weight container for the conv extractor")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--manifest", help="run manifest path")
    if oneshot:
        sub.add_argument("--macenko", action="store_true",
                         help="stain-normalize images before feature extraction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softcontour",
        description="Training-free active-contour segmentation",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("unsupervised", help="evolve a contour on a single image")
    p.add_argument("--image", required=True)
    p.add_argument("--init-contour", help="initial contour JSON (default: centered circle)")
    p.add_argument("--out-contour", required=True)
    p.add_argument("--out-overlay")
    p.add_argument("--out-frames", help="directory for evolution frames")
    p.add_argument("--frame-stride", type=int, default=DEFAULT_FRAME_STRIDE)
    p.add_argument("--out-loss-curve")
    _add_common_evolution_flags(p)
    p.set_defaults(func=_cmd_unsupervised)

    p = subs.add_parser("fit", help="distill a support image + mask into a signature")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-signature", required=True)
    _add_common_evolution_flags(p, oneshot=True)
    p.set_defaults(func=_cmd_fit)

    p = subs.add_parser("predict", help="evolve a query contour against a signature")
    p.add_argument("--signature", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--init-contour")
    p.add_argument("--auto-init", action="store_true",
                   help="initialize from the largest extracted candidate")
    p.add_argument("--out-contour", required=True)
    p.add_argument("--out-score", required=True)
    p.add_argument("--out-overlay")
    _add_common_evolution_flags(p, oneshot=True)
    p.set_defaults(func=_cmd_predict)

    p = subs.add_parser("pipeline", help="overview -> candidates -> predictions -> report")
    p.add_argument("--overview", required=True)
    p.add_argument("--patches", help="directory of <cc_id>.png full-resolution patches")
    p.add_argument("--self-extract", action="store_true",
                   help="crop patches out of the overview itself")
    p.add_argument("--signature", required=True)
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--labels", help="JSON {cc_id: bool} to fit the threshold")
    p.add_argument("--gt", help="directory of <cc_id>.png ground-truth masks")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int,
                   help=f"worker processes (default: cores; env {THREADS_ENV_VAR} wins)")
    _add_common_evolution_flags(p, oneshot=True)
    p.set_defaults(func=_cmd_pipeline)

    p = subs.add_parser("eval", help="compare prediction and ground-truth directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="optional IoU histogram figure")
    p.add_argument("--manifest", help="run manifest path")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ev.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ft.WeightFormatError as exc:
        print(f"weight container error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (rs.EmptyRegionError, pl.InsufficientTissueError, _DegenerateError,
            geo.DegenerateContourError) as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
