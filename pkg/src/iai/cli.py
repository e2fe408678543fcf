"""``iai`` command line: gen, track, train, eval, render.

Exit codes: 0 success, 1 invalid configuration, 2 unwritable output path,
3 malformed input (bad file, ID collision), 4 training loss became NaN.
``IAI_SEED`` in the environment overrides ``--seed``.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats, losses, metrics, synthworld, tracker
from .association import HabConfig
from .formats import FormatError, VideoRecord

EXIT_OK, EXIT_CONFIG, EXIT_WRITE, EXIT_INPUT, EXIT_NAN = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def _seed(args):
    env = os.environ.get("IAI_SEED")
    if env is None:
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"IAI_SEED must be an integer, got {env!r}") from None


def video_seed(seed, video_id):
    """Independent integer seed for one video of a run."""
    return int(np.random.SeedSequence([seed, video_id]).generate_state(1)[0])


def _write_text(path, text):
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(EXIT_WRITE, f"cannot write {path}: {exc.strerror}") from None


def _write_with(path, writer, *args):
    try:
        writer(path, *args)
    except OSError as exc:
        raise CliError(EXIT_WRITE, f"cannot write {path}: {exc.strerror}") from None


def _read_tracks(path, kind):
    try:
        return formats.read_tracks(path, kind)[1]
    except FormatError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from None


def _pmap(fn, items, threads):
    """Ordered map, optionally over a thread pool."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _hab_config(args):
    try:
        return HabConfig(enable_global=not args.no_global, enable_local=not args.no_local,
                         enable_cls=not args.no_cls, stride=args.stride)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _check_ids_channels(n_ids, channels):
    if n_ids < 2:
        raise CliError(EXIT_CONFIG, f"--n-ids must be >= 2, got {n_ids}")
    if channels < 1:
        raise CliError(EXIT_CONFIG, f"--channels must be >= 1, got {channels}")


def _check_stride(args, height, width):
    if height % args.stride or width % args.stride:
        raise CliError(EXIT_CONFIG,
                       f"--stride {args.stride} does not divide the {height}x{width} frame")


def ground_truth_from_record(video, channels, noise_sigma, seed):
    """Rebuild a :class:`~iai.synthworld.GroundTruth` from a dataset video.

    Tube order gives the identities.  Features are re-rendered from the
    masks with the given noise level and seed.
    """
    labels = np.full((video.n_frames, video.hw), -1, dtype=np.int64)
    for k, tube in enumerate(video.tubes):
        clash = tube.masks & (labels >= 0)
        if clash.any():
            t = int(np.flatnonzero(clash.any(axis=1))[0])
            raise CliError(EXIT_INPUT, f"video {video.video_id}: tube {tube.instance_id} "
                                       f"overlaps another tube at frame {t}")
        labels[tube.masks] = k
    feats, sigs = synthworld.render_features(labels, len(video.tubes), channels, noise_sigma, seed)
    return synthworld.GroundTruth(video.height, video.width, video.categories, labels,
                                  [tb.label for tb in video.tubes], feats, [], sigs)


def record_from_ground_truth(video_id, gt):
    tubes = [tracker.MaskTube(k, gt.classes[k], 1.0, gt.labels == k)
             for k in range(gt.n_instances)]
    return VideoRecord(video_id, gt.n_frames, gt.height, gt.width, gt.categories, tubes)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    seed = _seed(args)
    h, w = args.size
    if args.videos < 0:
        raise CliError(EXIT_CONFIG, "--videos must be >= 0")
    _check_ids_channels(args.n_ids, args.channels)
    if args.instances > args.n_ids - 1:
        raise CliError(EXIT_CONFIG, f"--instances {args.instances} exceeds the ID capacity "
                                    f"N-1 = {args.n_ids - 1}")
    lo = args.instances if args.min_instances is None else args.min_instances
    try:
        cfgs = [synthworld.WorldConfig(
            height=h, width=w, frames=args.frames, max_instances=args.instances,
            min_instances=lo, categories=args.categories, occlusion_rate=args.occlusion,
            noise_sigma=args.noise, seed=video_seed(seed, v), channels=args.channels,
            n_ids=args.n_ids) for v in range(args.videos)]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None

    def one(v):
        return record_from_ground_truth(v, synthworld.gen_video(cfgs[v]))

    try:
        videos = _pmap(one, range(args.videos), args.threads)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _write_text(args.out, formats.dumps_tracks("dataset", videos))
    for v in videos:
        print(f"video {v.video_id} instances {len(v.tubes)}")
    return EXIT_OK


def _detector_factory(choice, n_ids):
    if choice == "oracle":
        return synthworld.OracleDetector
    if choice.startswith("trained:"):
        path = choice[len("trained:"):]
        try:
            with open(path) as fh:
                head = formats.loads_head(fh.read())
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror}") from None
        except FormatError as exc:
            raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
        if head.n_ids != n_ids:
            raise CliError(EXIT_CONFIG, f"head was trained for {head.n_ids} IDs, --n-ids is {n_ids}")
        return lambda gt: synthworld.HeadDetector(gt, head)
    raise CliError(EXIT_CONFIG, f"--detector must be 'oracle' or 'trained:PATH', got {choice!r}")


def cmd_track(args):
    seed = _seed(args)
    _check_ids_channels(args.n_ids, args.channels)
    cfg = _hab_config(args)
    if not 0.0 < args.iou_thresh < 1.0:
        raise CliError(EXIT_CONFIG, "--iou-thresh must lie in (0, 1)")
    make_detector = _detector_factory(args.detector, args.n_ids)
    videos = _read_tracks(args.data, "dataset")
    for v in videos:
        _check_stride(args, v.height, v.width)
        if len(v.tubes) > args.n_ids - 1:
            raise CliError(EXIT_CONFIG, f"video {v.video_id} has {len(v.tubes)} instances; "
                                        f"capacity N-1 = {args.n_ids - 1}")

    def one(v):
        vs = video_seed(seed, v.video_id)
        gt = ground_truth_from_record(v, args.channels, args.noise, vs)
        state = tracker.TrackerState.create(v.height, v.width, args.n_ids, args.channels, vs,
                                            cfg, args.iou_thresh)
        tubes = tracker.run_video(gt.features, state, make_detector(gt))
        return VideoRecord(v.video_id, v.n_frames, v.height, v.width, v.categories, tubes)

    preds = _pmap(one, videos, args.threads)
    _write_text(args.out, formats.dumps_tracks("pred", preds))
    for v in preds:
        print(f"video {v.video_id} instances {len(v.tubes)}")
    return EXIT_OK


def cmd_train(args):
    seed = _seed(args)
    _check_ids_channels(args.n_ids, args.channels)
    h, w = args.size
    if args.loss == "ce":
        fp = losses.CE_PARAMS
    else:
        try:
            fp = losses.FocalParams(args.alpha, args.lam)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    if args.steps < 0 or args.sequences < 1:
        raise CliError(EXIT_CONFIG, "--steps must be >= 0 and --sequences >= 1")
    if args.frames < args.window:
        raise CliError(EXIT_CONFIG, f"--frames must be at least the {args.window}-frame window")
    _check_stride(args, h, w)
    try:
        sequences = [synthworld.gen_video(synthworld.WorldConfig(
            height=h, width=w, frames=args.frames, max_instances=args.instances,
            min_instances=1, categories=args.categories, seed=video_seed(seed, s),
            channels=args.channels, n_ids=args.n_ids)) for s in range(args.sequences)]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    hab = HabConfig(stride=args.stride)

    def factory():
        return tracker.TrackerState.create(h, w, args.n_ids, args.channels, seed, hab)

    head = synthworld.ToyIdHead.create(args.n_ids, seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            head, curve = synthworld.train_toy_head(head, sequences, factory, fp, args.steps,
                                                    args.lr, seed, args.window)
    except synthworld.TrainingDiverged as exc:
        raise CliError(EXIT_NAN, f"training diverged: {exc}") from None
    meta = {"loss": args.loss, "alpha": fp.alpha, "lambda": fp.lam, "steps": args.steps,
            "lr": args.lr, "seed": seed}
    _write_text(args.weights, formats.dumps_head(head, meta))
    _write_text(args.curve, formats.dumps_curve(curve))
    if curve:
        from . import plotting
        _write_with(str(Path(args.curve).with_suffix(".png")), plotting.loss_curve_figure, curve)
        print(f"loss first {curve[0]:.9f} last {curve[-1]:.9f}")
    return EXIT_OK


def format_report(report):
    lines = [
        f"mAP {report.mAP:.4f}",
        f"AP50 {report.AP50:.4f}",
        f"AP75 {report.AP75:.4f}",
        f"AR1 {report.AR1:.4f}",
        f"AR10 {report.AR10:.4f}",
        f"id_switches {report.id_switches}",
    ]
    lines += [f"AP@{th:.2f} {ap:.4f}" for th, ap in report.per_threshold]
    lines.append("SUMMARY\t" + "\t".join([
        f"mAP={report.mAP:.4f}", f"AP50={report.AP50:.4f}", f"AP75={report.AP75:.4f}",
        f"AR1={report.AR1:.4f}", f"AR10={report.AR10:.4f}", f"id_switches={report.id_switches}"]))
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    gts = _read_tracks(args.gt, "dataset")
    preds = _read_tracks(args.pred, "pred")
    by_id = {v.video_id: v for v in gts}
    matched = {v.video_id: v for v in preds}
    for v in preds:
        g = by_id.get(v.video_id)
        if g is None:
            raise CliError(EXIT_INPUT, f"prediction video {v.video_id} is not in the dataset")
        if (v.n_frames, v.height, v.width) != (g.n_frames, g.height, g.width):
            raise CliError(EXIT_INPUT, f"video {v.video_id}: prediction geometry differs")
    pred_lists = [matched[g.video_id].tubes if g.video_id in matched else [] for g in gts]
    report = metrics.video_map(pred_lists, [g.tubes for g in gts])
    text = format_report(report)
    sys.stdout.write(text)
    out = Path(args.out)
    _write_text(out, text)
    table = "threshold\tAP\n" + "".join(f"{th:.2f}\t{ap:.6f}\n" for th, ap in report.per_threshold)
    _write_text(out.with_suffix(".tsv"), table)
    from . import plotting
    _write_with(str(out.with_suffix(".png")), plotting.ap_figure, report)
    return EXIT_OK


def cmd_render(args):
    videos = _read_tracks(args.input, None)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_WRITE, f"cannot create {out}: {exc.strerror}") from None
    count = 0
    for v in videos:
        for t in range(v.n_frames):
            path = out / f"video{v.video_id:03d}_frame{t:03d}.ppm"
            _write_with(path, formats.write_ppm, formats.render_frame(v, t))
            count += 1
    print(f"frames {count}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="iai", description="Instance-as-identity video instance tracking toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, threads=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if threads:
            sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--n-ids", type=int, default=20)
        sp.add_argument("--channels", type=int, default=16)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    common(g)
    g.add_argument("--videos", type=int, default=1)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--instances", type=int, default=3, help="maximum instances per video")
    g.add_argument("--min-instances", type=int, default=None)
    g.add_argument("--categories", type=int, default=4)
    g.add_argument("--occlusion", type=float, default=0.3)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("track", help="track a dataset, write predicted tubes")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--detector", default="oracle")
    t.add_argument("--no-global", action="store_true")
    t.add_argument("--no-local", action="store_true")
    t.add_argument("--no-cls", action="store_true")
    t.add_argument("--stride", type=int, default=4)
    t.add_argument("--iou-thresh", type=float, default=0.5)
    t.add_argument("--noise", type=float, default=0.05)
    t.set_defaults(func=cmd_track)

    r = sub.add_parser("train", help="train the toy ID head")
    common(r, threads=False)
    r.add_argument("--loss", choices=("focal", "ce"), default="focal")
    r.add_argument("--alpha", type=float, default=0.25)
    r.add_argument("--lambda", dest="lam", type=float, default=2.0)
    r.add_argument("--steps", type=int, default=500)
    r.add_argument("--lr", type=float, default=0.1)
    r.add_argument("--sequences", type=int, default=20)
    r.add_argument("--frames", type=int, default=5)
    r.add_argument("--window", type=int, default=5)
    r.add_argument("--instances", type=int, default=4)
    r.add_argument("--categories", type=int, default=4)
    r.add_argument("--size", type=_size, default=(64, 64))
    r.add_argument("--stride", type=int, default=4)
    r.add_argument("--weights", required=True)
    r.add_argument("--curve", required=True)
    r.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score predictions against a dataset")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", help="write one PPM per frame")
    d.add_argument("--input", required=True)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise CliError(EXIT_CONFIG, "--threads must be >= 1")
        if getattr(args, "stride", 1) < 1:
            raise CliError(EXIT_CONFIG, "--stride must be >= 1")
        return args.func(args)
    except CliError as exc:
        print(f"iai: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
