"""Command-line entry point.

Verbs: synth, train, eval, predict, gradcheck, complexity, ttest, ablate.
Configuration comes from flat key=value text files plus repeatable --set
overrides. Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import blocks as B
from . import data as D
from . import losses as L
from . import metrics as ME
from . import model as M
from . import pgm
from . import tensor as T
from . import train as TR
from .tensor import FormatError, NonFiniteError, ShapeError, Tensor


class CliError(Exception):
    """Validation failure surfaced to the user (exit 1)."""


class Parser(argparse.ArgumentParser):
    # unknown flags and bad values are validation failures, not usage quirks
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_kv(text, path="<config>"):
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}: malformed line {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def _load_kv(path, overrides):
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {path} not found")
        values.update(_parse_kv(p.read_text(), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    return values


_SYNTH_FIELDS = {
    "image_size": int, "family": str, "noise_level": float,
    "contrast_lo": float, "contrast_hi": float, "num_classes": int,
    "count": int,
}

_TRAIN_FIELDS = {
    "max_epochs": int, "initial_lr": float, "plateau_patience": int,
    "plateau_factor": float, "early_stop_patience": int, "batch_size": int,
    "seed": int, "val_fraction": float, "min_lr": float,
    "loss_components": lambda s: tuple(
        part.strip() for part in s.split(",") if part.strip()
    ),
}

_SCHEDULE_FIELDS = {
    "lambda_d": float, "lambda_j": float, "lambda_b_initial": float,
    "lambda_b_decay": float, "lambda_b_floor": float,
}


def _typed_subset(values, fields):
    out = {}
    for key in list(values):
        if key in fields:
            out[key] = fields[key](values.pop(key))
    return out


def _build_synth_spec(values):
    kwargs = _typed_subset(values, _SYNTH_FIELDS)
    if values:
        raise CliError(f"unknown synth config keys: {sorted(values)}")
    return D.SynthSpec(**kwargs)


def _build_configs(values, seed=None):
    train_kwargs = _typed_subset(values, _TRAIN_FIELDS)
    sched_kwargs = _typed_subset(values, _SCHEDULE_FIELDS)
    model_cfg = M.config_from_text("", overrides=values)  # raises on unknowns
    if sched_kwargs:
        train_kwargs["schedule"] = L.LossSchedule(**sched_kwargs)
    if seed is not None:
        train_kwargs["seed"] = seed
    return model_cfg, TR.TrainConfig(**train_kwargs)


# ---------------------------------------------------------------------------
# dataset directory format


def write_dataset(samples, out_dir, num_classes):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (image, mask) in enumerate(samples):
        pgm.write_image(pgm.ImageRecord(pixels=image), out_dir / f"img_{i:04d}.pgm")
        pgm.write_mask(
            pgm.MaskRecord(labels=mask, num_classes=num_classes),
            out_dir / f"msk_{i:04d}.pgm",
        )
    (out_dir / "dataset.txt").write_text(
        f"count={len(samples)}\nnum_classes={num_classes}\n"
    )


def read_dataset(data_dir):
    data_dir = Path(data_dir)
    meta_path = data_dir / "dataset.txt"
    if not meta_path.exists():
        raise FileNotFoundError(f"{data_dir} is not a dataset directory")
    meta = _parse_kv(meta_path.read_text(), str(meta_path))
    count = int(meta["count"])
    num_classes = int(meta["num_classes"])
    samples = []
    for i in range(count):
        image = pgm.read_image(data_dir / f"img_{i:04d}.pgm").pixels
        mask = pgm.read_mask(data_dir / f"msk_{i:04d}.pgm", num_classes).labels
        samples.append((image, mask))
    return samples, num_classes


# ---------------------------------------------------------------------------
# gradient-check harnesses


def _kv_line(name, res):
    return (f"{name} max_rel_err={res.max_rel_error:.3e} "
            f"kinks={res.kink_events} excluded={res.excluded_elements}")


def _check(name, f, leaves, results, max_elements=None):
    results.append((name, T.grad_check(f, leaves, eps=1e-5,
                                       max_elements=max_elements, seed=0)))


def gradcheck_ops():
    rng = np.random.default_rng(0)
    results = []

    def rand(shape, lo=-2.0, hi=2.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    a, b = rand((3, 4)), rand((3, 4))
    c = rand((3, 4), lo=0.5, hi=2.0)
    _check("add", lambda *_: T.tsum(a + b), [a, b], results)
    _check("sub", lambda *_: T.tsum((a - b) * (a - b)), [a, b], results)
    _check("mul", lambda *_: T.tsum(a * b), [a, b], results)
    _check("div", lambda *_: T.tsum(a / c), [a, c], results)
    relu_in = Tensor(rng.uniform(0.2, 2.0, (3, 4)) * np.where(
        rng.random((3, 4)) < 0.5, -1.0, 1.0), requires_grad=True)
    _check("relu", lambda *_: T.tsum(T.relu(relu_in) * T.relu(relu_in)),
           [relu_in], results)
    _check("sigmoid", lambda *_: T.tsum(T.sigmoid(a)), [a], results)
    _check("tanh", lambda *_: T.tsum(T.tanh(a) * b), [a, b], results)
    m1, m2 = rand((4, 3)), rand((3, 5))
    _check("matmul", lambda *_: T.tsum(T.matmul(m1, m2) * T.matmul(m1, m2)),
           [m1, m2], results)
    bm1, bm2 = rand((2, 3, 4)), rand((2, 4, 2))
    _check("matmul_batched",
           lambda *_: T.tsum(T.matmul(bm1, bm2) * T.matmul(bm1, bm2)),
           [bm1, bm2], results)
    _check("concat",
           lambda *_: T.tsum(T.concat([a, b, c], axis=1)
                             * T.concat([a, b, c], axis=1)),
           [a, b, c], results)
    _check("narrow", lambda *_: T.tsum(T.narrow(a, 1, 1, 2) * 3.0), [a], results)
    _check("reshape", lambda *_: T.tsum(T.reshape(a, (2, 6)) * T.reshape(b, (2, 6))),
           [a, b], results)
    _check("transpose", lambda *_: T.tsum(T.transpose(a, (1, 0)) * T.transpose(b, (1, 0))),
           [a, b], results)
    _check("reduce_sum", lambda *_: T.tsum(T.tsum(a, axes=[0]) * T.tsum(b, axes=[0])),
           [a, b], results)
    _check("reduce_mean", lambda *_: T.tmean(a * a), [a], results)
    max_in = Tensor(np.cumsum(rng.uniform(0.1, 1.0, 12)).reshape(3, 4),
                    requires_grad=True)  # distinct values, no ties
    _check("reduce_max", lambda *_: T.tsum(T.tmax(max_in, axes=[1]) * 2.0),
           [max_in], results)
    _check("softmax", lambda *_: T.tsum(T.softmax(a, axis=1) * b), [a, b], results)
    x4 = rand((1, 2, 4, 4))
    _check("pad2d", lambda *_: T.tsum(T.pad2d(x4, (1, 0, 2, 1))
                                      * T.pad2d(x4, (1, 0, 2, 1))),
           [x4], results)
    _check("roll2d", lambda *_: T.tsum(T.roll2d(x4, (1, -1)) * T.roll2d(x4, (1, -1))),
           [x4], results)
    w_dense = rand((3, 2, 3, 3))
    _check("conv2d", lambda *_: T.tsum(T.conv2d(x4, w_dense, padding=1)
                                       * T.conv2d(x4, w_dense, padding=1)),
           [x4, w_dense], results)
    w_dw = rand((2, 1, 3, 3))
    _check("conv2d_depthwise",
           lambda *_: T.tsum(T.conv2d(x4, w_dw, padding=1, groups=2)
                             * T.conv2d(x4, w_dw, padding=1, groups=2)),
           [x4, w_dw], results)
    w_pw = rand((4, 2, 1, 1))
    _check("conv2d_pointwise",
           lambda *_: T.tsum(T.conv2d(x4, w_pw) * T.conv2d(x4, w_pw)),
           [x4, w_pw], results)
    w_t = rand((2, 3, 2, 2))
    _check("conv_transpose2d",
           lambda *_: T.tsum(T.conv_transpose2d(x4, w_t)
                             * T.conv_transpose2d(x4, w_t)),
           [x4, w_t], results)
    pool_in = Tensor(np.cumsum(rng.uniform(0.1, 1.0, 32)).reshape(1, 2, 4, 4),
                     requires_grad=True)
    _check("maxpool2x2", lambda *_: T.tsum(T.maxpool2x2(pool_in) * 2.0),
           [pool_in], results)
    return results


def gradcheck_blocks():
    rng = np.random.default_rng(1)
    results = []

    p_sep = B.init_separable_conv(rng, 2, 3)
    x = Tensor(rng.uniform(-1, 1, (2, 2, 4, 4)), requires_grad=True)
    leaves = [x] + [t for t in B.params_of(p_sep).values() if t.requires_grad]

    def f_sep(*_):
        out = B.separable_conv_bn(x, p_sep, training=True, update_stats=False)
        return T.tmean(out * out) * 0.1

    _check("separable_conv_bn", f_sep, leaves, results)

    p_lstm = B.init_conv_lstm(rng, 1, 2)
    xl = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3)), requires_grad=True)
    leaves = [xl] + [t for t in B.params_of(p_lstm).values() if t.requires_grad]

    def f_step(*_):
        st = B.conv_lstm_step(xl, B.zero_state(1, 2, 3, 3), p_lstm)
        return T.tmean(st.hidden * st.hidden) + T.tmean(T.tanh(st.cell))

    _check("conv_lstm_step", f_step, leaves, results)

    p_bi = B.init_bconv_lstm(rng, 1, 1)
    xb = Tensor(rng.uniform(-1, 1, (1, 1, 2, 2)), requires_grad=True)
    leaves = [xb] + [t for t in B.params_of(p_bi).values() if t.requires_grad]

    def f_bi(*_):
        out = B.bconv_lstm([xb, xb * 0.5], p_bi)
        return T.tmean(out * out)

    _check("bconv_lstm", f_bi, leaves, results)

    p_swin = B.init_swin_pair(rng, 4, 2, 2, mlp_ratio=2)
    xs = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4)), requires_grad=True)
    leaves = [xs] + [t for t in B.params_of(p_swin).values() if t.requires_grad]

    def f_wmsa(*_):
        out = B.window_attention(xs, p_swin, shifted=False)
        return T.tmean(out * out) * 0.1

    def f_swmsa(*_):
        out = B.window_attention(xs, p_swin, shifted=True)
        return T.tmean(out * out) * 0.1

    def f_pair(*_):
        out = B.swin_block_pair(xs, p_swin)
        return T.tmean(out * out) * 0.1

    _check("window_attention_wmsa", f_wmsa, leaves, results)
    _check("window_attention_swmsa", f_swmsa, leaves, results)
    _check("swin_block_pair", f_pair, leaves, results)

    xt = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)), requires_grad=True)
    wt = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)), requires_grad=True)

    def f_tc(*_):
        out = B.transposed_conv(xt, wt)
        return T.tmean(out * out)

    _check("transposed_conv", f_tc, [xt, wt], results)
    return results


def gradcheck_model(seed=0):
    cfg = M.ModelConfig(
        input_height=32, input_width=32, input_channels=1, base_channels=2,
        num_classes=1, window_size=4, num_heads=2, mlp_ratio=2.0,
    )
    params = M.build(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.1, 0.9, (2, 1, 32, 32)), requires_grad=True)
    g = Tensor((rng.random((2, 1, 32, 32)) < 0.5).astype(float))
    leaves = [x] + list(params.trainable().values())

    def f(*_):
        out = M.forward(params, x, training=True, update_stats=False)
        # scaled mean keeps rounding noise below the comparison floor
        return T.tmean((out - g) * (out - g)) * 0.01

    res = T.grad_check(f, leaves, eps=1e-5, max_elements=2, seed=seed)
    return [("model_end_to_end", res)]


# ---------------------------------------------------------------------------
# verb implementations


def _cmd_synth(args):
    spec = _build_synth_spec(_load_kv(args.spec, args.set))
    samples = D.synth_dataset(spec, args.seed)
    write_dataset(samples, args.out, spec.num_classes)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args):
    model_cfg, train_cfg = _build_configs(_load_kv(args.config, args.set),
                                          seed=args.seed)
    dataset, num_classes = read_dataset(args.data)
    if num_classes != model_cfg.num_classes:
        raise CliError(
            f"dataset has {num_classes} classes, config {model_cfg.num_classes}"
        )
    shape = dataset[0][0].shape
    if shape != (model_cfg.input_channels, model_cfg.input_height,
                 model_cfg.input_width):
        raise CliError(f"dataset images {shape} do not match the model config")
    result = TR.train(model_cfg, train_cfg, dataset, out_dir=args.out)
    status = "aborted (non-finite loss)" if result.aborted else "completed"
    print(f"{status}: best val_J={result.best_val_j:.4f} "
          f"at epoch {result.best_epoch}; "
          f"checkpoint and log in {args.out}")
    return 0


def _load_model(checkpoint):
    return M.load_checkpoint(checkpoint)


def _predict_mask(params, image):
    out = M.forward(params, Tensor(image[None]), training=False).data[0]
    if params.config.num_classes == 1:
        return (out[0] >= 0.5).astype(np.int64)
    return out.argmax(axis=0), out


def _cmd_eval(args):
    params = _load_model(args.checkpoint)
    dataset, num_classes = read_dataset(args.data)
    cfg = params.config
    if num_classes != cfg.num_classes:
        raise CliError(
            f"dataset has {num_classes} classes, checkpoint {cfg.num_classes}"
        )
    names = [f"img_{i:04d}" for i in range(len(dataset))]
    if cfg.num_classes == 1:
        preds = []
        for image, _ in dataset:
            preds.append(_predict_mask(params, image))
        report = ME.binary_report(
            [p > 0 for p in preds], [m > 0 for _, m in dataset], names
        )
    else:
        probs = [
            M.forward(params, Tensor(img[None]), training=False).data[0]
            for img, _ in dataset
        ]
        preds = [p.argmax(axis=0) for p in probs]
        report = ME.multiclass_report(
            probs, [m for _, m in dataset], cfg.num_classes, names
        )
    report.to_csv(args.report)
    if args.overlay_dir:
        overlay_dir = Path(args.overlay_dir)
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for name, pred, (image, mask) in zip(names, preds, dataset):
            pgm.overlay_report(
                image, mask > 0, np.asarray(pred) > 0,
                overlay_dir / f"{name}.ppm",
            )
    print(f"wrote report for {len(dataset)} images to {args.report}")
    return 0


def _cmd_predict(args):
    params = _load_model(args.checkpoint)
    record = pgm.read_image(args.image)
    cfg = params.config
    if record.pixels.shape != (cfg.input_channels, cfg.input_height,
                               cfg.input_width):
        raise CliError(
            f"image {record.pixels.shape} does not match the checkpoint config"
        )
    pred = _predict_mask(params, record.pixels)
    labels = pred[0] if isinstance(pred, tuple) else pred
    pgm.write_mask(
        pgm.MaskRecord(labels=labels, num_classes=cfg.num_classes), args.out
    )
    print(f"wrote mask to {args.out}")
    return 0


def _cmd_gradcheck(args):
    table = {"ops": gradcheck_ops, "blocks": gradcheck_blocks,
             "model": lambda: gradcheck_model(args.seed)}
    results = table[args.scope]()
    worst = 0.0
    for name, res in results:
        print(_kv_line(name, res))
        worst = max(worst, res.max_rel_error)
    print(f"worst max_rel_err={worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def _cmd_complexity(args):
    literal = args.literal_eq15
    if args.h or args.w or args.d or args.n:
        if not all((args.h, args.w, args.d, args.n)):
            raise CliError("--h, --w, --d, --n must be given together")
        h, w, d, n = args.h, args.w, args.d, args.n
        print(f"C_MSA={B.complexity_msa(h, w, d)}")
        print(f"C_SW-MSA={B.complexity_swmsa(h, w, d, n, literal=literal)}")
        return 0
    values = _load_kv(args.config, args.set)
    cfg = M.config_from_text("", overrides=values)
    params = M.build(cfg, seed=0)
    h, w = cfg.input_height // 8, cfg.input_width // 8
    d = 8 * cfg.base_channels
    print(f"params={M.count_params(params)}")
    print(f"flops={M.count_flops(cfg)}")
    print(f"C_MSA={B.complexity_msa(h, w, d)}")
    print(f"C_SW-MSA={B.complexity_swmsa(h, w, d, cfg.window_size, literal=literal)}")
    return 0


def _read_scores(path):
    scores = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        field = line.split(",")[0].strip()
        if not field:
            continue
        try:
            scores.append(float(field))
        except ValueError:
            if i == 0:
                continue  # header line
            raise CliError(f"{path}: non-numeric score {field!r}")
    if not scores:
        raise CliError(f"{path}: no scores found")
    return scores


def _cmd_ttest(args):
    a = _read_scores(args.a)
    b = _read_scores(args.b)
    result = ME.paired_t_test(a, b)
    print(f"t={result.t:.4f} df={result.df} p={result.p:.4f}")
    if args.out:
        ME.write_t_test_csv(
            args.out, [(Path(args.a).stem, Path(args.b).stem, result)]
        )
    return 0


def _cmd_ablate(args):
    rows = TR.ablation_harness(args.mode, seed=args.seed)
    csv_text = TR.ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
    print(csv_text, end="")
    return 0


def build_parser():
    parser = Parser(prog="hybridseg", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--spec", help="flat key=value spec file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a spec value (repeatable)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="flat key=value model+training config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="metrics CSV path")
    p.add_argument("--overlay-dir", help="write per-image overlays here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("predict", help="segment a single PGM/PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask path")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="finite-difference validation of gradients")
    p.add_argument("--scope", choices=("ops", "blocks", "model"),
                   required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("complexity",
                       help="parameter, FLOP, and attention cost counters")
    p.add_argument("--config", help="model config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--h", type=int, help="attention grid height (direct mode)")
    p.add_argument("--w", type=int, help="attention grid width (direct mode)")
    p.add_argument("--d", type=int, help="embedding dimension (direct mode)")
    p.add_argument("--n", type=int, help="window size (direct mode)")
    p.add_argument("--literal-eq15", action="store_true",
                   help="use the quadratic window-attention count variant")
    p.set_defaults(fn=_cmd_complexity)

    p = sub.add_parser("ttest", help="paired t-test between two score files")
    p.add_argument("--a", required=True, help="scores file, one per line")
    p.add_argument("--b", required=True)
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(fn=_cmd_ttest)

    p = sub.add_parser("ablate", help="run an ablation table")
    p.add_argument("--mode", choices=("placement", "loss_combo", "transfer"),
                   required=True)
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_ablate)
    return parser


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.fn(args)
    except (FileNotFoundError, OSError, FormatError) as exc:
        print(f"hybridseg: io error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ValueError, KeyError, ShapeError, NonFiniteError) as exc:
        print(f"hybridseg: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
