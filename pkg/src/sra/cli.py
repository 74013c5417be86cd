"""Command line entry point: ``sra <subcommand> ...`` (or ``python -m sra``).

Any option can also come from a TOML file given with ``--config``. Top-level
keys apply to every subcommand, a ``[<subcommand>]`` table to that one only;
keys are option names with dashes or underscores. Command-line flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dsnet, image, metrics, pipeline, plotting, resample, synthetic, tiling, training

log = logging.getLogger("sra")


class UsageError(Exception):
    pass


def _geometry(p, frames=True):
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--bit-depth", type=int, default=10)
    if frames:
        p.add_argument("--frames", type=int, default=1)


def _model_flags(p):
    d = dsnet.DSNetConfig()
    p.add_argument("--num-rdb", type=int, default=d.num_rdb)
    p.add_argument("--base-channels", type=int, default=d.base_channels)
    p.add_argument("--rdb-layers", type=int, default=d.rdb_layers)
    p.add_argument("--rdb-growth", type=int, default=d.rdb_growth)
    p.add_argument("--lrelu-slope", type=float, default=d.lrelu_slope)
    p.add_argument("--tiny", action="store_true",
                   help="use the 2-RDB, 8-channel configuration")


def _model_cfg(a) -> dsnet.DSNetConfig:
    if a.tiny:
        return dsnet.TINY
    return dsnet.DSNetConfig(a.num_rdb, a.base_channels, a.rdb_layers, a.rdb_growth, a.lrelu_slope)


def build_parser():
    ap = argparse.ArgumentParser(prog="sra", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML file with option defaults")
    ap.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command")
    subs = {}

    p = subs["resample"] = sub.add_parser("resample", help="2x down/up-sample a raw 4:2:0 file")
    p.add_argument("--input")
    p.add_argument("--output")
    _geometry(p)
    p.add_argument("--direction", choices=("down", "up"), default="down")
    p.add_argument("--filter", choices=[k.value for k in resample.FilterKind], default="lanczos3")

    p = subs["infer"] = sub.add_parser("infer", help="DSNet down-sampling of a raw 4:2:0 file")
    p.add_argument("--input")
    p.add_argument("--output")
    _geometry(p)
    p.add_argument("--weights")
    p.add_argument("--lrelu-slope", type=float, default=0.2)
    p.add_argument("--tile-batch", type=int, default=8)

    p = subs["train"] = sub.add_parser("train", help="train DSNet on 96x96 blocks")
    p.add_argument("--input", help="raw 4:2:0 training video; synthetic content if omitted")
    _geometry(p)
    p.add_argument("--synthetic-frames", type=int, default=4)
    p.add_argument("--blocks", type=int, default=32)
    p.add_argument("--out", default="dsnet", help="checkpoint prefix")
    p.add_argument("--init", help="start from this weight file")
    t = training.TrainConfig()
    p.add_argument("--lambda", dest="lam", type=float, default=t.lam)
    p.add_argument("--omega", type=float, default=t.omega)
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--steps", type=int, default=None, help="stop after this many updates")
    p.add_argument("--l2", type=float, default=0.0)
    _model_flags(p)

    p = subs["metrics"] = sub.add_parser("metrics", help="luma PSNR and MS-SSIM of two raw files")
    p.add_argument("--ref")
    p.add_argument("--test")
    _geometry(p)

    p = subs["bdrate"] = sub.add_parser("bdrate", help="BD-rate between two RD text files")
    p.add_argument("anchor")
    p.add_argument("test")

    p = subs["pipeline"] = sub.add_parser("pipeline", help="run one scenario over the QP set")
    p.add_argument("--input")
    _geometry(p)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--scenario", choices=[s.value for s in pipeline.Scenario], default="s2")
    p.add_argument("--qps", default=",".join(map(str, pipeline.DEFAULT_QPS)))
    p.add_argument("--qp-offset", type=int, default=pipeline.QP_OFFSET)
    p.add_argument("--weights")
    p.add_argument("--upsampler", help="module:function up-sampler plug-in (s3/s4)")
    p.add_argument("--encode-cmd")
    p.add_argument("--decode-cmd")
    p.add_argument("--bitrate-source", choices=("bitstream_size", "encoder_log_regex"),
                   default="bitstream_size")
    p.add_argument("--log-regex")
    p.add_argument("--no-sra", action="store_true", help="never adapt resolution")
    p.add_argument("--sra-table", default="", help="per-QP overrides, e.g. '37:true,42:false'")
    p.add_argument("--lrelu-slope", type=float, default=0.2)
    p.add_argument("--run-dir", default="run")
    p.add_argument("--anchor", help="anchor run directory to compare against")

    p = subs["compare"] = sub.add_parser("compare", help="BD-rate and time ratios of two runs")
    p.add_argument("anchor_dir")
    p.add_argument("test_dir")
    p.add_argument("--out")

    p = subs["weights"] = sub.add_parser("weights", help="inspect or create weight files")
    wsub = p.add_subparsers(dest="weights_command", metavar="action")
    q = wsub.add_parser("inspect")
    q.add_argument("path")
    q.add_argument("--lrelu-slope", type=float, default=0.2)
    q = wsub.add_parser("init")
    q.add_argument("path")
    q.add_argument("--zero", action="store_true")
    _model_flags(q)
    return ap, subs


def _need(a, *names):
    missing = [n for n in names if getattr(a, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(
            "--" + n.replace("_", "-") for n in missing))


def _load_config(path, command, subs):
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    defaults = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    section = data.get(command, {})
    defaults.update({k.replace("-", "_"): v for k, v in section.items()})
    if isinstance(defaults.get("qps"), list):
        defaults["qps"] = ",".join(map(str, defaults["qps"]))
    return defaults


# -- commands -----------------------------------------------------------------

def cmd_resample(a):
    _need(a, "input", "output", "width", "height")
    frames = image.read_yuv(a.input, a.width, a.height, a.bit_depth, image.YUV420, a.frames)
    image.write_yuv(a.output, [resample.resample_frame(f, a.direction, a.filter) for f in frames])


def cmd_infer(a):
    _need(a, "input", "output", "width", "height", "weights")
    w, cfg = dsnet.load_weights(a.weights, lrelu_slope=a.lrelu_slope)
    frames = image.read_yuv(a.input, a.width, a.height, a.bit_depth, image.YUV420, a.frames)
    image.write_yuv(a.output, [pipeline.cnn_down(f, w, cfg, a.tile_batch) for f in frames])


def cmd_train(a):
    model_cfg = _model_cfg(a)
    if a.input:
        _need(a, "width", "height")
        frames = image.read_yuv(a.input, a.width, a.height, a.bit_depth, image.YUV420, a.frames)
    else:
        frames = [synthetic.textured_frame(256, 256, seed=a.seed + i)
                  for i in range(a.synthetic_frames)]
    blocks = tiling.extract_training_blocks(frames, tiling.TILE_SIZE, a.blocks, a.seed)
    cfg = training.TrainConfig(lam=a.lam, omega=a.omega, learning_rate=a.lr,
                               batch_size=a.batch_size, epochs=a.epochs, l2=a.l2,
                               seed=a.seed, max_steps=a.steps)
    init = dsnet.load_weights(a.init, model_cfg)[0] if a.init else None
    start = training.evaluate(init or dsnet.init_weights(model_cfg, a.seed), blocks, model_cfg, cfg)
    res = training.train(blocks, cfg, model_cfg, init)
    end = training.evaluate(res.weights, blocks, model_cfg, cfg)
    paths = training.save_checkpoint(a.out, res.weights, res.state, cfg)
    with open(a.out + ".loss.txt", "w") as fh:
        fh.write("epoch total distortion rate_mse rate_msssim\n")
        for i, t in enumerate(res.history):
            fh.write(f"{i} {t.total:.9g} {t.distortion:.9g} {t.rate_mse:.9g} {t.rate_msssim:.9g}\n")
    plotting.plot_loss_history([t.total for t in res.history], a.out + ".loss.png")
    print(f"steps {res.steps}")
    print(f"initial_loss {start.total:.9g}")
    print(f"final_loss {end.total:.9g}")
    print(f"weights {paths[0]}")


def cmd_metrics(a):
    _need(a, "ref", "test", "width", "height")
    ref = image.read_yuv(a.ref, a.width, a.height, a.bit_depth, image.YUV420, a.frames)
    test = image.read_yuv(a.test, a.width, a.height, a.bit_depth, image.YUV420, a.frames)
    psnr = metrics.sequence_psnr(ref, test)
    top = image.max_value(a.bit_depth)
    ms = np.mean([metrics.ms_ssim(r.y / top, t.y / top) for r, t in zip(ref, test)])
    print("psnr_y " + ("lossless" if psnr == metrics.LOSSLESS else f"{psnr:.6f}"))
    print(f"ms_ssim_y {ms:.9f}")


def cmd_bdrate(a):
    value = metrics.bd_rate(metrics.read_rd_file(a.anchor), metrics.read_rd_file(a.test))
    print(f"bd_rate_percent {value:.6f}")


def _parse_table(text):
    table = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        qp, _, flag = item.partition(":")
        if flag.lower() not in ("true", "false", "1", "0", "on", "off"):
            raise UsageError(f"bad --sra-table entry {item!r}")
        table[int(qp)] = flag.lower() in ("true", "1", "on")
    return table


def cmd_pipeline(a):
    _need(a, "input", "width", "height", "encode_cmd", "decode_cmd")
    codec = pipeline.CodecAdapter(a.encode_cmd, a.decode_cmd, a.bitrate_source, a.log_regex)
    cfg = pipeline.ScenarioConfig(
        scenario=a.scenario, codec=codec,
        base_qps=[int(q) for q in str(a.qps).split(",") if q.strip()],
        qp_offset_when_sra=a.qp_offset, weights_path=a.weights,
        upsampler_plugin=a.upsampler, force_sra=not a.no_sra,
        sra_table=_parse_table(a.sra_table), lrelu_slope=a.lrelu_slope)
    video = pipeline.VideoSpec(a.input, a.width, a.height, a.bit_depth, a.frames, a.fps)
    run = pipeline.run_scenario(video, cfg, a.run_dir)
    sys.stdout.write(pipeline.format_rd(run.results))
    if a.anchor:
        report = pipeline.compare_scenarios(pipeline.load_run(a.anchor), run, a.run_dir)
        sys.stdout.write(pipeline.format_report(report))


def cmd_compare(a):
    report = pipeline.compare_scenarios(pipeline.load_run(a.anchor_dir),
                                        pipeline.load_run(a.test_dir), a.out)
    sys.stdout.write(pipeline.format_report(report))


def cmd_weights(a):
    if a.weights_command == "inspect":
        w, cfg = dsnet.load_weights(a.path, lrelu_slope=a.lrelu_slope)
        for name, p in w.items():
            print(f"{name} {'x'.join(map(str, p.weight.shape))} stride {p.stride}")
        print(f"config num_rdb={cfg.num_rdb} base_channels={cfg.base_channels} "
              f"rdb_layers={cfg.rdb_layers} rdb_growth={cfg.rdb_growth}")
        print(f"param_count {dsnet.param_count(cfg)}")
    elif a.weights_command == "init":
        cfg = _model_cfg(a)
        w = dsnet.zero_weights(cfg) if a.zero else dsnet.init_weights(cfg, a.seed)
        dsnet.save_weights(w, a.path)
        print(f"param_count {dsnet.param_count(cfg)}")
    else:
        raise UsageError("weights needs an action: inspect or init")


COMMANDS = {
    "resample": cmd_resample, "infer": cmd_infer, "train": cmd_train,
    "metrics": cmd_metrics, "bdrate": cmd_bdrate, "pipeline": cmd_pipeline,
    "compare": cmd_compare, "weights": cmd_weights,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap, subs = build_parser()
    try:
        pre, _ = ap.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if pre.command is None:
        ap.print_help()
        return 2
    try:
        if pre.config:
            defaults = _load_config(pre.config, pre.command, subs)
            if "seed" in defaults:
                ap.set_defaults(seed=defaults.pop("seed"))
            subs[pre.command].set_defaults(**defaults)
        a = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, tomllib.TOMLDecodeError) as e:
        print(f"sra: error: config: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(a.seed)
    try:
        COMMANDS[a.command](a)
    except UsageError as e:
        subs[a.command].print_usage(sys.stderr)
        print(f"sra {a.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"sra {a.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
