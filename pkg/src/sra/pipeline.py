"""Spatial resolution adaptation around an external codec.

Four scenarios plus the anchor::

    anchor  full-resolution encode at the base QP
    s1      Lanczos3 down,  Lanczos3 up
    s2      DSNet down,     Lanczos3 up
    s3      Lanczos3 down,  plug-in up-sampler
    s4      DSNet down,     plug-in up-sampler

When resolution adaptation is active for a QP the encoder runs on the
half-resolution video at ``base_qp + qp_offset`` (default -6).
"""

from __future__ import annotations

import enum
import hashlib
import importlib
import json
import logging
import math
import os
import re
import shlex
import subprocess
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import plotting
from .dsnet import DSNetConfig, ModelWeights, dsnet_forward, load_weights
from .image import (
    YUV420, Frame, convert_420_to_444, convert_444_to_420,
    frame_to_tensor, read_yuv, tensor_to_frame, write_yuv, frame_nbytes,
)
from .metrics import RDCurve, bd_rate, sequence_psnr, timing_report
from .resample import DOWN, UP, FilterKind, resample_frame
from .tiling import TILE_OVERLAP, TILE_SIZE, aggregate_tiles, extract_tiles

log = logging.getLogger(__name__)

DEFAULT_QPS = (27, 32, 37, 42)
QP_OFFSET = -6


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


class CodecError(PipelineError):
    def __init__(self, msg, output=""):
        super().__init__(f"{msg}\n{output}" if output else msg)
        self.output = output


class Scenario(str, enum.Enum):
    ANCHOR = "anchor"
    S1_L3DOWN_L3UP = "s1"
    S2_CNNDOWN_L3UP = "s2"
    S3_L3DOWN_CNNUP = "s3"
    S4_CNNDOWN_CNNUP = "s4"

    @property
    def cnn_down(self):
        return self in (Scenario.S2_CNNDOWN_L3UP, Scenario.S4_CNNDOWN_CNNUP)

    @property
    def plugin_up(self):
        return self in (Scenario.S3_L3DOWN_CNNUP, Scenario.S4_CNNDOWN_CNNUP)


@dataclass(frozen=True)
class VideoSpec:
    path: str
    width: int
    height: int
    bit_depth: int = 10
    frames: int = 1
    fps: float = 30.0


@dataclass
class CodecAdapter:
    """Encoder/decoder driven through command templates.

    Placeholders: {input} {output} {bitstream} {qp} {width} {height}
    {bitdepth} {frames}. Bitrate comes from the bitstream size, or from the
    first group of ``log_regex`` matched against the encoder's output (kbps).
    """

    encode_cmd: str
    decode_cmd: str
    bitrate_source: str = "bitstream_size"
    log_regex: Optional[str] = None

    def __post_init__(self):
        if self.bitrate_source not in ("bitstream_size", "encoder_log_regex"):
            raise ConfigError(f"unknown bitrate source {self.bitrate_source!r}")
        if self.bitrate_source == "encoder_log_regex" and not self.log_regex:
            raise ConfigError("encoder_log_regex needs log_regex")
        for tmpl, need in ((self.encode_cmd, ("{input}", "{bitstream}")),
                           (self.decode_cmd, ("{bitstream}", "{output}"))):
            for ph in need:
                if ph not in tmpl:
                    raise ConfigError(f"command template {tmpl!r} lacks {ph}")

    @staticmethod
    def _run(template, values):
        argv = [tok.format(**values) for tok in shlex.split(template)]
        t0 = time.perf_counter()
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except OSError as e:
            raise CodecError(f"cannot run {argv[0]!r}: {e}") from None
        elapsed = time.perf_counter() - t0
        out = proc.stdout + proc.stderr
        if proc.returncode != 0:
            raise CodecError(f"{' '.join(argv)} exited with {proc.returncode}", out)
        return out, elapsed

    def encode(self, src, bitstream, qp, width, height, bit_depth, frames):
        values = dict(input=src, output="", bitstream=bitstream, qp=qp, width=width,
                      height=height, bitdepth=bit_depth, frames=frames)
        return self._run(self.encode_cmd, values)

    def decode(self, bitstream, dst, width, height, bit_depth, frames, qp=0):
        values = dict(input="", output=dst, bitstream=bitstream, qp=qp, width=width,
                      height=height, bitdepth=bit_depth, frames=frames)
        return self._run(self.decode_cmd, values)

    def bitrate_kbps(self, bitstream, encoder_log, frames, fps):
        if self.bitrate_source == "encoder_log_regex":
            m = re.search(self.log_regex, encoder_log)
            if not m:
                raise CodecError(f"bitrate pattern {self.log_regex!r} not found in encoder log",
                                 encoder_log)
            return float(m.group(1))
        return os.path.getsize(bitstream) * 8 / (frames / fps) / 1000.0


@dataclass
class ScenarioConfig:
    scenario: Scenario
    codec: CodecAdapter
    base_qps: List[int] = field(default_factory=lambda: list(DEFAULT_QPS))
    qp_offset_when_sra: int = QP_OFFSET
    weights_path: Optional[str] = None
    upsampler_plugin: Optional[str] = None
    force_sra: bool = True
    sra_table: Dict[int, bool] = field(default_factory=dict)
    lrelu_slope: float = 0.2
    tile_batch: int = 8

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if self.scenario.cnn_down and not self.weights_path:
            raise ConfigError(f"scenario {self.scenario.value} needs weights_path")
        if self.scenario.plugin_up and not self.upsampler_plugin:
            raise ConfigError(f"scenario {self.scenario.value} needs upsampler_plugin")
        if not self.base_qps:
            raise ConfigError("no base QPs")

    def to_dict(self):
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["sra_table"] = {str(k): v for k, v in self.sra_table.items()}
        return d


def sra_decision(force_sra: bool, base_qp: int, table: Optional[Dict[int, bool]] = None) -> bool:
    """Whether to adapt resolution at ``base_qp``.

    Placeholder for a learned per-sequence decision: a per-QP table entry wins,
    otherwise ``force_sra``. When False the sequence is coded at full
    resolution with the base QP.
    """
    if table and base_qp in table:
        return bool(table[base_qp])
    return bool(force_sra)


# -- resamplers ---------------------------------------------------------------

def lanczos_down(f: Frame) -> Frame:
    return resample_frame(f, DOWN, FilterKind.LANCZOS3)


def lanczos_up(f: Frame) -> Frame:
    return resample_frame(f, UP, FilterKind.LANCZOS3)


def tiled_downsample_tensor(f: Frame, block_fn: Callable[[np.ndarray], np.ndarray],
                            batch: int = 8, tile_size=TILE_SIZE, overlap=TILE_OVERLAP):
    """Half-resolution 4:4:4 float tensor from per-block down-sampling.

    The frame is cut into overlapping blocks, ``block_fn`` maps an
    (N, 3, s, s) batch to (N, 3, s/2, s/2), and the outputs are averaged
    back together on the halved grid.
    """
    if f.format == YUV420:
        f = convert_420_to_444(f)
    tiles, grid = extract_tiles(frame_to_tensor(f), tile_size, overlap)
    outs = []
    for i in range(0, len(tiles), batch):
        outs.extend(block_fn(np.stack(tiles[i:i + batch])))
    return aggregate_tiles(outs, grid.halved())


def tensor_to_420(t: np.ndarray, bit_depth: int) -> Frame:
    return convert_444_to_420(tensor_to_frame(t, bit_depth))


def cnn_down(f: Frame, weights: ModelWeights, cfg: DSNetConfig, batch: int = 8) -> Frame:
    t = tiled_downsample_tensor(f, lambda x: dsnet_forward(x, weights, cfg), batch)
    return tensor_to_420(t, f.bit_depth)


def load_plugin(spec: str) -> Callable[[Frame], Frame]:
    """Import ``module:callable``; the callable maps a half-size Frame to full size."""
    mod, _, attr = spec.partition(":")
    if not attr:
        raise ConfigError(f"plugin {spec!r} must look like 'module:function'")
    try:
        fn = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load up-sampler plugin {spec!r}: {e}") from None
    if not callable(fn):
        raise ConfigError(f"plugin {spec!r} is not callable")
    return fn


# -- runs -----------------------------------------------------------------------

@dataclass
class QPResult:
    base_qp: int
    qp: int
    sra: bool
    bitrate_kbps: float
    psnr_db: float
    timings: Dict[str, float]


@dataclass
class ScenarioRun:
    scenario: str
    source_sha256: str
    results: List[QPResult]
    run_dir: Optional[str] = None

    @property
    def timings(self) -> Dict[str, float]:
        total: Dict[str, float] = {}
        for r in self.results:
            for k, v in r.timings.items():
                total[k] = total.get(k, 0.0) + v
        return total

    def points(self):
        return [(r.bitrate_kbps, r.psnr_db) for r in self.results]

    def curve(self) -> RDCurve:
        return RDCurve([p for p in self.points() if math.isfinite(p[1])])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_rd(results: List[QPResult]) -> str:
    return "".join(f"{r.qp} {r.bitrate_kbps:.6f} {r.psnr_db:.10f}\n" for r in results)


def run_scenario(video: VideoSpec, cfg: ScenarioConfig, run_dir) -> ScenarioRun:
    """Down-sample, encode, decode, up-sample and score every base QP.

    Artifacts go to ``run_dir/qp<base>/``; the run directory also receives
    ``rd_curve.txt`` (``qp bitrate_kbps psnr_db`` per line), ``rd_curve.png``
    and ``manifest.json``.
    """
    os.makedirs(run_dir, exist_ok=True)
    source = read_yuv(video.path, video.width, video.height, video.bit_depth, YUV420, video.frames)
    sra_any = cfg.scenario is not Scenario.ANCHOR and any(
        sra_decision(cfg.force_sra, q, cfg.sra_table) for q in cfg.base_qps)
    if sra_any and (video.width % 4 or video.height % 4):
        raise PipelineError(
            f"{video.width}x{video.height} cannot be halved to an even 4:2:0 frame")

    down_fn = up_fn = None
    down_stage = "downsample"
    if cfg.scenario.cnn_down:
        weights, net_cfg = load_weights(cfg.weights_path, lrelu_slope=cfg.lrelu_slope)
        down_fn = lambda f: cnn_down(f, weights, net_cfg, cfg.tile_batch)  # noqa: E731
        down_stage = "inference"
    elif cfg.scenario is not Scenario.ANCHOR:
        down_fn = lanczos_down
    if cfg.scenario.plugin_up:
        up_fn = load_plugin(cfg.upsampler_plugin)
    elif cfg.scenario is not Scenario.ANCHOR:
        up_fn = lanczos_up

    results = []
    for base_qp in cfg.base_qps:
        sra = cfg.scenario is not Scenario.ANCHOR and sra_decision(
            cfg.force_sra, base_qp, cfg.sra_table)
        qp = base_qp + cfg.qp_offset_when_sra if sra else base_qp
        qdir = os.path.join(run_dir, f"qp{base_qp}")
        os.makedirs(qdir, exist_ok=True)
        timings: Dict[str, float] = {}

        if sra:
            t0 = time.perf_counter()
            coded = [down_fn(f) for f in source]
            timings[down_stage] = time.perf_counter() - t0
            enc_in = os.path.join(qdir, "lowres.yuv")
            write_yuv(enc_in, coded)
        else:
            enc_in = video.path
        w, h = (video.width // 2, video.height // 2) if sra else (video.width, video.height)

        bitstream = os.path.join(qdir, "bitstream.bin")
        dec_out = os.path.join(qdir, "decoded.yuv")
        enc_log, timings["encode"] = cfg.codec.encode(
            enc_in, bitstream, qp, w, h, video.bit_depth, video.frames)
        _, timings["decode"] = cfg.codec.decode(
            bitstream, dec_out, w, h, video.bit_depth, video.frames, qp)
        expected = frame_nbytes(w, h, video.bit_depth, YUV420) * video.frames
        if not os.path.exists(dec_out) or os.path.getsize(dec_out) != expected:
            got = os.path.getsize(dec_out) if os.path.exists(dec_out) else 0
            raise PipelineError(
                f"decoded file {dec_out} has {got} bytes, expected {expected} "
                f"for {video.frames} frame(s) of {w}x{h}")
        decoded = read_yuv(dec_out, w, h, video.bit_depth, YUV420, video.frames)

        if sra:
            t0 = time.perf_counter()
            recon = [up_fn(f) for f in decoded]
            timings["upsample"] = time.perf_counter() - t0
            for r in recon:
                if (r.width, r.height) != (video.width, video.height):
                    raise PipelineError(
                        f"up-sampler returned {r.width}x{r.height}, "
                        f"expected {video.width}x{video.height}")
            write_yuv(os.path.join(qdir, "recon.yuv"), recon)
        else:
            recon = decoded

        bitrate = cfg.codec.bitrate_kbps(bitstream, enc_log, video.frames, video.fps)
        psnr = sequence_psnr(source, recon)
        log.info("%s qp %d (base %d): %.3f kbps, %.4f dB", cfg.scenario.value, qp,
                 base_qp, bitrate, psnr)
        results.append(QPResult(base_qp, qp, sra, bitrate, psnr, timings))

    run = ScenarioRun(cfg.scenario.value, file_sha256(video.path), results, str(run_dir))
    write_run(run, video, cfg)
    return run


def write_run(run: ScenarioRun, video: VideoSpec, cfg: ScenarioConfig) -> None:
    with open(os.path.join(run.run_dir, "rd_curve.txt"), "w") as fh:
        fh.write(format_rd(run.results))
    config = cfg.to_dict()
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "scenario": run.scenario,
        "input": {**asdict(video), "sha256": run.source_sha256},
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "results": [asdict(r) for r in run.results],
        "stage_timings": run.timings,
    }
    with open(os.path.join(run.run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    plotting.plot_rd_curves({run.scenario: run.points()},
                            os.path.join(run.run_dir, "rd_curve.png"), title=run.scenario)


def load_run(run_dir) -> ScenarioRun:
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        m = json.load(fh)
    results = [QPResult(**r) for r in m["results"]]
    return ScenarioRun(m["scenario"], m["input"]["sha256"], results, str(run_dir))


def compare_scenarios(anchor: ScenarioRun, test: ScenarioRun, out_dir=None) -> Dict[str, float]:
    """BD-rate of ``test`` against ``anchor`` plus encoder/decoder time ratios."""
    if anchor.source_sha256 != test.source_sha256:
        raise ValueError("runs were made on different source videos")
    report = {"bd_rate_percent": bd_rate(anchor.curve(), test.curve())}
    ratios = timing_report(anchor.timings, test.timings)
    report["enc_ratio"] = ratios["enc_ratio"]
    report["dec_ratio"] = ratios["dec_ratio"]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "comparison.txt"), "w") as fh:
            fh.write(format_report(report))
        plotting.plot_rd_curves({anchor.scenario: anchor.points(), test.scenario: test.points()},
                                os.path.join(out_dir, "rd_compare.png"),
                                title=f"{test.scenario} vs {anchor.scenario}")
        plotting.plot_stage_times({anchor.scenario: anchor.timings, test.scenario: test.timings},
                                  os.path.join(out_dir, "stage_times.png"))
    return report


def format_report(report: Dict[str, float]) -> str:
    return "".join(f"{k} {report[k]:.6f}\n" for k in ("bd_rate_percent", "enc_ratio", "dec_ratio"))
