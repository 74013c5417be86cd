"""A tiny deterministic raw-YUV codec for exercising the pipeline without HM.

Samples are quantised with an HEVC-like step ``2 ** ((qp - 4) / 6)``, DPCM
coded along rows and deflated. Usage::

    python -m sra.toycodec encode IN.yuv OUT.bin --width W --height H --bitdepth 10 --frames N --qp 32
    python -m sra.toycodec decode IN.bin OUT.yuv
"""

import argparse
import struct
import sys
import zlib

import numpy as np

from .image import YUV420, read_yuv, write_yuv, Frame, max_value, round_half_up

MAGIC = b"TOYC"


def qstep(qp):
    return 2.0 ** ((qp - 4) / 6.0)


def encode(frames, qp):
    f0 = frames[0]
    head = MAGIC + struct.pack("<HHBHB", f0.width, f0.height, f0.bit_depth, len(frames), qp)
    step = qstep(qp)
    chunks = []
    for f in frames:
        for p in f.planes:
            q = round_half_up(p / step).astype(np.int32)
            d = np.diff(q, axis=1, prepend=0)
            chunks.append(d.astype("<i4").tobytes())
    return head + zlib.compress(b"".join(chunks), 9)


def decode(data):
    if data[:4] != MAGIC:
        raise ValueError("not a toy codec bitstream")
    w, h, bd, n, qp = struct.unpack("<HHBHB", data[4:12])
    raw = np.frombuffer(zlib.decompress(data[12:]), dtype="<i4")
    step = qstep(qp)
    top = max_value(bd)
    shapes = [(h, w), (h // 2, w // 2), (h // 2, w // 2)]
    frames, pos = [], 0
    for _ in range(n):
        planes = []
        for shape in shapes:
            size = shape[0] * shape[1]
            q = np.cumsum(raw[pos:pos + size].reshape(shape), axis=1)
            pos += size
            planes.append(np.clip(round_half_up(q * step), 0, top))
        frames.append(Frame(w, h, bd, YUV420, tuple(planes)))
    return frames


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m sra.toycodec")
    sub = ap.add_subparsers(dest="cmd", required=True)
    enc = sub.add_parser("encode")
    enc.add_argument("input")
    enc.add_argument("output")
    enc.add_argument("--width", type=int, required=True)
    enc.add_argument("--height", type=int, required=True)
    enc.add_argument("--bitdepth", type=int, default=10)
    enc.add_argument("--frames", type=int, default=1)
    enc.add_argument("--qp", type=int, required=True)
    dec = sub.add_parser("decode")
    dec.add_argument("input")
    dec.add_argument("output")
    args = ap.parse_args(argv)
    if args.cmd == "encode":
        frames = read_yuv(args.input, args.width, args.height, args.bitdepth, YUV420, args.frames)
        data = encode(frames, args.qp)
        with open(args.output, "wb") as fh:
            fh.write(data)
        print(f"encoded {len(frames)} frame(s) at qp {args.qp}: {len(data)} bytes")
    else:
        with open(args.input, "rb") as fh:
            write_yuv(args.output, decode(fh.read()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
