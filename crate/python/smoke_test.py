"""Smoke test for the sdcodec Python bindings.

Build and install the extension first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/sdcodec-*.whl

Then run `python python/smoke_test.py`. Exits non-zero on the first failure.
"""

import math
import os
import sys
import tempfile

import sdcodec


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    check(sdcodec.SOURCES == ["speech", "music", "sfx"], "source list")

    toy = sdcodec.Config.preset("toy")
    paper = sdcodec.Config.preset("paper")
    check(paper.bits_per_second(1) == 6000.0, "one source at 6 kbit/s")
    check(paper.bits_per_second(3) == 18000.0, "three sources at 18 kbit/s")
    check(sdcodec.Config.from_toml(toy.to_toml()) == toy, "config text round trip")
    try:
        sdcodec.Config.from_toml("version = 1\n[train]\ngamma = 1.5\n")
        check(False, "invalid gamma rejected")
    except sdcodec.ConfigError as e:
        check("train.gamma" in str(e), "invalid gamma rejected")

    check(abs(sdcodec.si_sdr([1.0, 1.0], [1.0, 0.0])) < 1e-9, "SI-SDR hand case")
    sine = [math.sin(2 * math.pi * 997 * i / 16000) for i in range(5 * 16000)]
    check(abs(sdcodec.measure_lufs(sine) + 3.01) < 0.1, "997 Hz sine loudness")

    codec = sdcodec.Codec(toy, seed=0)
    check(codec.num_params > 0, "untrained toy codec")
    x = sdcodec.synth_source("speech", duration=1.0, seed=3)
    stream = codec.encode(x)
    header = sdcodec.unpack(stream)
    check(header["num_samples"] == len(x), "header length")
    check(len(stream) == 30 + header["payload_bits"] // 8, "stream size")
    check(len(codec.decode(stream)) == len(x), "decode length")
    speech_only = codec.encode(x, sources=["speech"])
    check(len(speech_only) < len(stream), "subset stream is smaller")
    try:
        codec.decode(speech_only, sources=["music"])
        check(False, "missing source rejected")
    except sdcodec.ConfigError:
        check(True, "missing source rejected")
    try:
        sdcodec.unpack(b"garbage bytes")
        check(False, "corrupt stream rejected")
    except sdcodec.FormatError:
        check(True, "corrupt stream rejected")

    parts = codec.separate(x)
    total = [sum(v) for v in zip(*parts.values())]
    err = max(abs(a - b) for a, b in zip(total, x))
    check(sorted(parts) == ["music", "sfx", "speech"] and err < 1e-3, "separation partitions the input")

    with tempfile.TemporaryDirectory() as tmp:
        manifest = sdcodec.synth_data(os.path.join(tmp, "data"), n_items=1, seed=1, duration=1.0)
        check(os.path.exists(manifest), "synthetic corpus")
        table = sdcodec.evaluate(manifest, os.path.join(tmp, "report.jsonl"), segment_s=1.0)
        check("separation" in table, "oracle evaluation")
        wav = os.path.join(tmp, "x.wav")
        sdcodec.write_wav(wav, x)
        y, sr = sdcodec.read_wav(wav)
        check(sr == 16000 and y == x, "float WAV round trip")

    print("smoke test passed")


if __name__ == "__main__":
    main()
