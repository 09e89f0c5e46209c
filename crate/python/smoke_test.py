"""Smoke test for the pcac Python module.

Build and run:

    cargo build --release -p pcac-py
    cp target/release/libpcac.so python/pcac.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pcac  # noqa: E402


def main():
    seq = pcac.Sequence.synthetic(frames=3)
    assert len(seq) == 3
    frame = seq.frame(0)
    print("frame:", frame)

    model = pcac.Model(0.1, seed=1, narrow=8, wide=8, latent=8, res_blocks=1)
    print("model params:", model.parameter_count(), "id", model.model_id()[:16])

    i = pcac.encode_frame(frame, model)
    assert i.is_intra
    data = i.to_bytes()
    rec, lat = pcac.decode_frame(data, frame, model)
    assert rec == i.reconstruction
    assert lat.symbols() == i.latent.symbols()

    p = pcac.encode_frame(seq.frame(1), model, temporal=i.latent)
    assert not p.is_intra
    rec1, _ = pcac.decode_frame(p.to_bytes(), seq.frame(1), model, temporal=lat)
    assert rec1 == p.reconstruction
    print("I bpp %.3f, P bpp %.3f" % (i.bpp, p.bpp))

    q = pcac.psnr(frame, rec)
    print("PSNR-Y %.2f dB" % q["y"])

    blob, stats = pcac.encode_sequence(seq, model, gop=2)
    frames = pcac.decode_sequence(blob, seq, model)
    assert len(frames) == 3 and [s["intra"] for s in stats] == [True, False, True]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.pcac")
        model.save(path)
        assert pcac.Model.load(path).model_id() == model.model_id()
        frame.write_ply(os.path.join(d, "f.ply"))
        assert pcac.Frame.load_ply(os.path.join(d, "f.ply")) == frame

    anchor = [(0.1, 30.0, 31.0), (0.2, 33.0, 34.0), (0.4, 36.0, 37.0), (0.8, 39.0, 40.0)]
    test = [(r * 0.9, y, yuv) for r, y, yuv in anchor]
    bd = pcac.bd_metrics(anchor, test)
    assert abs(bd["bd_rate_y"] + 10.0) < 1e-6, bd
    print("BD-rate %.3f%%" % bd["bd_rate_y"])

    trained, log = pcac.train(
        [pcac.Sequence.synthetic(frames=4)],
        1.0,
        "narrow=4\nwide=4\nlatent=4\nres_blocks=0\nmax_epochs=2\nbatches_per_epoch=1\ncrop_size=16\n",
    )
    assert len(log) == 2 and trained.lam == 1.0
    print("ok")


if __name__ == "__main__":
    main()
