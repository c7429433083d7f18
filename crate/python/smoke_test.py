#!/usr/bin/env python3
"""Smoke test for the icon_py extension module.

Builds nothing itself: it locates the compiled cdylib under target/,
copies it into a temp dir under the importable name, and exercises the
bound API end to end (sampling, thresholding, losses, scene generation,
dataset I/O, encoder forward passes, and a tiny training run).

Run from the repository root after `cargo build -p icon-py`:

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import struct
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_cdylib():
    names = ["libicon_py.so", "libicon_py.dylib", "icon_py.dll"]
    candidates = []
    for profile in ("debug", "release"):
        for name in names:
            p = os.path.join(REPO, "target", profile, name)
            if os.path.exists(p):
                candidates.append(p)
    if not candidates:
        sys.exit("icon_py cdylib not found; run `cargo build -p icon-py` first")
    return max(candidates, key=os.path.getmtime)


def import_icon_py(workdir):
    src = locate_cdylib()
    dst = os.path.join(workdir, "icon_py.so")
    shutil.copyfile(src, dst)
    sys.path.insert(0, workdir)
    import icon_py

    return icon_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def check_sampling(m):
    # 4x4 grid, agent region = left half.
    mask = [1, 1, 0, 0] * 4
    pts = m.fps_indices(mask, 4, 4, 5, seed=3)
    assert len(pts) == 5
    assert len(set(pts)) == 5, "farthest point sampling must not repeat cells"
    for (k, l) in pts:
        assert 1 <= k <= 4 and 1 <= l <= 2, f"cell {(k, l)} outside region"
    assert pts == m.fps_indices(mask, 4, 4, 5, seed=3), "same seed, same result"

    rnd = m.random_indices(mask, 4, 4, 5, seed=3)
    assert len(set(rnd)) == 5
    assert rnd == m.random_indices(mask, 4, 4, 5, seed=3)

    # Budget above the region size must fail.
    try:
        m.fps_indices(mask, 4, 4, 9, seed=0)
    except ValueError:
        pass
    else:
        raise AssertionError("oversized budget should raise")
    print("ok: sampling")


def check_threshold(m):
    # 4x4 image, patch 2: top-left patch fully on, top-right has 1 pixel.
    px = [
        1, 1, 0, 0,
        1, 1, 1, 0,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ]
    assert m.threshold_tokens(px, 4, 4, 2, 0.5) == bytes([1, 0, 0, 0])
    assert m.threshold_tokens(px, 4, 4, 2, 0.0) == bytes([1, 1, 0, 0])
    # Strict inequality: at beta=1 even a fully covered patch stays off.
    assert m.threshold_tokens(px, 4, 4, 2, 1.0) == bytes(4)
    print("ok: threshold")


def check_losses(m):
    # All keys at identical similarity to the query: loss = ln(1 + n_neg).
    q = [1.0, 0.0]
    pos = [[1.0, 0.0]]
    neg = [[1.0, 0.0]] * 3
    approx(m.info_nce(q, pos, neg, tau=0.25, normalize=True), math.log(4.0), 1e-12)

    # One aligned positive, one orthogonal negative, tau=1: the positive
    # competes against the negative and itself, so the denominator is e + 1.
    val = m.info_nce([1.0, 0.0], [[1.0, 0.0]], [[0.0, 1.0]], tau=1.0, normalize=False)
    approx(val, math.log(1.0 + math.exp(-1.0)), 1e-12)

    w = m.layer_weights(4, 0.0)
    approx(sum(w), 1.0, 1e-12)
    assert all(abs(x - 0.25) < 1e-12 for x in w), "gamma=0 is uniform"
    w = m.layer_weights(4, 1.0)
    approx(sum(w), 1.0, 1e-12)
    assert all(w[i] < w[i + 1] for i in range(3)), "positive gamma favors depth"

    # Multi-level loss is deterministic in the seed.
    gh = gw = 3
    dim = 4
    feats = [[math.sin(0.1 * i + j) for i in range(gh * gw * dim)] for j in range(2)]
    tm = [1, 1, 0, 0, 0, 0, 0, 1, 1]
    a = m.icon_loss(feats, tm, gh, gw, dim, n_agent=2, n_env=3, seed=11)
    b = m.icon_loss(feats, tm, gh, gw, dim, n_agent=2, n_env=3, seed=11)
    approx(a, b, 0.0)
    assert a > 0.0
    print("ok: losses")


def check_scene(m):
    img, mask, state = m.scene(seed=5, height=48, width=48)
    assert len(img) == 48 * 48 * 3
    assert len(mask) == 48 * 48
    assert set(mask) <= {0, 1}
    assert len(state) == 5, "centroid (2) + joint angles (3)"
    img2, mask2, state2 = m.scene(seed=5, height=48, width=48)
    assert img == img2 and mask == mask2 and state == state2

    # Centroid in the state matches the mask (pixel centers, normalized).
    rows = cols = cnt = 0
    for r in range(48):
        for c in range(48):
            if mask[r * 48 + c]:
                rows += r + 0.5
                cols += c + 0.5
                cnt += 1
    assert cnt > 0
    approx(state[0], rows / cnt / 48, 1e-6)
    approx(state[1], cols / cnt / 48, 1e-6)
    print("ok: scene")


def check_dataset(m, workdir):
    path = os.path.join(workdir, "tiny.icds")
    m.make_dataset(path, 4, seed=9, height=40, width=40)
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, n, h, w, c, k = struct.unpack("<4sIIIIII", raw[:28])
    assert magic == b"ICDS" and version == 1
    assert (n, h, w, c, k) == (4, 40, 40, 3, 5)
    assert len(raw) == 28 + n * (h * w * c + h * w + 4 * k)
    print("ok: dataset")


def check_encoder(m, workdir):
    enc = m.Encoder(seed=2, height=32, width=32, patch=8, dim=16, layers=2, heads=2)
    gh, gw, dim = enc.grid
    assert (gh, gw, dim) == (4, 4, 16)
    assert enc.n_params > 0

    img, mask, _ = m.scene(seed=7, height=32, width=32)
    f1 = enc.features(img, 2)
    assert len(f1) == gh * gw * dim
    assert f1 == enc.features(img, 2), "forward pass must be deterministic"
    assert f1 != enc.features(img, 1), "layers differ"

    att = enc.attention(img, 2)
    assert len(att) == gh * gw
    assert all(a >= 0.0 for a in att)
    # The row omits the [CLS] self-attention share, so it sums to < 1.
    assert 0.0 < sum(att) < 1.0 + 1e-12
    cls = enc.cls(img)
    assert len(cls) == dim
    print("ok: encoder")


def check_training(m, workdir):
    data = os.path.join(workdir, "train.icds")
    # Frames must be large enough for the default arm; training crops to
    # the encoder size.
    m.make_dataset(data, 10, seed=1, height=48, width=48)
    cfg = {
        "vit": {"height": 16, "width": 16, "patch": 4, "dim": 8, "layers": 2, "heads": 2},
        "contrast": {"n_agent": 2, "n_env": 6},
        "batch_size": 4,
        "epochs": 2,
        "eval_samples": 2,
        "seed": 0,
        "dataset": data,
    }
    ckpt = os.path.join(workdir, "model.ickp")
    records = json.loads(m.train(json.dumps(cfg), out_checkpoint=ckpt))
    assert len(records) == 2
    for r in records:
        assert math.isfinite(r["total_loss"])
        assert len(r["margin_per_layer"]) == 2
    assert os.path.exists(ckpt)

    enc = m.Encoder.from_checkpoint(ckpt)
    assert enc.grid == (4, 4, 8)

    rerun = json.loads(m.train(json.dumps(cfg)))
    for a, b in zip(records, rerun):
        assert a["task_loss"] == b["task_loss"], "training must be reproducible"
    print("ok: training")


def main():
    workdir = tempfile.mkdtemp(prefix="icon-py-smoke-")
    try:
        m = import_icon_py(workdir)
        print(f"icon_py {m.__version__} from {locate_cdylib()}")
        check_sampling(m)
        check_threshold(m)
        check_losses(m)
        check_scene(m)
        check_dataset(m, workdir)
        check_encoder(m, workdir)
        check_training(m, workdir)
        print("smoke test ok (7 checks)")
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


if __name__ == "__main__":
    main()
