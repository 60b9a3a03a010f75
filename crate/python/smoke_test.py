"""Smoke test for the dnf_py extension.

Build first:  cargo build --release -p dnf-py
Then run:     python3 python/smoke_test.py [path/to/libdnf_py.so]
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(lib_path):
    tmp = tempfile.mkdtemp(prefix="dnf_py_")
    target = os.path.join(tmp, "dnf_py.so")
    shutil.copy(lib_path, target)
    spec = importlib.util.spec_from_file_location("dnf_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    lib = sys.argv[1] if len(sys.argv) > 1 else None
    if lib is None:
        for profile in ("release", "debug"):
            cand = os.path.join(ROOT, "target", profile, "libdnf_py.so")
            if os.path.exists(cand):
                lib = cand
                break
    if lib is None:
        sys.exit("libdnf_py.so not found; run `cargo build --release -p dnf-py` first")
    dnf = load_module(lib)
    print("dnf_py", dnf.__version__)

    maps = dnf.render_scene(7, res=16)
    shape, image = maps["image"]
    assert shape == (3, 16, 16), shape
    assert set(maps) >= {"image", "albedo", "metallic", "roughness", "normal", "depth", "mask"}
    assert maps["depth"][0] == (1, 16, 16)
    assert dnf.render_scene(7, res=16) == maps, "rendering is not deterministic"

    gt = [0.5] * 48
    p = dnf.psnr([0.0] * 48, gt, (3, 4, 4))
    assert abs(p - 6.0206) < 1e-4, p
    assert abs(dnf.ssim(image, image, shape) - 1.0) < 1e-12
    try:
        dnf.psnr([0.0], gt, (3, 4, 4))
    except ValueError as e:
        print("shape mismatch rejected:", e)
    else:
        raise AssertionError("bad shape accepted")

    with tempfile.TemporaryDirectory() as d:
        corpus = os.path.join(d, "corpus")
        fp = dnf.generate_corpus(8, 2, corpus, res=16, seed=3)
        assert fp == dnf.generate_corpus(8, 2, os.path.join(d, "again"), res=16, seed=3)
        run = os.path.join(d, "run")
        code = dnf.run_cli(["train", "--corpus", corpus, "--out", run, "--epochs", "1",
                            "--batch", "4", "--base-channels", "4", "--log", "warn"])
        assert code == 0, code
        csv = dnf.evaluate(os.path.join(run, "model.dnfc"), corpus)
        rows = [r.split(",") for r in csv.strip().splitlines()]
        assert rows[0][:3] == ["sample", "property", "psnr"], rows[0]
        albedo = [float(r[2]) for r in rows[1:] if r[1] == "albedo" and r[0] != "mean"]
        assert len(albedo) == 2 and all(math.isfinite(v) for v in albedo), albedo
        assert dnf.run_cli(["bogus"]) == 2
    print("smoke test passed")


if __name__ == "__main__":
    main()
