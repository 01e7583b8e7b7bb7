"""Smoke test for the `logoprompt` Python extension.

Builds the extension with cargo (unless LOGOPROMPT_LIB points at a built
library), imports it and exercises the main entry points.

    python3 python/smoke_test.py
"""

import importlib.util
import json
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def built_library():
    explicit = os.environ.get("LOGOPROMPT_LIB")
    if explicit:
        return pathlib.Path(explicit)
    subprocess.run(
        ["cargo", "build", "--offline", "-p", "logoprompt-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    for name in ("liblogoprompt.so", "liblogoprompt.dylib", "logoprompt.dll"):
        path = target / "debug" / name
        if path.exists():
            return path
    sys.exit("built library not found under " + str(target / "debug"))


def load(path, tmp):
    suffix = ".pyd" if path.suffix == ".dll" else ".so"
    module_path = pathlib.Path(tmp) / ("logoprompt" + suffix)
    shutil.copy(path, module_path)
    spec = importlib.util.spec_from_file_location("logoprompt", module_path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        lp = load(built_library(), tmp)
        print("logoprompt", lp.__version__)

        assert abs(lp.harmonic_mean(84.47, 74.24) - 79.03) < 0.01
        loss = lp.minmax_loss((0.6, 0.4), [(0.3, 0.2), (0.1, 0.25)])
        assert abs(loss - 0.3185) < 1e-4, loss
        classes, probs = lp.mine_hard_negatives([0.1, 0.5, 0.2, 0.15, 0.05], 2, exclude=1)
        assert classes == [2, 3] and probs == [0.2, 0.15]
        assert lp.prompt_size(56) == 8

        names = lp.class_names()
        assert len(names) == 16
        a = lp.render_prompt(names[0], 8, 8, seed=3)
        b = lp.render_prompt(names[0], 8, 8, seed=3)
        assert a.image.pixels() == b.image.pixels() and a.fg_color != a.bg_color
        scene = lp.render_scene(0, 56, seed=1)
        pasted, (row, col) = lp.apply_prompt(scene, a, "top", seed=0)
        assert row == 0 and pasted.pixel(55, 55) == scene.pixel(55, 55)
        assert pasted.to_png().startswith(b"\x89PNG")

        enc = lp.DualEncoder.pretrain(steps=20, per_class=6, seed=0)
        again = lp.DualEncoder.pretrain(steps=20, per_class=6, seed=0)
        assert enc.checksum() == again.checksum()
        probs = enc.class_probs(scene, names)
        assert abs(sum(probs) - 1.0) < 1e-9
        path = os.path.join(tmp, "encoder.json")
        enc.save(path)
        assert lp.DualEncoder.load(path).checksum() == enc.checksum()

        report = json.loads(
            lp.run_protocol(
                enc, method="logoprompt", shots=1, seeds=[0], steps=2,
                num_classes=4, train_per_class=2, test_per_class=2,
            )
        )
        assert report["per_seed"][0]["encoder_checksum"] == enc.checksum()

        try:
            lp.run_protocol(enc, method="clip")
        except ValueError as err:
            assert "method" in str(err)
        else:
            raise AssertionError("unknown method accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
