"""Smoke test for the `macaw` extension module.

Build first with `cargo build -p macaw-py --features extension-module`, then run
`python3 python/smoke_test.py [checkpoint.mcwc instructions.jsonl]`.
"""

import importlib.util
import math
import shutil
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import macaw  # installed wheel

        return macaw
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libmacaw.so"
        if lib.exists():
            break
    else:
        sys.exit("libmacaw.so not found; run cargo build -p macaw-py --features extension-module")
    dest = Path(tempfile.mkdtemp()) / ("macaw" + sysconfig.get_config_var("EXT_SUFFIX"))
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("macaw", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    m = load_module()

    out = m.attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 2.0], [3.0, 4.0]])
    w = 1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2.0)))
    assert close(out[0][0], w * 1.0 + (1 - w) * 3.0), out

    row = m.softmax([[0.0, math.log(3.0)]])[0]
    assert close(row[0], 0.25) and close(row[1], 0.75), row

    # k=2, d_in=1, d_out=1 kernel summing neighbours, stride 2.
    conv = m.conv1d([[1.0], [2.0], [3.0], [4.0], [5.0]], [[[1.0]], [[1.0]]], [0.5], 2)
    assert conv == [[3.5], [7.5]], conv

    assert m.decode(m.encode("héllo")) == "héllo"
    assert len(m.encode("ab")) == 2

    frames = m.sample_frames(100, 8)
    assert len(frames) == 8 and frames == sorted(frames) and frames[-1] < 100, frames

    feats = m.stub_features("image", "cat.jpg")
    assert feats == m.stub_features("image", "cat.jpg")
    assert len(feats) == 16 and len(feats[0]) == 32

    prompt = m.build_prompt("A kayak on a river.", ["video"])
    assert "a video" in prompt and "A kayak on a river" in prompt

    pairs = m.parse_qa_pairs("Q: What color is it?\nA: Blue.")
    assert pairs == [("What color is it?", "Blue.")], pairs

    assert m.lr_at(0, 1000) == 0.0
    assert close(m.lr_at(30, 1000), 3e-5, 1e-15)
    assert close(m.lr_at(1000, 1000), 0.0, 1e-15)

    if len(sys.argv) == 3:
        model = m.Model.load(sys.argv[1])
        report = model.evaluate(sys.argv[2])
        assert report["examples"] > 0 and math.isfinite(report["perplexity"]), report
        text = model.generate("What is going on?", [("image", "media/x.jpg")], max_new=16)
        assert isinstance(text, str)
        print(f"model step {model.step}: perplexity {report['perplexity']:.3f}, sample {text!r}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
