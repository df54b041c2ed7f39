"""Exercise the cnnxray Python bindings end to end.

Build and install first, e.g. `pip install --no-build-isolation crates/python`,
then run `python crates/python/python/smoke_test.py`.
"""

import json
import math
import os
import tempfile

import cnnxray_py as cx


def check_stats():
    assert cx.student_t_two_sided(0.0, 5) == 1.0
    assert abs(cx.student_t_two_sided(1.0, 1) - 0.5) < 1e-10
    r, degenerate = cx.pearson([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])
    assert abs(r - 0.5) < 1e-15 and not degenerate
    assert cx.normalize_for_display([0.0, 2.0]) == bytes([32, 96])
    pos, neg = cx.rank_filters([0.5, -0.2, 0.9], 1)
    assert pos == [(2, 0.9)] and neg == [(1, -0.2)]

    intercept, coef = cx.ridge_fit([[1.0], [-1.0]], [1.0, -1.0], 1.0)
    assert abs(coef[0] - 2.0 / 3.0) < 1e-15 and abs(intercept) < 1e-15
    d = cx.diagnose([[1.0], [2.0], [3.0], [4.0]], [2.0, 4.0, 5.0, 8.0], 0.0)
    assert d["dof"] == 2
    assert abs(d["se"][0] - math.sqrt(0.35) / math.sqrt(5.0)) < 1e-9

    try:
        cx.ridge_fit([[1.0], [1.0], [1.0]], [1.0, 2.0, 3.0], 0.0)
    except cx.CnnxrayError:
        pass
    else:
        raise AssertionError("singular OLS should raise")


def check_pipeline(root):
    model_dir = os.path.join(root, "model")
    data_dir = os.path.join(root, "data")
    cx.write_fixture("planted", model_dir, seed=1)
    cx.write_synthetic_images(data_dir, seed=1, count=200)

    model = cx.Model(os.path.join(model_dir, "manifest.json"), os.path.join(model_dir, "weights.bin"))
    c, h, w = model.input_shape
    assert model.taps == ["conv1", "conv2"]
    assert model.shapes()[-1][1] == "dense_sigmoid"
    p, taps = model.forward([0.5] * (c * h * w))
    assert abs(taps["conv2"][2] - p) <= 1e-9

    out = cx.run_pipeline(
        os.path.join(model_dir, "manifest.json"),
        os.path.join(model_dir, "weights.bin"),
        data_dir,
        os.path.join(root, "bundle"),
        render=True,
    )
    assert cx.verify_bundle(out) == []
    with open(os.path.join(out, "importance.json")) as f:
        ranking = {r["tap_id"]: r for r in json.load(f)}
    assert ranking["conv2"]["top_positive"][0]["filter"] == 3


def main():
    check_stats()
    with tempfile.TemporaryDirectory() as root:
        check_pipeline(root)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
