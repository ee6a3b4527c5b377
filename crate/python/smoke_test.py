"""Smoke test for the constyx_py extension module.

Run after `cargo build -p constyx-py` (or `maturin develop` in crates/python):

    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile


def load_module():
    try:
        import constyx_py

        return constyx_py
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libconstyx_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("constyx_py", str(lib))
            spec = importlib.util.spec_from_file_location("constyx_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["constyx_py"] = module
            return module
    sys.exit("constyx_py not found; build it with `cargo build -p constyx-py`")


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    cx = load_module()

    # Tensor container round trip.
    t = cx.Tensor([2, 3], [0.5, -1.0, 2.0, 3.25, 0.0, 1e-3])
    assert t.shape == [2, 3]
    assert cx.Tensor.from_bytes(t.to_bytes()).tolist() == t.tolist()
    assert t.to_bytes()[:4] == b"CSXT"

    # Moments and AFU weights.
    count, mean, cov = cx.batch_moments([[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]])
    assert count == 3 and close(mean[0], 3.0) and close(cov[0], 8.0 / 3.0)
    assert cx.afu_weight(0.7, 0.0) == 1.0
    assert close(cx.afu_weight(0.6, 1.0), math.e - 1.0)
    assert cx.select_channels([0.3, -1.0, 0.2, 5.0, -1.0], 2) == [1, 4]

    # Synthetic sample, model forward, losses and augmentation.
    image, labels = cx.generate_sample(0, seed=11, size=32)
    assert image.shape == [3, 32, 32] and set(labels.tolist()) == {0, 1, 2}
    model = cx.SegModel(feature_channels=8, encoder_depth=2, seed=1)
    before = model.parameter_hash()
    probs = model.predict(image)
    assert probs.shape == [3, 32, 32]
    loss = cx.seg_loss(probs, labels)
    ones = cx.Tensor([32, 32], [1.0] * 1024)
    assert close(loss, cx.weighted_seg_loss(probs, labels, ones))

    z = model.forward_encoder(image)
    bank = cx.StatsBank(3, 8)
    bank.ingest(z, labels)
    assert sum(bank.count(c) for c in range(3)) == 1024
    grad = model.feature_gradient(z, labels)
    z_hat = cx.augment_features(z, labels, bank, grad, seed=3)
    assert z_hat.shape == z.shape and z_hat.max_abs_diff(z) > 0.0
    same = cx.augment_features(z, labels, bank, grad, seed=3, aug={"lambda1": 0.0, "lambda2": 0.0})
    assert same.max_abs_diff(z) == 0.0
    assert model.parameter_hash() == before

    pred = cx.argmax_labels(probs)
    assert 0.0 <= cx.dice_score(pred, labels, 1) <= 1.0

    # Tiny end-to-end run.
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        manifest = cx.generate_benchmark(str(tmp / "data"), domains=2, per_domain=10, size=32, seed=5)
        assert [len(s["train"]) for s in manifest["splits"]] == [9, 9]
        log = cx.train(
            {
                "method": "constyx",
                "epochs": 1,
                "data": str(tmp / "data"),
                "out": str(tmp / "run"),
                "model": {"feature_channels": 8, "encoder_depth": 1},
            }
        )
        assert len(log["epochs"]) == 1
        result = cx.evaluate_checkpoint(str(tmp / "run" / "checkpoint"), str(tmp / "data"))
        assert result == log["final_eval"]
        assert [d["domain"] for d in result["per_domain"]] == [1]

    print("constyx_py smoke test passed")


if __name__ == "__main__":
    main()
