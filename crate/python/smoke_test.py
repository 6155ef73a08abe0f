"""Smoke test for the xrecog_py extension module.

Build and run:
    cargo build --release -p xrecog-py
    cp target/release/libxrecog_py.so python/xrecog_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import xrecog_py as xr


def main():
    config = {
        "num_identities": 40,
        "visits_per_identity": 4,
        "latent_dim": 8,
        "ambient_dim": 32,
        "visit_noise_sigma": 0.8,
        "attributes": [
            {"name": "sex", "kind": "categorical", "values": ["F", "M"], "signal_strength": 3.0}
        ],
        "projection_seed": 1,
        "sample_seed": 2,
        "ood_shift": {"offset_scale": 3.0, "noise_multiplier": 1.5},
    }
    data = xr.generate_synthetic(json.dumps(config))
    ood = xr.generate_synthetic(json.dumps(config), ood=True)
    assert len(data) == 160 and data.num_patients == 40
    assert data.attribute_names() == ["sex"]

    train, val, test = data.split(0.6, 0.2, 0.2, seed=3)
    assert not set(train.patient_ids()) & set(test.patient_ids())

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "data.csv")
        data.save(path)
        assert xr.Dataset.load(path).features() == data.features()

    # Losses and gradients.
    assert xr.squared_l2([0.0, 0.0], [3.0, 4.0]) == 25.0
    a, p, n = [0.0, 0.0], [1.0, 0.0], [0.5, 0.0]
    assert abs(xr.triplet_loss(a, p, n) - 0.95) < 1e-12
    ga, gp, gn = xr.triplet_loss_grad(a, p, n)
    assert ga == [-1.0, 0.0] and gp == [2.0, 0.0] and gn == [-1.0, 0.0]

    # Verification statistics.
    scores = [0.1, 0.4, 0.35, 0.8]
    same = [True, True, False, False]
    assert xr.auroc(scores, same) == 0.75
    assert xr.roc_curve(scores, same)[0][1:] == (0.0, 0.0)
    assert 0.0 <= xr.eer(scores, same) <= 1.0
    threshold, accuracy, _, _ = xr.select_threshold(scores, same)
    assert accuracy == 0.75 and math.isfinite(threshold)

    # Training, evaluation and probing.
    enc = xr.Encoder(32, [], 16, seed=5)
    assert len(enc.embed(data.features()[0])) == 16
    trained, history = xr.train(enc, train, val, json.dumps({"epochs": 5, "learning_rate": 0.5}))
    assert len(history["train_loss"]) == 5
    assert trained.digest() != enc.digest()

    reports = xr.evaluate(
        trained, test, val, ood, json.dumps({"settings": ["random", "same_attribute:sex", "ood"]})
    )
    assert [r["setting"] for r in reports] == ["random", "same_attribute:sex", "ood"]
    assert all(0.0 <= r["auroc"] <= 1.0 for r in reports)

    report = xr.run_probe(trained, train, test, "sex", seed=1)
    assert report["accuracy"] >= report["majority_baseline"]

    try:
        xr.run_probe(trained, train, test, "species")
    except ValueError as e:
        assert "sex" in str(e)
    else:
        raise AssertionError("unknown attribute accepted")

    print("random AUROC %.3f, probe accuracy %.3f" % (reports[0]["auroc"], report["accuracy"]))
    print("smoke test passed")


if __name__ == "__main__":
    main()
