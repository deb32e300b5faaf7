"""Smoke test for the hemoembed Python extension."""

import json
import math
import tempfile
from pathlib import Path

import hemoembed as he


def main():
    series = he.generate_synthetic(num_subjects=3, num_regimes=2, seed=1)
    assert len(series) == 3
    s0 = series[0]
    assert s0.channels == ["ART", "PAP", "CVP", "ECG", "pleth", "airway"]
    assert len(s0.values) == 6 and len(s0.values[0]) == s0.num_timesteps

    normalized = [s.normalize()[0] for s in series]
    row = normalized[0].values[0]
    mean = sum(row) / len(row)
    assert abs(mean) < 1e-9

    windows = [w for s in normalized for w in s.windows(120)]
    assert all(w.length == 120 for w in windows)
    assert len(windows[0].features()) == len(he.feature_names(s0.channels))

    enc = he.Encoder(6, hidden_channels=8, num_layers=3, embedding_dim=8, seed=2)
    assert enc.receptive_field == 1 + 2 * (1 + 2 + 4)
    first = enc.forward(windows[0].values)
    assert len(first) == 8

    # Causality: changing the last timestep leaves an earlier prefix embedding unchanged.
    prefix = [r[:60] for r in windows[0].values]
    edited = [r[:59] + [r[59] + 5.0] for r in prefix]
    assert enc.forward([r[:59] for r in prefix]) == enc.forward([r[:59] for r in edited])

    trained, losses = he.train(normalized, enc, iterations=5, batch_size=4, seed=3)
    assert len(losses) == 5 and all(math.isfinite(x) for x in losses)

    embs = trained.embed(windows)
    assert len(embs) == len(windows) and embs[0].subject_id == windows[0].subject_id
    timed, sigma, scale = he.attach_time(embs, mode="full", scale_factor=2.0)
    assert sigma > 0 and scale > 0 and len(timed[0]) == 8

    points = [e.values for e in timed]
    labels = he.ward(points, 3)
    assert sorted(set(labels)) == [0, 1, 2]
    km, objective = he.kmeans(points, 3, seed=0)
    assert objective >= 0
    assert abs(he.adjusted_rand_index(labels, labels) - 1.0) < 1e-12
    assert he.label_repeats([0, 0, 1, 0]) == 1
    assert he.sinusoidal_embedding(0.0, 4) == [0.0, 1.0, 0.0, 1.0]
    loss = he.triplet_loss([1.0, 0.0], [1.0, 0.0], [[-1.0, 0.0]])
    assert abs(loss - 2 * math.log1p(math.exp(-1.0))) < 1e-12

    try:
        he.ward(points, 0)
    except he.HemoembedError:
        pass
    else:
        raise AssertionError("k = 0 must be rejected")

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model"
        trained.save(str(ckpt), seed=3)
        assert he.Encoder.load(str(ckpt)).parameters() == trained.parameters()

        cfg = json.loads(he.default_config(seed=4))
        cfg["data"] = {"preset": {"num_subjects": 4, "num_regimes": 2, "seed": 4}}
        cfg["encoder"].update(hidden_channels=8, num_layers=3, embedding_dim=8)
        cfg["training"].update(iterations=5, batch_size=4)
        cfg["clustering"]["k_values"] = [2, 3]
        cfg["explain"].update(folds=2)
        cfg["explain"]["forest"]["num_trees"] = 5
        manifest = json.loads(he.run_pipeline(json.dumps(cfg), str(Path(tmp) / "run")))
        assert manifest["artifacts"], "pipeline produced no artifacts"

    print("hemoembed smoke test passed")


if __name__ == "__main__":
    main()
