import numpy as np
import pytest
from scipy import stats

from scopealign.data import Dataset, ImbalanceSpec, from_csv, make_blobs, perturb, to_csv
from scopealign.engine import TrainConfig, init_mlp, train


def test_blob_counts():
    tr, te = make_blobs(10, 20, 200, 0.5, seed=0)
    assert len(tr) == 2000
    assert np.all(tr.class_counts() == 200)
    assert tr.split == "train" and te.split == "test"
    assert not np.array_equal(tr.features, te.features)


def test_blobs_deterministic():
    a, _ = make_blobs(3, 4, 10, 0.2, seed=8)
    b, _ = make_blobs(3, 4, 10, 0.2, seed=8)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_zero_spread_is_linearly_separable():
    tr, _ = make_blobs(5, 8, 20, 0.0, seed=1)
    linear = init_mlp([8, 5], seed=0)
    _, log = train(linear, tr, TrainConfig(epochs=200, batch_size=100, learning_rate=0.5, momentum=0.9))
    assert log[-1]["acc"] == 1.0


def test_identity_parameters(blobs):
    tr = blobs[0]
    for kind, param in [("label_noise", 0.0), ("feature_noise", 0.0), ("subsample", 1.0)]:
        out = perturb(tr, kind, param, seed=3)
        assert out.features.tobytes() == tr.features.tobytes()
        assert np.array_equal(out.labels, tr.labels)


def test_full_label_noise_flips_about_half():
    tr, _ = make_blobs(2, 3, 250, 0.3, seed=0)
    differ = [np.mean(perturb(tr, "label_noise", 1.0, seed=s).labels != tr.labels) for s in range(20)]
    # binomial(500, 1/2) per seed; pooled 10000 draws
    pooled = np.mean(differ)
    assert abs(pooled - 0.5) < 4 * np.sqrt(0.25 / 10000)
    assert stats.binomtest(int(round(pooled * 10000)), 10000, 0.5).pvalue > 1e-3


def test_feature_noise_is_multiplicative():
    tr, _ = make_blobs(2, 3, 2000, 0.3, seed=0)
    out = perturb(tr, "feature_noise", 0.1, seed=1)
    ratio = out.features / tr.features
    assert ratio.mean() == pytest.approx(1.0, abs=0.01)
    assert ratio.std() == pytest.approx(0.1, rel=0.05)


def test_subsample_count():
    tr, _ = make_blobs(10, 4, 200, 0.3, seed=0)
    assert len(perturb(tr, "subsample", 0.1, seed=0)) == 200


def test_imbalance_parts_partition_and_keep_all_classes():
    tr, _ = make_blobs(10, 4, 100, 0.3, seed=0)
    spec = ImbalanceSpec(tuple(range(5)), 0.9, 0)
    first = perturb(tr, "imbalance", spec, seed=4)
    second = perturb(tr, "imbalance", ImbalanceSpec(tuple(range(5)), 0.9, 1), seed=4)
    assert len(first) + len(second) == len(tr)
    assert list(first.class_counts()) == [90] * 5 + [10] * 5
    assert list(second.class_counts()) == [10] * 5 + [90] * 5
    both = np.concatenate([first.features, second.features])
    assert {r.tobytes() for r in both} == {r.tobytes() for r in tr.features}


def test_perturb_validation(blobs):
    tr, te = blobs
    with pytest.raises(ValueError):
        perturb(tr, "label_noise", 1.5)
    with pytest.raises(ValueError):
        perturb(tr, "feature_noise", -0.1)
    with pytest.raises(ValueError):
        perturb(tr, "subsample", 0.0)
    with pytest.raises(ValueError):
        perturb(te, "label_noise", 0.1)
    with pytest.raises(ValueError):
        perturb(tr, "rotate", 1)


def test_perturb_deterministic(blobs):
    tr = blobs[0]
    a = perturb(tr, "feature_noise", 0.2, seed=5)
    b = perturb(tr, "feature_noise", 0.2, seed=5)
    assert a.features.tobytes() == b.features.tobytes()


def test_csv_round_trip_exact(blobs):
    tr = blobs[0]
    text = to_csv(tr)
    assert text.startswith("label,f0,f1,f2,f3,f4\n")
    back = from_csv(text, tr.num_classes)
    assert back.features.tobytes() == tr.features.tobytes()
    assert np.array_equal(back.labels, tr.labels)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.inf]]), np.array([0]), 1)
