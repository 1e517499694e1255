import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdgod_lab.metrics import (CosineSimReport, MpcReport, average_precision, cosine_report, dataset_map,
                               iou, mean_ap, mean_cosine, mpc)
from sdgod_lab.structures import BoxF, DetectionSample
from oracles import ap_by_prefixes, mean_of_means, random_ap_instance as random_instance


def test_iou_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_against_pixel_grid():
    # brute force on a 1/200-pixel grid: counts of covered cells
    n = 200
    grid = (np.arange(3 * n) + 0.5) / n
    xx, yy = np.meshgrid(grid, grid)
    a = (xx < 2) & (yy < 2)
    b = (xx > 1) & (yy > 1)
    assert (a & b).sum() / (a | b).sum() == pytest.approx(iou((0, 0, 2, 2), (1, 1, 3, 3)), abs=1e-12)


def test_perfect_and_empty_detections():
    gts = {0: np.array([[0, 0, 4, 4], [5, 5, 9, 9]], dtype=float)}
    dets = [(0, 0.9, gts[0][0]), (0, 0.8, gts[0][1])]
    assert average_precision(dets, gts) == 1.0
    assert average_precision([], gts) == 0.0
    assert average_precision([], {0: np.zeros((0, 4))}) == 1.0


def test_hand_walked_example():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    good = np.array([0.0, 0.0, 10.0, 100.0 / 9.0])
    poor = np.array([0.0, 0.0, 10.0, 2.0])
    assert iou(good, gt[0]) == pytest.approx(0.9, abs=1e-12)
    assert iou(poor, gt[0]) == pytest.approx(0.2, abs=1e-12)
    assert average_precision([(0, 0.9, good), (0, 0.4, poor)], {0: gt}) == 1.0


def test_false_positive_on_top_lowers_ap():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dets, gts = random_instance(rng)
        base = average_precision(dets, gts)
        top = max([d[1] for d in dets], default=0.5) + 1.0
        assert average_precision(dets + [(0, top, np.array([50.0, 50.0, 51.0, 51.0]))], gts) <= base


def test_input_order_does_not_matter():
    rng = np.random.default_rng(1)
    for _ in range(50):
        dets, gts = random_instance(rng)
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert average_precision(dets, gts) == average_precision(shuffled, gts)


def test_matches_prefix_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(200):
        dets, gts = random_instance(rng)
        assert average_precision(dets, gts) == ap_by_prefixes(dets, gts)


def test_mean_ap_skips_classes_without_gt():
    assert mean_ap({0: 0.5, 1: None, 2: 1.0}) == 0.75
    with pytest.raises(ValueError):
        mean_ap([None])


def test_mpc_examples():
    row = [0.5, 1.1, 1.1, 17.2, 16.5, 18.3, 2.1, 2.2, 12.3, 29.8, 32.0, 24.1, 40.1, 18.7, 15.1]
    assert mpc([[v] for v in row], 15, 1) == pytest.approx(15.4, abs=0.05)
    assert mpc([[45.0], [41.3], [23.8], [42.1]], 4, 1) == pytest.approx(38.05, abs=1e-9)
    assert mpc(np.full((15, 5), 37.5)) == 37.5


def test_mpc_rejects_ragged_and_wrong_shape():
    with pytest.raises(ValueError):
        mpc([[1.0, 2.0], [3.0]])
    with pytest.raises(ValueError):
        mpc([])
    with pytest.raises(ValueError):
        mpc(np.ones((3, 2)), 15, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_mpc_permutation_invariant_and_linear(n_c, n_s, seed):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 100, size=(n_c, n_s))
    assert mpc(P[rng.permutation(n_c)]) == pytest.approx(mpc(P), abs=1e-12)
    assert mpc(P) == pytest.approx(mean_of_means(P.tolist()), abs=1e-12)
    i, j = rng.integers(n_c), rng.integers(n_s)
    Q = P.copy()
    Q[i, j] += 1.0
    assert mpc(Q) - mpc(P) == pytest.approx(1.0 / (n_c * n_s), abs=1e-12)


def test_report_serialisation():
    P = np.arange(6, dtype=float).reshape(3, 2) * 10
    rep = MpcReport(P, ["fog", "snow", "frost"], [1, 5], clean_map=61.0)
    assert rep.mpc == 25.0
    back = MpcReport.from_json(rep.to_json())
    np.testing.assert_array_equal(back.P, P)
    assert back.mpc == rep.mpc
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "corruption,s1,s5" and lines[2].startswith("snow,20.0,30.0")
    assert rep.per_corruption() == {"fog": 5.0, "snow": 25.0, "frost": 45.0}
    with pytest.raises(ValueError):
        MpcReport(P + 100, ["a", "b", "c"], [1, 2], 0.0)


def _samples(n):
    rng = np.random.default_rng(0)
    return [DetectionSample(rng.uniform(size=(8, 8, 3)), np.array([[1.0, 1.0, 5.0, 5.0]]), np.array([i % 2]),
                            image_id=i) for i in range(n)]


def test_dataset_map_percent():
    ds = _samples(4)
    perfect = [[(BoxF(*s.boxes[0]), int(s.labels[0]), 0.9)] for s in ds]
    assert dataset_map(perfect, ds, 2) == 100.0
    assert dataset_map([[] for _ in ds], ds, 2) == 0.0
    # class 2 has no GT anywhere and is excluded
    assert dataset_map(perfect, ds, 3) == 100.0


def test_cosine_report_properties():
    ds = _samples(5)

    def feats(images):
        return images.reshape(len(images), -1)[:, :6] - 0.3

    rep = cosine_report(feats, ds, {"same": ds}, 5)
    assert rep.similarity["same"] == pytest.approx(1.0, abs=1e-12)
    other = [s.with_image(s.image[::-1]) for s in ds]
    a = cosine_report(feats, ds, {"flip": other}, 5).similarity["flip"]
    b = cosine_report(lambda x: 3.0 * feats(x), ds, {"flip": other}, 5).similarity["flip"]
    assert a == pytest.approx(b, abs=1e-12)
    with pytest.raises(ValueError, match="ids"):
        cosine_report(feats, ds, {"bad": ds[::-1]}, 5)
    assert json.loads(rep.to_json())["severity"] == 5
    assert rep.to_csv().splitlines()[1].startswith("same,5,")
    with pytest.raises(ValueError):
        CosineSimReport(5, {"x": 1.5})


def test_mean_cosine_of_zero_rows_is_zero():
    assert mean_cosine(np.zeros((2, 3)), np.ones((2, 3))) == 0.0
