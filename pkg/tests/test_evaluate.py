import numpy as np
import pytest

from centermask.evaluate import EvalInstance, mask_iou, match_and_score

THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]


def rect(x, y, w, h, shape=(32, 32)):
    m = np.zeros(shape, dtype=bool)
    m[y:y + h, x:x + w] = True
    return m


def brute_ap(dets, gts, num_classes, thresholds=THRESHOLDS):
    """Per-class AP by explicit PR enumeration; returns {class: [ap per threshold]}."""
    out = {}
    for c in range(num_classes):
        n_gt = sum(1 for gl in gts for g in gl if g.class_id == c)
        if n_gt == 0:
            continue
        per_t = []
        for t in thresholds:
            flags = []  # (score, is_tp) in processing order
            for dl, gl in zip(dets, gts):
                d = sorted([x for x in dl if x.class_id == c], key=lambda x: -x.score)
                g = [x for x in gl if x.class_id == c]
                used = set()
                for det in d:
                    best, best_j = None, None
                    for j, gt in enumerate(g):
                        if j in used:
                            continue
                        iou = mask_iou(det.mask, gt.mask)
                        if iou >= t - 1e-12 and (best is None or iou >= best):
                            best, best_j = iou, j
                    if best_j is not None:
                        used.add(best_j)
                    flags.append((det.score, best_j is not None))
            order = sorted(range(len(flags)), key=lambda i: -flags[i][0])
            tp = fp = 0
            curve = []
            for i in order:
                if flags[i][1]:
                    tp += 1
                else:
                    fp += 1
                curve.append((tp / n_gt, tp / (tp + fp)))
            total = 0.0
            for k in range(101):
                r = k / 100
                ps = [p for rc, p in curve if rc >= r - 1e-12]
                total += max(ps) if ps else 0.0
            per_t.append(total / 101)
        out[c] = per_t
    return out


def test_mask_iou_examples():
    a = rect(0, 0, 2, 2, (3, 3))
    b = rect(1, 1, 2, 2, (3, 3))
    assert mask_iou(a, a) == 1.0
    assert mask_iou(rect(0, 0, 1, 1, (3, 3)), rect(2, 2, 1, 1, (3, 3))) == 0.0
    assert mask_iou(a, b) == pytest.approx(1 / 7)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


def fixture_3gt_4det():
    gts = [[EvalInstance(0, rect(0, 0, 10, 10)), EvalInstance(0, rect(12, 0, 8, 8)),
            EvalInstance(0, rect(0, 14, 12, 12))]]
    dets = [[
        EvalInstance(0, rect(0, 0, 10, 9), 0.9),  # iou 0.9
        EvalInstance(0, rect(13, 1, 8, 8), 0.8),  # iou ~0.62
        EvalInstance(0, rect(20, 20, 6, 6), 0.7),  # false positive
        EvalInstance(0, rect(0, 16, 12, 10), 0.6),  # iou ~0.83
    ]]
    return dets, gts


def test_3gt_4det_matches_brute_force():
    dets, gts = fixture_3gt_4det()
    rep = match_and_score(dets, gts, 1)
    per_t = brute_ap(dets, gts, 1)[0]
    assert rep.ap == pytest.approx(np.mean(per_t), abs=1e-9)
    assert rep.ap50 == pytest.approx(per_t[0], abs=1e-9)
    assert rep.ap75 == pytest.approx(per_t[5], abs=1e-9)
    assert rep.num_gt == 3 and rep.num_det == 4


def random_fixture(rng, n_img=3, num_classes=2):
    dets, gts = [], []
    scores = iter(rng.permutation(1000) / 1000 + 1e-3)
    for _ in range(n_img):
        gl, dl = [], []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.integers(0, 20, size=2)
            w, h = rng.integers(3, 12, size=2)
            gl.append(EvalInstance(int(rng.integers(num_classes)), rect(x, y, w, h)))
        for _ in range(rng.integers(0, 5)):
            if gl and rng.random() < 0.7:
                g = gl[rng.integers(len(gl))]
                ys, xs = np.nonzero(g.mask)
                x, y = xs.min() + rng.integers(-2, 3), ys.min() + rng.integers(-2, 3)
                w, h = np.ptp(xs) + 1 + rng.integers(-2, 3), np.ptp(ys) + 1 + rng.integers(-2, 3)
                cls = g.class_id if rng.random() < 0.85 else int(rng.integers(num_classes))
            else:
                x, y = rng.integers(0, 20, size=2)
                w, h = rng.integers(3, 12, size=2)
                cls = int(rng.integers(num_classes))
            dl.append(EvalInstance(cls, rect(max(x, 0), max(y, 0), max(w, 1), max(h, 1)), float(next(scores))))
        gts.append(gl)
        dets.append(dl)
    return dets, gts


def test_random_fixtures_match_brute_force():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(150):
        dets, gts = random_fixture(rng)
        if sum(len(g) for g in gts) > 5:
            continue
        rep = match_and_score(dets, gts, 2)
        brute = brute_ap(dets, gts, 2)
        for c in range(2):
            if c in brute:
                assert rep.per_class[c] == pytest.approx(np.mean(brute[c]), abs=1e-9)
            else:
                assert rep.per_class[c] is None
        if brute:
            assert rep.ap == pytest.approx(np.mean([np.mean(v) for v in brute.values()]), abs=1e-9)
            assert rep.ap50 == pytest.approx(np.mean([v[0] for v in brute.values()]), abs=1e-9)
        checked += 1
    assert checked > 50


def test_perfect_detections_score_one():
    gts = [[EvalInstance(0, rect(0, 0, 10, 10)), EvalInstance(1, rect(12, 12, 3, 3))],
           [EvalInstance(1, rect(5, 5, 20, 20))]]
    dets = [[EvalInstance(g.class_id, g.mask, 1.0) for g in gl] for gl in gts]
    rep = match_and_score(dets, gts, 2)
    assert rep.ap == rep.ap50 == rep.ap75 == 1.0
    assert rep.ap_small == 1.0 and rep.ap_large == 1.0


def test_zero_detections_score_zero():
    gts = [[EvalInstance(0, rect(0, 0, 10, 10))]]
    rep = match_and_score([[]], gts, 1)
    assert rep.ap == 0.0 and rep.ap50 == 0.0


def test_area_buckets_follow_canvas_fractions():
    # canvas 32x32 = 1024 px; small < 16 px, large > 64 px
    gts = [[EvalInstance(0, rect(0, 0, 3, 3)), EvalInstance(0, rect(10, 10, 10, 10))]]
    dets = [[EvalInstance(0, rect(0, 0, 3, 3), 0.9)]]
    rep = match_and_score(dets, gts, 1)
    assert rep.ap_small == 1.0
    assert rep.ap_large == 0.0
    assert rep.ap_medium is None


def test_max_dets_per_image():
    gts = [[EvalInstance(0, rect(0, 0, 10, 10))]]
    dets = [[EvalInstance(0, rect(20, 20, 4, 4), 0.9), EvalInstance(0, rect(0, 0, 10, 10), 0.5)]]
    assert match_and_score(dets, gts, 1, max_dets=1).ap == 0.0
    assert match_and_score(dets, gts, 1, max_dets=2).ap == pytest.approx(0.5, abs=0.01)


def test_properties_on_random_fixtures():
    rng = np.random.default_rng(1)
    for _ in range(40):
        dets, gts = random_fixture(rng, n_img=4)
        if not any(gts):
            continue
        rep = match_and_score(dets, gts, 2)
        assert rep.ap50 >= rep.ap75 >= 0
        assert 0 <= rep.ap <= 1
        # strictly increasing rescaling of scores
        scaled = [[EvalInstance(d.class_id, d.mask, d.score ** 3 * 0.5) for d in dl] for dl in dets]
        assert match_and_score(scaled, gts, 2).ap == pytest.approx(rep.ap, abs=1e-12)
        # a zero-IoU false positive with the lowest score
        fp_mask = np.zeros((32, 32), dtype=bool)
        fp_mask[31, 31] = True
        if any(g.mask[31, 31] for gl in gts for g in gl):
            continue
        extra = [list(dl) for dl in dets]
        extra[0].append(EvalInstance(0, fp_mask, 1e-9))
        assert match_and_score(extra, gts, 2).ap <= rep.ap + 1e-12


def test_report_formats():
    dets, gts = fixture_3gt_4det()
    rep = match_and_score(dets, gts, 1)
    text = rep.format()
    assert "AP50" in text and "AP75" in text
    d = rep.as_dict()
    assert set(d) >= {"ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "per_class", "num_gt", "num_det"}
