"""Tests for the three pseudo-annotation selectors and pool annotation."""

from dataclasses import replace as dc_replace

import numpy as np
import pytest

from textboot.data import (
    AnnotationTier,
    Dataset,
    SceneSpec,
    downgrade_to_weak,
    generate_synthetic,
    read_pgm,
)
from textboot.detector import TrainConfig, train
from textboot.errors import TierMismatchError
from textboot.geometry import AxisRect, BitMask, Detection, mask_iou, rasterize, rect_iou
from textboot.strategies import (
    Provenance,
    PseudoAnnotation,
    PseudoSet,
    StrategyConfig,
    annotate_pool,
    filter_select,
    local_generate,
    naive_select,
    pseudo_to_dataset,
)
from tests.test_detector import EASY, _examples


def _rect_detection(grid_h, grid_w, x0, y0, x1, y1, score):
    px = np.zeros((grid_h, grid_w), dtype=bool)
    px[y0:y1, x0:x1] = True
    m = BitMask(px)
    return Detection(box=AxisRect(x0, y0, x1, y1), mask=m, score=score)


def _random_detections(rng, n, grid=32):
    dets = []
    for _ in range(n):
        x0 = int(rng.integers(0, grid - 2))
        y0 = int(rng.integers(0, grid - 2))
        x1 = int(rng.integers(x0 + 1, grid))
        y1 = int(rng.integers(y0 + 1, grid))
        dets.append(_rect_detection(grid, grid, x0, y0, x1, y1, float(rng.uniform())))
    return dets


def _to_none_tier(rec):
    return dc_replace(rec, tier=AnnotationTier.NONE, rects=())


def _random_boxes(rng, n, grid=32):
    boxes = []
    for _ in range(n):
        x0 = float(rng.uniform(0, grid - 1))
        y0 = float(rng.uniform(0, grid - 1))
        boxes.append(AxisRect(x0, y0, x0 + float(rng.uniform(1, 8)), y0 + float(rng.uniform(1, 8))))
    return boxes


class OracleModel:
    """Plug-in stand-in: hands back pre-set truth, proving the selectors
    only depend on the detector protocol (detect / mask_for_box)."""

    def __init__(self, truth_masks, detections=()):
        self.truth = list(truth_masks)
        self.detections = list(detections)

    def detect(self, image):
        return list(self.detections)

    def mask_for_box(self, image, box):
        for m in self.truth:
            rows, cols = np.nonzero(m.pixels)
            if len(rows) and np.all(
                (cols + 0.5 >= box.x_min)
                & (cols + 0.5 < box.x_max)
                & (rows + 0.5 >= box.y_min)
                & (rows + 0.5 < box.y_max)
            ):
                return m
        return BitMask(np.zeros_like(self.truth[0].pixels))


# --- naive -------------------------------------------------------------------


def test_naive_empty_candidates():
    assert naive_select([], StrategyConfig()) == []


def test_naive_keeps_only_above_threshold():
    dets = [
        _rect_detection(16, 16, 1, 1, 5, 5, 0.6),
        _rect_detection(16, 16, 8, 8, 12, 12, 0.4),
    ]
    kept = naive_select(dets, StrategyConfig(score_threshold=0.5))
    assert len(kept) == 1
    assert kept[0].box == dets[0].box
    assert kept[0].mask == dets[0].mask
    assert kept[0].provenance is Provenance.NAIVE
    assert kept[0].score == 0.6


def test_naive_boundary_is_strict():
    dets = [_rect_detection(16, 16, 1, 1, 5, 5, 0.5)]
    assert naive_select(dets, StrategyConfig(score_threshold=0.5)) == []


def test_naive_subset_and_monotone_in_threshold():
    rng = np.random.default_rng(5)
    for _ in range(50):
        dets = _random_detections(rng, int(rng.integers(0, 8)))
        s1, s2 = sorted(rng.uniform(size=2))
        lo = {(a.box, a.mask.pixels.tobytes()) for a in naive_select(dets, StrategyConfig(score_threshold=s1))}
        hi = {(a.box, a.mask.pixels.tobytes()) for a in naive_select(dets, StrategyConfig(score_threshold=s2))}
        allc = {(d.box, d.mask.pixels.tobytes()) for d in dets}
        assert hi <= lo <= allc


def test_naive_preserves_order():
    rng = np.random.default_rng(6)
    dets = _random_detections(rng, 10)
    kept = naive_select(dets, StrategyConfig(score_threshold=0.3))
    boxes = [d.box for d in dets if d.score > 0.3]
    assert [a.box for a in kept] == boxes


# --- filter ------------------------------------------------------------------


def test_filter_no_weak_boxes_rejects_everything():
    dets = [_rect_detection(16, 16, 1, 1, 5, 5, 0.9)]
    assert filter_select(dets, [], StrategyConfig()) == []


def test_filter_rejects_low_overlap():
    d = _rect_detection(32, 32, 1, 1, 5, 5, 0.9)
    far = AxisRect(20.0, 20.0, 30.0, 30.0)
    near_but_small = AxisRect(4.0, 4.0, 12.0, 12.0)  # IoU with [1,5)x[1,5) is 1/79
    cfg = StrategyConfig(filter_iou_threshold=0.3)
    assert filter_select([d], [far], cfg) == []
    assert rect_iou(d.box, near_but_small) < 0.3
    assert filter_select([d], [near_but_small], cfg) == []


def test_filter_keeps_joint_pass():
    d = _rect_detection(32, 32, 2, 2, 10, 10, 0.45)
    g = AxisRect(2.0, 2.0, 11.0, 10.0)
    assert rect_iou(d.box, g) > 0.3
    kept = filter_select([d], [g], StrategyConfig())
    assert len(kept) == 1
    assert kept[0].provenance is Provenance.FILTER


def test_filter_boundaries_are_strict():
    # score exactly at the threshold fails
    d = _rect_detection(32, 32, 2, 2, 10, 10, 0.4)
    g = AxisRect(2.0, 2.0, 10.0, 10.0)
    assert filter_select([d], [g], StrategyConfig()) == []
    # IoU exactly at the threshold fails: [0,3)x[0,1) vs [0,7)x[0,1) gives 3/7... use exact 0.3
    d2 = _rect_detection(32, 32, 0, 0, 3, 1, 0.9)
    g2 = AxisRect(0.0, 0.0, 10.0, 1.0)
    assert rect_iou(d2.box, g2) == 0.3
    assert filter_select([d2], [g2], StrategyConfig(filter_iou_threshold=0.3)) == []


def test_filter_subset_of_naive_at_same_threshold():
    rng = np.random.default_rng(7)
    for _ in range(50):
        dets = _random_detections(rng, int(rng.integers(0, 8)))
        boxes = _random_boxes(rng, int(rng.integers(0, 5)))
        s = float(rng.uniform())
        cfg = StrategyConfig(score_threshold=s, filter_score_threshold=s)
        filtered = {(a.box, a.mask.pixels.tobytes()) for a in filter_select(dets, boxes, cfg)}
        naive = {(a.box, a.mask.pixels.tobytes()) for a in naive_select(dets, cfg)}
        assert filtered <= naive


def test_filter_matches_double_loop_oracle():
    rng = np.random.default_rng(8)
    for _ in range(200):
        dets = _random_detections(rng, int(rng.integers(0, 8)))
        boxes = _random_boxes(rng, int(rng.integers(0, 6)))
        cfg = StrategyConfig(
            filter_score_threshold=float(rng.uniform()),
            filter_iou_threshold=float(rng.uniform()),
        )
        expect = []
        for d in dets:
            if d.score > cfg.filter_score_threshold:
                hit = False
                for g in boxes:
                    if rect_iou(d.box, g) > cfg.filter_iou_threshold:
                        hit = True
                if hit:
                    expect.append(d.box)
        got = [a.box for a in filter_select(dets, boxes, cfg)]
        assert got == expect


# --- local -------------------------------------------------------------------


def test_local_empty_boxes():
    model = OracleModel([BitMask(np.zeros((8, 8), dtype=bool))])
    assert local_generate(model, np.zeros((8, 8), np.uint8), []) == []


def test_local_one_annotation_per_box_bit_equal():
    px = np.zeros((16, 16), dtype=bool)
    px[2:6, 2:6] = True
    model = OracleModel([BitMask(px)])
    boxes = [AxisRect(2.0, 2.0, 6.0, 6.0), AxisRect(9.0, 9.0, 14.0, 13.0)]
    anns = local_generate(model, np.zeros((16, 16), np.uint8), boxes)
    assert len(anns) == len(boxes)
    assert [a.box for a in anns] == boxes
    assert all(a.provenance is Provenance.LOCAL for a in anns)
    assert all(a.score is None for a in anns)
    assert anns[1].mask.count == 0  # kept even though empty


def test_local_drop_empty_when_configured():
    px = np.zeros((16, 16), dtype=bool)
    px[2:6, 2:6] = True
    model = OracleModel([BitMask(px)])
    boxes = [AxisRect(2.0, 2.0, 6.0, 6.0), AxisRect(9.0, 9.0, 14.0, 13.0)]
    cfg = StrategyConfig(keep_empty_local_masks=False)
    anns = local_generate(model, np.zeros((16, 16), np.uint8), boxes, cfg)
    assert len(anns) == 1 and anns[0].box == boxes[0]


def test_local_with_oracle_model_reaches_perfect_overlap():
    rng = np.random.default_rng(9)
    for _ in range(20):
        px = np.zeros((24, 24), dtype=bool)
        x0, y0 = int(rng.integers(0, 16)), int(rng.integers(0, 16))
        w, h = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        px[y0 : y0 + h, x0 : x0 + w] = True
        truth = BitMask(px)
        model = OracleModel([truth])
        anns = local_generate(
            model, np.zeros((24, 24), np.uint8), [AxisRect(x0, y0, x0 + w, y0 + h)]
        )
        assert len(anns) == 1
        assert mask_iou(anns[0].mask, truth) == 1.0


# --- shared properties ---------------------------------------------------------


def test_strategies_are_pure():
    rng = np.random.default_rng(10)
    dets = _random_detections(rng, 6)
    boxes = _random_boxes(rng, 4)
    cfg = StrategyConfig()
    assert naive_select(dets, cfg) == naive_select(dets, cfg)
    assert filter_select(dets, boxes, cfg) == filter_select(dets, boxes, cfg)


def test_pseudo_annotation_rejects_mask_outside_box():
    px = np.zeros((16, 16), dtype=bool)
    px[0:8, 0:8] = True
    with pytest.raises(ValueError):
        PseudoAnnotation(
            box=AxisRect(4.0, 4.0, 6.0, 6.0),
            mask=BitMask(px),
            provenance=Provenance.NAIVE,
            round_index=0,
        )


def test_pseudo_set_requires_sorted_unique_ids():
    with pytest.raises(ValueError):
        PseudoSet(per_image=(("b", ()), ("a", ())))
    with pytest.raises(ValueError):
        PseudoSet(per_image=(("a", ()), ("a", ())))
    ps = PseudoSet(per_image=(("a", ()), ("b", ())))
    assert ps.count == 0 and ps.mean_score is None


def test_pseudo_set_stats():
    d1 = _rect_detection(16, 16, 1, 1, 5, 5, 0.8)
    d2 = _rect_detection(16, 16, 8, 8, 12, 12, 0.6)
    anns = naive_select([d1, d2], StrategyConfig(score_threshold=0.1))
    ps = PseudoSet(per_image=(("img", tuple(anns)),))
    assert ps.count == 2
    assert ps.mean_score == pytest.approx(0.7)
    assert ps.for_image("img") == tuple(anns)
    with pytest.raises(KeyError):
        ps.for_image("other")


# --- annotate_pool -------------------------------------------------------------


@pytest.fixture(scope="module")
def weak_world(tmp_path_factory):
    """A trained model plus a weak pool derived from pixel-true scenes."""
    root = tmp_path_factory.mktemp("pool")
    ds = generate_synthetic(SceneSpec(n_images=10, seed=13, **EASY), root)
    examples = _examples(ds, root)
    model = train(None, examples[:4], TrainConfig(seed=3))
    weak_pool = Dataset(
        records=tuple(downgrade_to_weak(r) for r in ds.records[4:]),
        image_width=64,
        image_height=64,
    )
    return root, ds, weak_pool, model


def test_annotate_pool_empty_pool():
    model = OracleModel([BitMask(np.zeros((8, 8), dtype=bool))])
    empty = Dataset(records=(), image_width=8, image_height=8)
    ps = annotate_pool(model, empty, Provenance.NAIVE)
    assert ps.per_image == () and ps.count == 0


def test_annotate_pool_tier_rules(weak_world):
    root, _, weak_pool, model = weak_world
    none_pool = Dataset(
        records=tuple(_to_none_tier(rec) for rec in weak_pool.records),
        image_width=weak_pool.image_width,
        image_height=weak_pool.image_height,
    )
    with pytest.raises(TierMismatchError):
        annotate_pool(model, none_pool, Provenance.FILTER, image_root=root)
    with pytest.raises(TierMismatchError):
        annotate_pool(model, none_pool, Provenance.LOCAL, image_root=root)
    # NAIVE accepts both NONE and WEAK
    annotate_pool(model, none_pool, Provenance.NAIVE, image_root=root)
    annotate_pool(model, weak_pool, Provenance.NAIVE, image_root=root)


def test_annotate_pool_rejects_strong_records(weak_world):
    root, ds, _, model = weak_world
    strong_pool = Dataset(records=ds.records[4:], image_width=64, image_height=64)
    for strat in Provenance:
        with pytest.raises(TierMismatchError):
            annotate_pool(model, strong_pool, strat, image_root=root)


def test_annotate_pool_local_count_conservation(weak_world):
    root, _, weak_pool, model = weak_world
    ps = annotate_pool(model, weak_pool, Provenance.LOCAL, image_root=root)
    assert ps.count == sum(len(r.rects) for r in weak_pool.records)
    assert [iid for iid, _ in ps.per_image] == sorted(r.image_id for r in weak_pool.records)
    for rec in weak_pool.records:
        assert [a.box for a in ps.for_image(rec.image_id)] == list(rec.rects)


def test_annotate_pool_deterministic_and_parallel_equal(weak_world):
    root, _, weak_pool, model = weak_world
    a = annotate_pool(model, weak_pool, Provenance.FILTER, image_root=root)
    b = annotate_pool(model, weak_pool, Provenance.FILTER, image_root=root)
    c = annotate_pool(model, weak_pool, Provenance.FILTER, image_root=root, jobs=4)
    assert a == b == c


# --- serialization back to a dataset -------------------------------------------


def test_pseudo_to_dataset_round_trip(weak_world):
    root, ds, weak_pool, model = weak_world
    ps = annotate_pool(model, weak_pool, Provenance.LOCAL, image_root=root)
    out = pseudo_to_dataset(weak_pool, ps)
    assert len(out.records) == len(weak_pool.records)
    for rec, src in zip(out.records, weak_pool.records):
        assert rec.tier is AnnotationTier.STRONG
        assert rec.image_id == src.image_id
        assert rec.rects == ()
        anns = ps.for_image(rec.image_id)
        if any(a.mask.count for a in anns):
            assert rec.provenance == "LOCAL"
            assert rec.round_index == 0
            assert len(rec.polygons) >= 1
            # outlines rasterize back to exactly the union of the masks
            union = np.zeros((64, 64), dtype=bool)
            for a in anns:
                union |= a.mask.pixels
            back = np.zeros((64, 64), dtype=bool)
            for p in rec.polygons:
                back |= rasterize(p, 64, 64).pixels
            assert mask_iou(BitMask(back), BitMask(union)) > 0.95


def test_pseudo_to_dataset_scores_align(weak_world):
    root, _, weak_pool, model = weak_world
    ps = annotate_pool(model, weak_pool, Provenance.NAIVE, image_root=root)
    out = pseudo_to_dataset(weak_pool, ps)
    for rec in out.records:
        if rec.scores is not None:
            assert len(rec.scores) == len(rec.polygons)
            assert all(0.0 <= s <= 1.0 for s in rec.scores)


def test_pseudo_to_dataset_empty_set_keeps_pool_as_negatives(weak_world):
    _, _, weak_pool, _ = weak_world
    empty = PseudoSet(
        per_image=tuple(sorted((r.image_id, ()) for r in weak_pool.records))
    )
    out = pseudo_to_dataset(weak_pool, empty)
    assert len(out.records) == len(weak_pool.records)
    for rec in out.records:
        assert rec.tier is AnnotationTier.STRONG
        assert rec.polygons == () and rec.scores is None
