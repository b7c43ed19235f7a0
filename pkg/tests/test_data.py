import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se2mitosis.data import (Dataset, FoldSpec, Sample, SamplePool, accept_negative, build_negative_pool,
                             build_pool, extract_patch, largest_remainder, load_contexts, make_folds,
                             mine_hard_negatives, reflect_index, sample_batch, validation_set)
from se2mitosis.io import (Annotation, DataError, ImageRecord, load_annotations, load_folds, save_annotations,
                           save_folds)
from se2mitosis.model import ProbabilityMap
from se2mitosis.synthetic import (SyntheticConfig, generate_synthetic_dataset, render_image, render_object,
                                  rotate_dataset_90)


def cases(per_scanner, scanners=3):
    return [ImageRecord(f"c{s}_{i:03d}", f"{s}_{i}.png", 100, 100, f"S{s}")
            for s in range(scanners) for i in range(per_scanner)]


def tiny_dataset(points=(), size=(200, 200), unlabeled=False):
    h, w = size
    rec = ImageRecord("a", "a.png", w, h, "S0", labeled=not unlabeled)
    anns = [Annotation("a", x, y, lab) for x, y, lab in points]
    img = np.random.default_rng(0).integers(0, 256, (h, w, 3), dtype=np.uint8)
    return Dataset([rec], anns, pixels={"a": img})


# ---------------------------------------------------------------- folds


def test_folds_150_cases_per_scanner_40_5_5():
    folds = make_folds(cases(50), n_folds=5, seed=0)
    assert len(folds) == 5
    for f in folds:
        for split, n in (("train", 40), ("validation", 5), ("test", 5)):
            hist = Counter(c.split("_")[0] for c in f.cases(split))
            assert hist == {"c0": n, "c1": n, "c2": n}


def test_folds_single_scanner_10():
    f = make_folds(cases(10, 1), n_folds=1)[0]
    assert [len(f.cases(s)) for s in ("train", "validation", "test")] == [8, 1, 1]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(10, 40), min_size=1, max_size=4), st.integers(0, 1000))
def test_folds_partition_and_stratify(sizes, seed):
    cs = [ImageRecord(f"s{s}_{i}", "x", 10, 10, f"S{s}") for s, n in enumerate(sizes) for i in range(n)]
    folds = make_folds(cs, n_folds=3, seed=seed)
    ids = {c.id for c in cs}
    for f in folds:
        parts = [set(f.cases(s)) for s in ("train", "validation", "test")]
        assert set().union(*parts) == ids and sum(map(len, parts)) == len(ids)
        # counting oracle: each scanner's split sizes are the rounded quotas
        for s, n in enumerate(sizes):
            got = [sum(c.startswith(f"s{s}_") for c in p) for p in parts]
            quotas = [0.8 * n, 0.1 * n, 0.1 * n]
            assert sum(got) == n and all(abs(g - q) < 1 for g, q in zip(got, quotas))


def test_folds_differ_and_are_deterministic():
    a = make_folds(cases(50), seed=1)
    b = make_folds(cases(50), seed=1)
    assert [f.assignment for f in a] == [f.assignment for f in b]
    assert a[0].assignment != a[1].assignment
    assert make_folds(cases(50), seed=2)[0].assignment != a[0].assignment


def test_folds_too_few_cases():
    with pytest.raises(DataError, match="S0"):
        make_folds(cases(3, 1))


def test_folds_exclude_unlabeled():
    cs = cases(10, 1) + [ImageRecord("u", "u.png", 10, 10, "S9", labeled=False)]
    f = make_folds(cs, n_folds=1)[0]
    assert "u" not in f.assignment


def test_largest_remainder():
    assert largest_remainder(50, (0.8, 0.1, 0.1)) == [40, 5, 5]
    assert largest_remainder(7, (0.8, 0.1, 0.1)) == [5, 1, 1]  # quotas 5.6, 0.7, 0.7
    assert sum(largest_remainder(33, (0.5, 0.25, 0.25))) == 33


def test_fold_file_round_trip(tmp_path):
    folds = make_folds(cases(10), n_folds=2)
    save_folds(tmp_path / "f.json", [f.to_dict() for f in folds])
    back = [FoldSpec.from_dict(i, d) for i, d in enumerate(load_folds(tmp_path / "f.json"))]
    assert [f.assignment for f in back] == [f.assignment for f in folds]


def test_fold_from_dict_rejects_overlap():
    with pytest.raises(DataError):
        FoldSpec.from_dict(0, {"train": ["a"], "test": ["a"]})


# ---------------------------------------------------------------- patches


def test_extract_interior_is_raw_crop():
    img = np.random.default_rng(0).integers(0, 256, (200, 220, 3), dtype=np.uint8)
    ctx = extract_patch(img, (100, 90))
    assert ctx.shape == (3, 128, 128)
    np.testing.assert_array_equal(ctx, img[90 - 64:90 + 64, 100 - 64:100 + 64].transpose(2, 0, 1))


def test_extract_corner_mirror():
    img = np.random.default_rng(1).integers(0, 256, (50, 60, 3), dtype=np.uint8)
    ctx = extract_patch(img, (0, 0))
    # context index 64 is the center, so pixel (-1, -1) sits at index 63
    np.testing.assert_array_equal(ctx[:, 63, 63], img[1, 1])
    np.testing.assert_array_equal(ctx[:, 64, 64], img[0, 0])


@pytest.mark.parametrize("center", [(0, 0), (59, 49), (30, 3), (5, 48)])
def test_extract_matches_numpy_reflect(center):
    img = np.random.default_rng(2).integers(0, 256, (50, 60, 3), dtype=np.uint8)
    padded = np.pad(img, ((200, 200), (200, 200), (0, 0)), mode="reflect")
    x, y = center
    expect = padded[200 + y - 64:200 + y + 64, 200 + x - 64:200 + x + 64].transpose(2, 0, 1)
    np.testing.assert_array_equal(extract_patch(img, center), expect)


def test_reflect_index_tiny_image():
    np.testing.assert_array_equal(reflect_index(np.arange(-3, 4), 1), np.zeros(7))
    np.testing.assert_array_equal(reflect_index(np.arange(-3, 6), 3), [1, 2, 1, 0, 1, 2, 1, 0, 1])


def test_extract_rejects_outside_center():
    with pytest.raises(ValueError):
        extract_patch(np.zeros((10, 10, 3), np.uint8), (10, 2))


# ---------------------------------------------------------------- sampling


def pool(npos=5, nneg=7):
    return SamplePool([Sample("a", i, 0, 1) for i in range(npos)],
                      [Sample("a", i, 1, 0, "random") for i in range(nneg)])


def test_batch_is_balanced_64():
    b = sample_batch(pool(), 64, (0, 1))
    assert Counter(s.label for s in b) == {1: 32, 0: 32}


def test_batch_size_two():
    b = sample_batch(pool(), 2, (0, 1))
    assert [s.label for s in b] == [1, 0]


def test_batch_deterministic():
    assert sample_batch(pool(), 64, (3, 4)) == sample_batch(pool(), 64, (3, 4))
    assert sample_batch(pool(), 64, (3, 4)) != sample_batch(pool(), 64, (3, 5))


def test_batch_rejects_empty_and_odd():
    with pytest.raises(ValueError):
        sample_batch(pool(0, 3), 4, (0,))
    with pytest.raises(ValueError):
        sample_batch(pool(), 5, (0,))


def test_negative_mix_weights():
    p = SamplePool([Sample("a", 0, 0, 1)],
                   [Sample("a", 0, 0, 0, "imposter")] * 2 + [Sample("a", 0, 0, 0, "random")] * 8
                   + [Sample("a", 0, 0, 0, "mined")] * 5)
    w = p.negative_weights()
    by_src = Counter()
    for s, wi in zip(p.negatives, w):
        by_src[s.source] += wi
    for v in by_src.values():
        assert v == pytest.approx(1 / 3)


def test_mix_frequencies_in_batches():
    p = SamplePool([Sample("a", 0, 0, 1)],
                   [Sample("a", 0, 0, 0, "imposter")] + [Sample("a", 0, 0, 0, "random")] * 50)
    counts = Counter(s.source for k in range(200) for s in sample_batch(p, 64, (k,))[32:])
    frac = counts["imposter"] / (200 * 32)
    assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / 6400)


# ---------------------------------------------------------------- negatives


def test_no_mitoses_all_accepted():
    ds = tiny_dataset()
    assert len(build_negative_pool(ds, ["a"], 50)) == 50


def test_rejects_within_38():
    mit = np.array([[100.0, 100.0]])
    assert not accept_negative(110, 100, mit)
    assert not accept_negative(100 + 37.9, 100, mit)
    assert accept_negative(100 + 38, 100, mit)


def test_acceptance_region_grid_oracle():
    mit = np.array([[20.0, 20.0], [45.0, 30.0]])
    pts = [(x, y) for x in range(64) for y in range(64)]
    got = sum(accept_negative(x, y, mit, 15) for x, y in pts)
    oracle = 0
    for x, y in pts:
        ok = True
        for mx, my in mit:
            if math.sqrt((x - mx) ** 2 + (y - my) ** 2) < 15:
                ok = False
        oracle += ok
    assert got == oracle


def test_random_negatives_area_fraction():
    # acceptance frequency of random draws matches the exhaustive grid fraction
    ds = tiny_dataset([(50, 50, "mitosis"), (140, 120, "mitosis")], size=(160, 180))
    n = 4000
    neg = [s for s in build_negative_pool(ds, ["a"], n, seed=1) if s.source == "random"]
    grid = np.array([[accept_negative(x, y, ds.points("a")) for x in range(180)] for y in range(160)])
    frac = grid.mean()
    assert abs(len(neg) / n - frac) < 3 * math.sqrt(frac * (1 - frac) / n)
    assert all(accept_negative(s.x, s.y, ds.points("a")) for s in neg)


def test_pool_includes_imposters_and_skips_unlabeled():
    ds = tiny_dataset([(50, 50, "mitosis"), (150, 150, "imposter")])
    p = build_pool(ds, ["a"], random_per_image=5)
    assert len(p.positives) == 1
    assert any(s.source == "imposter" and (s.x, s.y) == (150, 150) for s in p.negatives)
    ds_u = tiny_dataset([(50, 50, "mitosis")], unlabeled=True)
    p = build_pool(ds_u, ["a"])
    assert not p.positives and not p.negatives


def test_negative_pool_deterministic():
    ds = tiny_dataset([(50, 50, "mitosis")])
    assert build_negative_pool(ds, ["a"], 20, seed=4) == build_negative_pool(ds, ["a"], 20, seed=4)


def test_validation_set_balanced():
    ds = tiny_dataset([(50, 50, "mitosis"), (150, 150, "mitosis"), (100, 30, "imposter")])
    vs = validation_set(ds, ["a"], seed=0)
    assert Counter(s.label for s in vs) == {1: 2, 0: 2}
    assert vs == validation_set(ds, ["a"], seed=0)


def test_load_contexts_shape():
    ds = tiny_dataset([(50, 50, "mitosis")])
    out = load_contexts(ds, [Sample("a", 0, 0, 1), Sample("a", 199, 199, 0)])
    assert out.shape == (2, 3, 128, 128) and out.dtype == np.uint8


# ---------------------------------------------------------------- mining


def hotspot_scorer(cells):
    def scorer(image, cid):
        vals = np.zeros((20, 20))
        for (i, j), v in cells.items():
            vals[i, j] = v
        return ProbabilityMap(vals, image_id=cid)

    return scorer


def test_mining_fixture():
    # map cell (i, j) sits at pixel (38 + 8j, 38 + 8i)
    ds = tiny_dataset([(38 + 8 * 2 + 5, 38 + 8 * 2, "mitosis")])
    cells = {(2, 2): 0.99,  # 5 px from the mitosis
             (15, 15): 0.9,  # far false positive: the hotspot
             (5, 15): 0.4}  # below threshold
    mined = mine_hard_negatives(hotspot_scorer(cells), ds, ["a"], threshold=0.5)
    assert [(s.x, s.y, s.source) for s in mined] == [(38 + 120, 38 + 120, "mined")]


def test_mining_cap_and_order():
    ds = tiny_dataset()
    cells = {(i * 5, j * 5): 0.5 + 0.01 * (i * 4 + j) for i in range(4) for j in range(4)}
    mined = mine_hard_negatives(hotspot_scorer(cells), ds, ["a"], cap_per_image=3)
    assert len(mined) == 3
    assert (mined[0].x, mined[0].y) == (38 + 8 * 15, 38 + 8 * 15)


def test_mining_never_near_mitosis():
    rng = np.random.default_rng(5)
    pts = [(float(x), float(y), "mitosis") for x, y in rng.uniform(0, 199, (6, 2))]
    ds = tiny_dataset(pts)
    cells = {(int(i), int(j)): float(v) for i, j, v in
             zip(rng.integers(0, 20, 80), rng.integers(0, 20, 80), rng.uniform(0.5, 1, 80))}
    mit = ds.points("a")
    for s in mine_hard_negatives(hotspot_scorer(cells), ds, ["a"], cap_per_image=100):
        assert np.min(np.hypot(mit[:, 0] - s.x, mit[:, 1] - s.y)) > 30


def test_with_mined_extends_pool():
    p = pool().with_mined([Sample("a", 0, 0, 0, "mined")])
    assert p.negatives[-1].source == "mined" and len(p.negatives) == 8


# ---------------------------------------------------------------- annotations and synthetic data


def test_synthetic_counts_and_determinism(tmp_path):
    cfg = SyntheticConfig(n_images=20, targets_per_image=5)
    a = generate_synthetic_dataset(tmp_path / "a", cfg, seed=9)
    generate_synthetic_dataset(tmp_path / "b", cfg, seed=9)
    assert sum(x.label == "mitosis" for x in a.annotations) == 100
    for f in ["annotations.json"] + [c.file for c in a.cases]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synthetic_scanners_round_robin(tmp_path):
    ds = generate_synthetic_dataset(tmp_path, SyntheticConfig(n_images=6, scanners=3), seed=0)
    assert Counter(c.scanner for c in ds.cases) == {"scanner1": 2, "scanner2": 2, "scanner3": 2}


@pytest.mark.parametrize("kind", ["target", "imposter"])
@pytest.mark.parametrize("theta", [0.0, 17.3, 45.0, 88.0, 200.0])
def test_renderer_quarter_turn_exact(kind, theta):
    params = {"radius": 8.0, "arms": 5, "depth": 0.45}
    np.testing.assert_array_equal(render_object(kind, theta + 90.0, params),
                                  np.rot90(render_object(kind, theta, params)))


def test_renderer_analytic_quarter_turn():
    # the analytic renderer alone also agrees at a whole quarter turn
    from se2mitosis.synthetic import _canonical

    params = {"radius": 8.0, "arms": 5, "depth": 0.45}
    np.testing.assert_allclose(_canonical("target", math.pi / 2, params),
                               np.rot90(_canonical("target", 0.0, params)), atol=1e-12)


def test_targets_inside_margin():
    cfg = SyntheticConfig(n_images=1)
    _, anns = render_image(cfg, 0, 0, 0)
    for x, y, _ in anns:
        assert 40 <= x <= 215 and 40 <= y <= 215


def test_rotate_dataset_90(tmp_path):
    ds = generate_synthetic_dataset(tmp_path / "o", SyntheticConfig(n_images=2), seed=1)
    rot = rotate_dataset_90(ds, tmp_path / "r")
    cid = ds.case_ids[0]
    np.testing.assert_array_equal(rot.image(cid), np.rot90(ds.image(cid)))
    (x, y), (rx, ry) = ds.points(cid)[0], rot.points(cid)[0]
    assert (rx, ry) == (y, 255 - x)
    # pixel under the annotation is unchanged
    np.testing.assert_array_equal(ds.image(cid)[int(y), int(x)], rot.image(cid)[int(ry), int(rx)])
    back = Dataset.load(tmp_path / "r" / "annotations.json")
    np.testing.assert_array_equal(back.image(cid), rot.image(cid))


def test_annotation_round_trip_and_validation(tmp_path):
    recs = [ImageRecord("a", "a.png", 10, 10, "S")]
    save_annotations(tmp_path / "ok.json", recs, [Annotation("a", 1.5, 2.0, "imposter")])
    assert load_annotations(tmp_path / "ok.json")[1] == [Annotation("a", 1.5, 2.0, "imposter")]
    for bad in ([Annotation("b", 1, 1, "mitosis")], [Annotation("a", 10, 1, "mitosis")],
                [Annotation("a", 1, 1, "other")]):
        save_annotations(tmp_path / "bad.json", recs, bad)
        with pytest.raises(DataError):
            load_annotations(tmp_path / "bad.json")


def test_malformed_json_reports_line(tmp_path):
    (tmp_path / "x.json").write_text('{"images": [\n  {"id": }\n]}')
    with pytest.raises(DataError, match=r"x.json:2"):
        load_annotations(tmp_path / "x.json")


def test_image_size_mismatch(tmp_path):
    ds = generate_synthetic_dataset(tmp_path, SyntheticConfig(n_images=1), seed=0)
    rec = ds.cases[0]
    wrong = Dataset([ImageRecord(rec.id, rec.file, 100, 100, rec.scanner)], [], tmp_path)
    with pytest.raises(DataError, match="annotation says"):
        wrong.image(rec.id)
