import math
from itertools import combinations

import numpy as np
import pytest

from attnguide import (AttentionStack, CircularMask, GroupingRegion, LossWeights, Metrics, RegionConfig,
                       ShapeError, TokenSpec, ValidationError, ZeroMassError, ZeroVectorError, agg_attr_loss,
                       agg_sub_loss, agg_sub_loss_cos, identify_regions, iso_loss, iso_loss_all,
                       iso_loss_cos, max_loss, multi_encoder_weights, total_loss)
from attnguide.losses import region_config_for
from helpers import point_region_map, proportional_disjoint_regions


def point_regions(points, shape=(16, 16)):
    v = point_region_map(points, shape)
    return [GroupingRegion.from_map(v, CircularMask(p, 1.0)) for p in points]


# -- aggregation ---------------------------------------------------------------

def test_agg_one_region_is_zero():
    assert agg_sub_loss(point_regions([(5, 5)])) == 0.0


def test_agg_two_regions_3_4_5():
    assert agg_sub_loss(point_regions([(0, 0), (3, 4)])) == 10.0


def test_agg_three_regions():
    assert agg_sub_loss(point_regions([(0, 0), (0, 3), (4, 0)])) == 24.0


def test_attr_matches_sub_form():
    regs = point_regions([(0, 0), (0, 3), (4, 0)])
    assert agg_attr_loss(regs) == agg_sub_loss(regs) == 24.0
    assert agg_attr_loss(regs[:1]) == 0.0


def test_attribute_copy_of_subject_gives_equal_loss():
    v = np.random.default_rng(2).random((12, 12))
    stack = AttentionStack(np.stack([v, v]), ("bowl", "red"))
    tokens = [TokenSpec("bowl"), TokenSpec("red", "attribute", bound_subject="bowl")]
    cfgs = {"bowl": RegionConfig(3, 4.0), "red": RegionConfig(3, 4.0)}
    L = total_loss(stack, tokens, region_cfgs=cfgs)
    assert L.agg_attr == L.agg_sub


def test_agg_cos_identical_regions_zero():
    v = np.zeros((12, 12))
    rng = np.random.default_rng(0)
    patch = rng.random((3, 3))
    v[1:4, 1:4] = patch
    v[7:10, 7:10] = patch
    r1 = GroupingRegion.from_map(v, CircularMask((2, 2), 1.5))
    r2 = GroupingRegion.from_map(v, CircularMask((8, 8), 1.5))
    assert agg_sub_loss_cos([r1, r2], v) == pytest.approx(0.0, abs=1e-15)


def test_agg_cos_proportional_zero_while_euclidean_positive():
    v, regions = proportional_disjoint_regions()
    assert len(regions) == 2
    assert agg_sub_loss_cos(regions, v) == 0.0
    assert agg_sub_loss(regions) > 0


def test_agg_cos_random_pair_matches_dot_norm_oracle():
    v = np.random.default_rng(8).random((16, 16))
    regions = identify_regions(v, RegionConfig(2, 3.0))
    a, b = (r.disk_vector(v) for r in regions)
    cos = sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
    assert agg_sub_loss_cos(regions, v) == pytest.approx(2 * (1 - cos), rel=1e-12)


def test_agg_cos_zero_fills_clipped_positions():
    v = np.random.default_rng(1).random((8, 8))
    edge = GroupingRegion.from_map(v, CircularMask((0, 0), 2.0))
    inner = GroupingRegion.from_map(v, CircularMask((4, 4), 2.0))
    vec = edge.disk_vector(v)
    assert len(vec) == len(inner.disk_vector(v)) == 13
    assert np.count_nonzero(vec) == edge.count == 6
    # without the full map the in-bounds values are zero-filled the same way
    assert agg_sub_loss_cos([edge, inner]) == agg_sub_loss_cos([edge, inner], v)


def test_agg_cos_unequal_radii_and_zero_vectors():
    v = np.ones((8, 8))
    with pytest.raises(ShapeError):
        agg_sub_loss_cos([GroupingRegion.from_map(v, CircularMask((2, 2), 1.0)),
                          GroupingRegion.from_map(v, CircularMask((5, 5), 2.0))], v)
    z = np.zeros((8, 8))
    z[1, 1] = 1
    with pytest.raises(ZeroVectorError):
        agg_sub_loss_cos([GroupingRegion.from_map(z, CircularMask((1, 1), 1.0)),
                          GroupingRegion.from_map(z, CircularMask((6, 6), 1.0))], z)


def test_zero_mass_region_centroid_raises():
    z = np.zeros((6, 6))
    z[0, 0] = 1.0
    empty = GroupingRegion.from_map(z, CircularMask((4, 4), 1.0))
    with pytest.raises(ZeroMassError):
        agg_sub_loss([GroupingRegion.from_map(z, CircularMask((0, 0), 1.0)), empty])


# -- isolation -----------------------------------------------------------------

def test_iso_identical_maps_is_one():
    v = np.random.default_rng(0).random((9, 9))
    assert iso_loss(v, v) == 1.0


def test_iso_corner_point_masses():
    a = point_region_map([(0, 0)])
    b = point_region_map([(15, 15)])
    exact = 1 - math.sqrt(15 ** 2 + 15 ** 2) / math.sqrt(512)
    assert iso_loss(a, b) == pytest.approx(exact, abs=1e-9)
    assert iso_loss(a, b) == pytest.approx(0.0625, abs=1e-12)


def test_iso_random_pair_matches_scalar_formula():
    rng = np.random.default_rng(21)
    a, b = rng.random((10, 13)), rng.random((10, 13))

    def cent(m):
        tot = sum(m[i, j] for i in range(10) for j in range(13))
        return (sum(i * m[i, j] for i in range(10) for j in range(13)) / tot,
                sum(j * m[i, j] for i in range(10) for j in range(13)) / tot)

    (ah, aw), (bh, bw) = cent(a), cent(b)
    expected = 1 - math.hypot(ah - bh, aw - bw) / math.sqrt(13 ** 2 + 10 ** 2)
    assert iso_loss(a, b) == pytest.approx(expected, rel=1e-12)
    assert iso_loss(a, b) == iso_loss(b, a)


def test_iso_errors():
    with pytest.raises(ShapeError):
        iso_loss(np.ones((3, 3)), np.ones((3, 4)))
    with pytest.raises(ZeroMassError):
        iso_loss(np.zeros((3, 3)), np.ones((3, 3)))


def test_iso_cos_cases():
    rng = np.random.default_rng(4)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    assert iso_loss_cos(a, a) == pytest.approx(1.0, abs=1e-15)
    assert iso_loss_cos(point_region_map([(0, 0)]), point_region_map([(3, 3)])) == 0.0
    expected = float((a * b).sum() / math.sqrt((a * a).sum() * (b * b).sum()))
    assert iso_loss_cos(a, b) == pytest.approx(expected, rel=1e-13)


def test_iso_all_reductions():
    pts = {"a": (0, 0), "b": (0, 15), "c": (15, 0)}
    maps = {k: point_region_map([p]) for k, p in pts.items()}
    stack = AttentionStack(np.stack(list(maps.values())), tuple(maps))
    toks = [TokenSpec(k) for k in maps]
    assert iso_loss_all(stack, toks[:1]) == 0.0
    assert iso_loss_all(stack, toks[:2]) == iso_loss(maps["a"], maps["b"])
    d_max = math.sqrt(512)
    by_hand = [1 - 15 / d_max, 1 - 15 / d_max, 1 - math.sqrt(450) / d_max]
    assert iso_loss_all(stack, toks) == pytest.approx(sum(by_hand) / 3, rel=1e-14)


# -- max, weights --------------------------------------------------------------

@pytest.mark.parametrize("peak,expected", [(1.0, 0.0), (0.0, 1.0), (0.62, 0.38)])
def test_max_loss(peak, expected):
    v = np.zeros((4, 4))
    v[2, 3] = peak
    assert max_loss(v) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("args,expected", [((0.3, 0.3), (0.5, 0.5)), ((0.3, 0.1), (0.75, 0.25)),
                                           ((0.7, 0.0), (1.0, 0.0))])
def test_multi_encoder_weights(args, expected):
    assert multi_encoder_weights(*args) == expected


def test_multi_encoder_weights_errors():
    with pytest.raises(ZeroDivisionError):
        multi_encoder_weights(0.0, 0.0)
    with pytest.raises(ValidationError):
        multi_encoder_weights(-0.1, 0.5)


def test_metrics_parsing():
    assert Metrics.parse("euc") == Metrics("euclidean", "euclidean")
    assert Metrics.parse("cos+euc") == Metrics("cosine", "euclidean")
    assert Metrics.parse("euc+cos").label == "euc+cos"
    with pytest.raises(ValidationError):
        Metrics.parse("manhattan")
    with pytest.raises(ValidationError):
        LossWeights(agg_sub=-1)


# -- total -----------------------------------------------------------------------

def two_subject_stack(seed=0):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 12, 12)) * 2
    p = np.exp(logits) / np.exp(logits).sum(axis=0)
    tokens = (TokenSpec("cat", category="animal"), TokenSpec("bowl"),
              TokenSpec("red", "attribute", bound_subject="bowl"), TokenSpec("sot", "background"))
    return AttentionStack(p, ("cat", "bowl", "red", "sot"), normalized=True), tokens


def test_total_zero_weights():
    stack, tokens = two_subject_stack()
    assert total_loss(stack, tokens, LossWeights(0, 0, 0, 0)).total == 0.0


def test_total_single_subject():
    v = np.random.default_rng(3).random((10, 10))
    stack = AttentionStack(v[None], ("s",))
    w = LossWeights()
    L = total_loss(stack, [TokenSpec("s")], w)
    regs = identify_regions(v, RegionConfig(3, 5.0))
    assert L.iso == 0.0 and L.agg_attr == 0.0
    assert L.total == w.agg_sub * agg_sub_loss(regs) + w.max * max_loss(v)


def test_total_two_subject_scalar_assembly():
    stack, tokens = two_subject_stack(5)
    w = LossWeights()
    L = total_loss(stack, tokens, w)
    cat_regs = identify_regions(stack["cat"], RegionConfig(2, 2.0))
    bowl_regs = identify_regions(stack["bowl"], RegionConfig(3, 5.0))
    red_regs = identify_regions(stack["red"], RegionConfig(3, 6.0))
    agg = (agg_sub_loss(cat_regs) + agg_sub_loss(bowl_regs)) / 2
    mx = (max_loss(stack["cat"]) + max_loss(stack["bowl"])) / 2
    iso = iso_loss(stack["cat"], stack["bowl"])
    attr = agg_attr_loss(red_regs)
    assert L.agg_sub == pytest.approx(agg, rel=1e-14)
    assert L.max == pytest.approx(mx, rel=1e-14)
    assert L.iso == pytest.approx(iso, rel=1e-14)
    assert L.agg_attr == pytest.approx(attr, rel=1e-14)
    assert L.total == pytest.approx(1.25 * agg + 2 * iso + 0.25 * mx + 0.75 * attr, rel=1e-14)
    assert L.per_pair == {("cat", "bowl"): L.iso}


def test_total_with_cosine_metrics():
    stack, tokens = two_subject_stack(6)
    L = total_loss(stack, tokens, metrics=Metrics.parse("cos"))
    bowl_regs = identify_regions(stack["bowl"], RegionConfig(3, 5.0))
    assert L.per_token["bowl"]["agg_sub"] == pytest.approx(
        agg_sub_loss_cos(bowl_regs, stack["bowl"].values), rel=1e-14)
    assert L.iso == pytest.approx(iso_loss_cos(stack["cat"], stack["bowl"]), rel=1e-14)


def test_total_scheduled_radius_follows_step():
    stack, tokens = two_subject_stack(7)
    late = total_loss(stack, tokens, step=24)
    regs = identify_regions(stack["cat"], RegionConfig(2, 8.0))
    assert late.per_token["cat"]["agg_sub"] == pytest.approx(agg_sub_loss(regs), rel=1e-14)


def test_total_requires_maps_for_tokens():
    stack, tokens = two_subject_stack()
    with pytest.raises(ValidationError):
        total_loss(stack, tokens + (TokenSpec("dog"),))


def test_region_config_lookup_order():
    cfgs = {"cat": RegionConfig(1, 1.0)}
    assert region_config_for(TokenSpec("cat", category="animal"), cfgs) == RegionConfig(1, 1.0)
    assert region_config_for(TokenSpec("dog", category="animal"), cfgs).radius_end == 8.0
    red = TokenSpec("red", "attribute", bound_subject="x")
    assert region_config_for(red) == RegionConfig(3, 6.0)


def test_breakdown_recombines():
    for seed in range(5):
        stack, tokens = two_subject_stack(seed)
        w = LossWeights(0.3, 1.7, 0.9, 0.4)
        L = total_loss(stack, tokens, w)
        parts = w.agg_sub * L.agg_sub + w.iso * L.iso + w.max * L.max + w.agg_attr * L.agg_attr
        assert abs(L.total - parts) <= 1e-9
        pairs = list(combinations(["cat", "bowl"], 2))
        assert list(L.per_pair) == pairs


def test_agg_scale_invariances():
    v = np.random.default_rng(13).random((14, 14))
    regs = identify_regions(v, RegionConfig(3, 3.0))
    scaled = [GroupingRegion.from_map(5.0 * v, r.mask) for r in regs]
    assert agg_sub_loss(scaled) == pytest.approx(agg_sub_loss(regs), rel=1e-14)
    # cosine: each region may be scaled by its own factor
    w = v.copy()
    for r, f in zip(regs[1:], (3.0, 0.2)):
        cells = r.coords
        w[cells[:, 0], cells[:, 1]] *= f
    rescaled = [GroupingRegion.from_map(w, r.mask) for r in regs]
    if not any(a.mask.contains(*c) for a in regs for b in regs if a is not b for c in b.coords):
        assert agg_sub_loss_cos(rescaled, w) == pytest.approx(agg_sub_loss_cos(regs, v), rel=1e-12)
