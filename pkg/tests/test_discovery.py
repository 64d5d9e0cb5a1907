import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gandisco.discovery import (DiscoveryConfig, DiscoveryError, ProposalConfig, PseudoGT, PseudoSample,
                                augment_with_synth, box_mean_scores, connected_components, extract_pseudo_gt,
                                grid_proposals, ncc_map, paste, template_match, template_match_detail, top_k_boxes)
from gandisco.geometry import Box, HeatMap, resize_bilinear
from gandisco.networks import GanNetworks, NetConfig
from gandisco.scenegen import Scene, SceneSpec, generate_scene, privileged_access

from oracles import flood_fill_count


def test_grid_count_single_scale():
    assert len(grid_proposals(32, ProposalConfig(windows=(16,), stride=8))) == 9


def test_grid_default_in_bounds_and_deterministic():
    a, b = grid_proposals(32), grid_proposals(32)
    assert a == b and len(set(a)) == len(a)
    assert len({p.w for p in a}) >= 3
    assert all(p.x2 <= 32 and p.y2 <= 32 for p in a)


def test_grid_rejects_too_small_image():
    with pytest.raises(DiscoveryError):
        grid_proposals(8)


def test_box_mean_scores_brute_force(rng):
    s = rng.random((12, 12))
    props = grid_proposals(12, ProposalConfig(windows=(3, 5), stride=2))
    ref = [s[int(b.y):int(b.y2), int(b.x):int(b.x2)].mean() for b in props]
    assert np.allclose(box_mean_scores(s, props), ref, atol=1e-12)


def test_top_k_all_sorted():
    props = grid_proposals(16, ProposalConfig(windows=(4, 8), stride=4))
    s = np.random.default_rng(0).random((16, 16))
    top = top_k_boxes(HeatMap(s), props, len(props))
    scores = [b.score for b in top]
    assert len(top) == len(props) and scores == sorted(scores, reverse=True)


def test_top_k_delta_prefers_smallest_containing_box():
    props = grid_proposals(32)
    s = np.zeros((32, 32))
    s[13, 17] = 1.0
    top = top_k_boxes(HeatMap(s), props, 1)[0]
    means = box_mean_scores(s, props)
    best = max(range(len(props)), key=lambda i: (means[i], -props[i].area, -i))
    assert top == props[best].with_(score=top.score) and top.contains_point(17, 13) and top.w == 10


def test_top_k_uniform_orders_by_area_then_scan():
    props = grid_proposals(32)
    top = top_k_boxes(HeatMap(np.ones((32, 32))), props, 5)
    assert all(b.w == 10 for b in top) and [b.as_tuple() for b in top] == [p.as_tuple() for p in props[:5]]


def test_top_k_errors():
    with pytest.raises(DiscoveryError):
        top_k_boxes(HeatMap(np.ones((4, 4))), [], 1)
    with pytest.raises(DiscoveryError):
        top_k_boxes(HeatMap(np.ones((4, 4))), [Box(0, 0, 2, 2)], 2)


def test_ncc_matches_brute_force(rng):
    img, tpl = rng.random((1, 10, 10)), rng.random((1, 4, 3))
    out = ncc_map(img, tpl)
    for y, x in itertools.product(range(7), range(8)):
        w = img[0, y:y + 4, x:x + 3].ravel()
        t = tpl.ravel()
        ref = np.dot(w - w.mean(), t - t.mean()) / (np.linalg.norm(w - w.mean()) * np.linalg.norm(t - t.mean()))
        assert out[y, x] == pytest.approx(ref, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_exact_crop_is_found(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((1, 20, 20))
    x0, y0 = (int(v) for v in rng.integers(0, 14, 2))
    tpl = img[:, y0:y0 + 6, x0:x0 + 6]
    m = template_match_detail(img, tpl, (1.0,))
    b = m.best_box()
    assert (b.x, b.y) == (x0, y0) and m.heatmap.argmax() == (x0 + 3, y0 + 3)
    assert 0 <= m.heatmap.scores.min() and m.heatmap.scores.max() <= 1.0


def test_constant_image_scores_zero():
    heat = template_match(np.full((1, 16, 16), 0.4), np.random.default_rng(0).random((1, 5, 5)), (1.0,))
    assert np.all(heat.scores == 0)


def test_scaled_object_peak_near_centre():
    rng = np.random.default_rng(3)
    tpl = np.zeros((1, 8, 8))
    tpl[0, 2:6, 1:7] = 1.0
    tpl[0, 3:5, 3:5] = 0.3
    obj = resize_bilinear(tpl, 10, 10)
    img = 0.05 * rng.random((1, 32, 32))
    img[:, 12:22, 5:15] += obj
    heat = template_match(img, tpl, (0.75, 1.0, 1.25))
    cx, cy = heat.argmax()
    assert abs(cx - 10) <= 2 and abs(cy - 17) <= 2


def test_oversized_scales_warn_then_fail():
    img = np.random.default_rng(0).random((1, 10, 10))
    with pytest.warns(UserWarning):
        template_match(img, img[:, :8, :8], (1.0, 1.5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(DiscoveryError):
            template_match(img, img[:, :8, :8], (2.0,))


def test_components_blobs():
    s = np.zeros((10, 10))
    s[1:3, 1:3] = 1.0
    s[6:9, 5:9] = 0.8
    comps = connected_components(HeatMap(s))
    assert len(comps) == 2 and comps[0].box.as_tuple() == (1, 1, 2, 2)
    one = connected_components(HeatMap(s[:5, :5]))
    assert len(one) == 1 and one[0].box.contains_point(*HeatMap(s[:5, :5]).argmax())
    assert connected_components(HeatMap(np.zeros((4, 4)))) == []
    with pytest.raises(DiscoveryError):
        connected_components(HeatMap(s), 0.0)


def test_components_diagonal_is_connected():
    assert len(connected_components(HeatMap(np.eye(5)))) == 1


def test_components_match_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(100):
        binary = rng.random((16, 16)) < 0.4
        comps = connected_components(HeatMap(binary.astype(float)), 1.0)
        assert len(comps) == flood_fill_count(binary)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 1.0))
def test_component_boxes_hold_a_cell_above_threshold(seed, frac):
    s = np.random.default_rng(seed).random((12, 12)) ** 3
    for c in connected_components(HeatMap(s), frac):
        x, y, w, h = (int(v) for v in c.box.as_tuple())
        assert (s[y:y + h, x:x + w] >= frac * s.max()).any()


TINY = NetConfig(enc_channels=(4, 4, 8), gen_channels=(8, 4, 4), disc_channels=(4, 4, 4), d_vis=16, d_loc=4,
                 disc_hidden=8)


def test_extract_pseudo_gt_firewall_and_determinism():
    nets = GanNetworks(TINY, seed=0)
    scene = generate_scene(4, SceneSpec(mode="weak"))
    before = privileged_access.count
    a = extract_pseudo_gt(scene, nets, scene_index=4)
    b = extract_pseudo_gt(scene, nets, scene_index=4)
    assert privileged_access.count == before
    assert [s.box for s in a.samples] == [s.box for s in b.samples]
    for s in a.samples:
        assert s.category in scene.labels and s.box.inside(32, 32) and s.scene_index == 4


def test_extract_rejects_unknown_category():
    scene = generate_scene(0)
    bogus = Scene(scene.image, [(9, Box(0, 0, 4, 4))], "weak")
    with pytest.raises(DiscoveryError):
        extract_pseudo_gt(bogus, GanNetworks(TINY))


def test_augment_doubles_and_pastes():
    nets = GanNetworks(TINY, seed=1)
    assert len(augment_with_synth(PseudoGT(), nets)) == 0
    img = np.zeros((1, 32, 32))
    pseudo = PseudoGT([PseudoSample(i, img, i % 2, Box(4 * i, 3, 10, 12, category=i % 2)) for i in range(3)])
    out = augment_with_synth(pseudo, nets)
    assert len(out) == 6 and sum(s.synthetic for s in out.samples) == 3
    for s in out.samples[3:]:
        b = s.box
        inside = s.image[:, int(b.y):int(b.y2), int(b.x):int(b.x2)]
        assert inside.min() > 0 and s.image.sum() == pytest.approx(inside.sum())
    assert set(out.per_scene()) == {0, 1, 2}


def test_paste_clips_to_image():
    out = paste(np.zeros((1, 8, 8)), np.ones((1, 4, 4)), Box(6, 6, 4, 4))
    assert out[:, 6:, 6:].min() == 1.0 and out.sum() == 4.0
