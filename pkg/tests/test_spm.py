import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from glandseg.imaging import BACKGROUND, BORDER, INTERIOR, Image, LabelMap
from glandseg.nn_core import finite_difference_check, softmax_channels
from glandseg.spm import (
    MiningReport,
    RegionMap,
    SpmConfig,
    assemble_proposal,
    cluster_label,
    encoder_forward,
    fill_interior,
    kmeans,
    loss_sc,
    loss_sc_grad,
    loss_ss,
    loss_ss_grad,
    mine_proposal,
    mine_report,
    region_gray_means,
    select_border_region,
    train_encoder,
)


def fill_oracle(border):
    """Independent reachability sweep: grow edge-connected free pixels."""
    free = ~border
    reached = np.zeros_like(free)
    reached[0, :] = free[0, :]
    reached[-1, :] = free[-1, :]
    reached[:, 0] |= free[:, 0]
    reached[:, -1] |= free[:, -1]
    while True:
        grow = reached.copy()
        grow[1:, :] |= reached[:-1, :]
        grow[:-1, :] |= reached[1:, :]
        grow[:, 1:] |= reached[:, :-1]
        grow[:, :-1] |= reached[:, 1:]
        grow &= free
        if np.array_equal(grow, reached):
            return free & ~reached
        reached = grow


def ring_mask(h, w, top, left, bottom, right):
    m = np.zeros((h, w), dtype=bool)
    m[top:bottom + 1, left] = True
    m[top:bottom + 1, right] = True
    m[top, left:right + 1] = True
    m[bottom, left:right + 1] = True
    return m


def test_config_validation():
    with pytest.raises(ValueError):
        SpmConfig(feature_dim=1)
    with pytest.raises(ValueError):
        SpmConfig(iterations=-1)
    with pytest.raises(ValueError):
        SpmConfig(kmeans_k=0)
    with pytest.raises(ValueError):
        SpmConfig(precision="double")


def test_config_dtype_switch():
    assert SpmConfig(precision="fast").dtype == np.float32
    assert SpmConfig(precision="check").dtype == np.float64


def test_loss_ss_uniform_map():
    d, h, w = 4, 2, 3
    F = np.full((d, h, w), 1.0 / d)
    C = LabelMap(np.zeros((h, w), dtype=np.uint8), num_classes=d)
    assert loss_ss(F, C) == pytest.approx(h * w * np.log(d))


def test_loss_ss_picks_labeled_channel():
    F = np.array([[[0.9]], [[0.1]]])
    c0 = LabelMap(np.zeros((1, 1), dtype=np.uint8), num_classes=2)
    c1 = LabelMap(np.ones((1, 1), dtype=np.uint8), num_classes=2)
    assert loss_ss(F, c0) == pytest.approx(-np.log(0.9))
    assert loss_ss(F, c1) == pytest.approx(-np.log(0.1))


def test_loss_ss_grad_matches_finite_differences(rng):
    F = softmax_channels(rng.normal(size=(5, 4, 4)))
    C = cluster_label(F)
    _, g = loss_ss_grad(F, C)

    def loss():
        return loss_ss(F, C)

    assert finite_difference_check(loss, [F], [g]) < 1e-6


def test_loss_ss_grad_value_agrees(rng):
    F = softmax_channels(rng.normal(size=(3, 5, 5)))
    C = cluster_label(F)
    v, _ = loss_ss_grad(F, C)
    assert v == pytest.approx(loss_ss(F, C))


def test_loss_sc_constant_map_is_zero():
    F = np.full((4, 6, 6), 0.25)
    assert loss_sc(F, 2) == 0.0


def test_loss_sc_single_step_hand_value():
    F = np.zeros((1, 1, 3))
    F[0, 0] = [0.0, 1.0, 3.0]
    # shift 1 along width: (1-0)^2 + (3-1)^2 = 5
    assert loss_sc(F, 1) == pytest.approx(5.0)
    # shift 2 adds (3-0)^2 = 9
    assert loss_sc(F, 2) == pytest.approx(14.0)


def test_loss_sc_rejects_bad_shift():
    with pytest.raises(ValueError):
        loss_sc(np.zeros((1, 2, 2)), 0)
    with pytest.raises(ValueError):
        loss_sc_grad(np.zeros((1, 2, 2)), 0)


def test_loss_sc_grad_matches_finite_differences(rng):
    F = rng.normal(size=(3, 5, 4))
    v, g = loss_sc_grad(F, 2)
    assert v == pytest.approx(loss_sc(F, 2))

    def loss():
        return loss_sc(F, 2)

    assert finite_difference_check(loss, [F], [g]) < 1e-6


def test_cluster_label_argmax_with_low_index_ties():
    F = np.zeros((3, 1, 2))
    F[:, 0, 0] = [0.2, 0.5, 0.3]
    F[:, 0, 1] = [0.4, 0.4, 0.2]
    lm = cluster_label(F)
    assert lm.data[0, 0] == 1
    assert lm.data[0, 1] == 0
    assert lm.num_classes == 3


def test_encoder_forward_map_properties(rng):
    img = Image(data=rng.random((3, 8, 8)))
    cfg = SpmConfig(feature_dim=6, iterations=0)
    enc, curve = train_encoder(img, cfg)
    assert curve == []
    probs, normed = encoder_forward(img, enc)
    assert probs.shape == (6, 8, 8) and normed.shape == (6, 8, 8)
    assert np.allclose(probs.sum(axis=0), 1.0, atol=1e-5)
    assert np.allclose(np.sum(normed * normed, axis=0), 1.0, atol=1e-5)


def test_train_encoder_deterministic(rng):
    img = Image(data=rng.random((3, 10, 10)))
    cfg = SpmConfig(feature_dim=4, iterations=5, seed=3)
    enc1, curve1 = train_encoder(img, cfg)
    enc2, curve2 = train_encoder(img, cfg)
    assert curve1 == curve2
    for a, b in zip(enc1.params(), enc2.params()):
        assert np.array_equal(a, b)


def test_train_encoder_records_each_iteration():
    rng = np.random.default_rng(0)
    img = Image(data=rng.random((3, 8, 8)))
    _, curve = train_encoder(img, SpmConfig(feature_dim=4, iterations=7))
    assert len(curve) == 7
    assert all(np.isfinite(v) for v in curve)


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(5)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    pts = np.concatenate([c + 0.05 * rng.normal(size=(6, 2)) for c in centers])
    F = pts.T.reshape(2, 4, 6)
    cfg = SpmConfig(kmeans_k=4, kmeans_restarts=3, kmeans_seed=1)
    rm = kmeans(F, cfg)
    assert sorted(rm.counts) == [6, 6, 6, 6]
    assert not rm.underpopulated
    lab = rm.labels.data.ravel()
    for blob in range(4):
        assert len(set(lab[blob * 6:(blob + 1) * 6])) == 1


def test_kmeans_deterministic(rng):
    F = rng.random((4, 6, 6))
    cfg = SpmConfig(kmeans_k=5, kmeans_seed=9)
    a = kmeans(F, cfg)
    b = kmeans(F, cfg)
    assert np.array_equal(a.labels.data, b.labels.data)
    assert a.counts == b.counts


def test_kmeans_underpopulated_flag():
    F = np.full((3, 4, 4), 0.5)
    rm = kmeans(F, SpmConfig(kmeans_k=5))
    assert rm.underpopulated
    assert sum(c > 0 for c in rm.counts) == 1


def test_region_map_validates_counts():
    lm = LabelMap(np.zeros((2, 2), dtype=np.uint8), num_classes=2)
    with pytest.raises(ValueError):
        RegionMap(lm, counts=(3, 0))
    with pytest.raises(ValueError):
        RegionMap(lm, counts=(4,))


def test_region_gray_means_hand_example():
    lab = LabelMap(np.array([[0, 0], [1, 2]], dtype=np.uint8), num_classes=4)
    rm = RegionMap(lab, counts=(2, 1, 1, 0))
    gray = np.array([[0.2, 0.4], [0.9, 0.1]])
    means = region_gray_means(rm, gray)
    assert means[0] == pytest.approx(0.3)
    assert means[1] == pytest.approx(0.9)
    assert means[2] == pytest.approx(0.1)
    assert np.isnan(means[3])


def test_select_border_prefers_darkest_region():
    lab = LabelMap(np.array([[0, 1], [1, 0]], dtype=np.uint8), num_classes=2)
    rm = RegionMap(lab, counts=(2, 2))
    gray = np.array([[0.1, 0.8], [0.8, 0.1]])
    assert np.array_equal(select_border_region(rm, gray), lab.data == 1)


def test_select_border_ignores_empty_regions():
    lab = LabelMap(np.zeros((2, 2), dtype=np.uint8), num_classes=3)
    rm = RegionMap(lab, counts=(4, 0, 0))
    gray = np.full((2, 2), 0.5)
    assert select_border_region(rm, gray).all()


def test_fill_closed_ring():
    border = ring_mask(9, 9, 2, 2, 6, 6)
    interior = fill_interior(border)
    expect = np.zeros((9, 9), dtype=bool)
    expect[3:6, 3:6] = True
    assert np.array_equal(interior, expect)


def test_fill_broken_ring_leaks():
    border = ring_mask(9, 9, 2, 2, 6, 6)
    border[2, 4] = False
    assert not fill_interior(border).any()


def test_fill_no_border():
    assert not fill_interior(np.zeros((5, 5), dtype=bool)).any()


def test_fill_all_border():
    assert not fill_interior(np.ones((5, 5), dtype=bool)).any()


def test_fill_ring_flush_with_edge():
    border = ring_mask(6, 6, 0, 0, 5, 5)
    interior = fill_interior(border)
    expect = np.zeros((6, 6), dtype=bool)
    expect[1:5, 1:5] = True
    assert np.array_equal(interior, expect)


def test_fill_nested_rings():
    border = ring_mask(13, 13, 1, 1, 11, 11) | ring_mask(13, 13, 4, 4, 8, 8)
    interior = fill_interior(border)
    assert interior[6, 6]
    assert interior[2, 2]
    assert interior[3, 6]
    assert not interior[0, 0]


def test_fill_diagonal_gap_still_encloses():
    """Diagonal contact is enough for the border under 4-connected filling."""
    border = np.zeros((7, 7), dtype=bool)
    for i in range(1, 6):
        border[i, 1] = border[i, 5] = border[1, i] = border[5, i] = True
    border[1, 1] = False  # corner open only diagonally
    interior = fill_interior(border)
    assert interior[3, 3]


@given(hnp.arrays(np.bool_, (16, 16), elements=st.booleans()))
def test_fill_matches_oracle_on_random_masks(border):
    assert np.array_equal(fill_interior(border), fill_oracle(border))


def test_fill_interior_disjoint_from_border(rng):
    border = rng.random((20, 20)) < 0.35
    interior = fill_interior(border)
    assert not np.any(border & interior)


def test_assemble_proposal_classes():
    border = np.array([[True, False], [False, False]])
    interior = np.array([[False, True], [False, False]])
    lm = assemble_proposal(border, interior)
    assert lm.data[0, 0] == BORDER
    assert lm.data[0, 1] == INTERIOR
    assert lm.data[1, 0] == BACKGROUND
    assert lm.num_classes == 3


def test_assemble_proposal_rejects_overlap():
    m = np.array([[True]])
    with pytest.raises(ValueError):
        assemble_proposal(m, m)
    with pytest.raises(ValueError):
        assemble_proposal(np.zeros((1, 2), bool), np.zeros((2, 1), bool))


def tiny_ring_image():
    data = np.full((3, 24, 24), 0.95)
    data[:, 6:18, 6:18] = 0.1      # dark square ...
    data[:, 8:16, 8:16] = 0.55     # ... carved into a 2px ring
    return Image(data=data)


def tiny_cfg(**over):
    base = dict(feature_dim=6, iterations=15, kmeans_k=3, kmeans_restarts=2,
                seed=0, kmeans_seed=0)
    base.update(over)
    return SpmConfig(**base)


def test_mine_proposal_on_ring_image():
    prop = mine_proposal(tiny_ring_image(), tiny_cfg())
    assert prop.num_classes == 3
    assert set(np.unique(prop.data)) <= {BACKGROUND, BORDER, INTERIOR}
    # The dark ring is the obvious border candidate; its inside must fill.
    assert prop.data[12, 12] == INTERIOR
    assert prop.data[6, 12] == BORDER
    assert prop.data[0, 0] == BACKGROUND


def test_mine_proposal_deterministic():
    img = tiny_ring_image()
    a = mine_proposal(img, tiny_cfg())
    b = mine_proposal(img, tiny_cfg())
    assert np.array_equal(a.data, b.data)


def test_mine_report_diagnostics():
    rep = mine_report(tiny_ring_image(), tiny_cfg())
    assert isinstance(rep, MiningReport)
    assert len(rep.region_gray) == 3
    assert len(rep.loss_curve) == 15
    assert rep.border_region == int(np.nanargmax(rep.region_gray))
    border = rep.regions.labels.data == rep.border_region
    assert np.array_equal(rep.proposal.data == BORDER, border)
