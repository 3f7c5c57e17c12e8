import numpy as np
import pytest

from tilefuse import AffineTransform, BrainMask, Volume, build_manifold, select
from tilefuse.atlas_select import load_manifold, project, save_manifold
from tilefuse.errors import GeometryError, InsufficientDataError
from tilefuse.harmonize import znormalize


def full_mask(dims):
    return BrainMask(np.ones(dims, dtype=bool), (1.0, 1.0, 1.0),
                     AffineTransform.identity())


def make_atlases(rng, n, dims=(6, 6, 6)):
    return [(f"atlas{i}", Volume(rng.standard_normal(dims), (1, 1, 1)))
            for i in range(n)]


def test_needs_two_atlases(rng):
    with pytest.raises(InsufficientDataError):
        build_manifold(make_atlases(rng, 1), full_mask((6, 6, 6)))


def test_two_atlases_give_one_component_at_half_distance(rng):
    mask = full_mask((6, 6, 6))
    atlases = make_atlases(rng, 2)
    manifold = build_manifold(atlases, mask)
    assert manifold.components.shape[0] == 1
    z0 = znormalize(atlases[0][1]).data[mask.data]
    z1 = znormalize(atlases[1][1]).data[mask.data]
    d = np.linalg.norm(z0 - z1)
    p = manifold.atlas_projections.ravel()
    assert np.allclose(np.abs(p), d / 2.0, atol=1e-9)
    assert np.allclose(abs(p[0] - p[1]), d, atol=1e-9)


def test_identical_atlases_flag_degenerate(rng):
    data = rng.standard_normal((5, 5, 5))
    atlases = [("a", Volume(data.copy(), (1, 1, 1))),
               ("b", Volume(data.copy(), (1, 1, 1)))]
    manifold = build_manifold(atlases, full_mask((5, 5, 5)))
    assert manifold.degenerate


def test_components_orthonormal(rng):
    manifold = build_manifold(make_atlases(rng, 6), full_mask((6, 6, 6)))
    gram = manifold.components @ manifold.components.T
    assert np.allclose(gram, np.eye(5), atol=1e-8)


def test_full_rank_reconstruction(rng):
    mask = full_mask((5, 5, 5))
    atlases = make_atlases(rng, 5, dims=(5, 5, 5))
    manifold = build_manifold(atlases, mask)
    for i, (_, vol) in enumerate(atlases):
        vec = znormalize(vol).data[mask.data] - manifold.mean
        recon = manifold.atlas_projections[i] @ manifold.components
        rel = np.linalg.norm(recon - vec) / np.linalg.norm(vec)
        assert rel < 1e-6


def test_projection_preserves_pairwise_distances(rng):
    mask = full_mask((6, 6, 6))
    atlases = make_atlases(rng, 10)
    manifold = build_manifold(atlases, mask)
    vectors = np.stack([znormalize(v).data[mask.data] for _, v in atlases])
    centered = vectors - vectors.mean(axis=0)
    for i in range(10):
        for j in range(i + 1, 10):
            orig = np.linalg.norm(centered[i] - centered[j])
            proj = np.linalg.norm(manifold.atlas_projections[i]
                                  - manifold.atlas_projections[j])
            assert abs(orig - proj) <= 1e-6 * max(orig, 1e-30)


def test_select_self_returns_self(rng):
    mask = full_mask((6, 6, 6))
    atlases = make_atlases(rng, 8)
    manifold = build_manifold(atlases, mask)
    for name, vol in atlases:
        assert select(manifold, vol, n=1) == [name]


def test_select_all_sorted_by_distance(rng):
    mask = full_mask((6, 6, 6))
    atlases = make_atlases(rng, 7)
    manifold = build_manifold(atlases, mask)
    test_vol = Volume(rng.standard_normal((6, 6, 6)), (1, 1, 1))
    picked = select(manifold, test_vol, n=7)
    assert sorted(picked) == sorted(m for m, _ in atlases)
    p = project(manifold, test_vol)
    dist = {name: np.linalg.norm(manifold.atlas_projections[i] - p)
            for i, name in enumerate(manifold.atlas_ids)}
    assert picked == sorted(picked, key=lambda name: dist[name])


def test_select_matches_centered_space_oracle(rng):
    mask = full_mask((6, 6, 6))
    atlases = make_atlases(rng, 10)
    manifold = build_manifold(atlases, mask)
    test_vol = Volume(rng.standard_normal((6, 6, 6)), (1, 1, 1))
    picked = select(manifold, test_vol, n=10)

    # oracle: distances in the original masked-vector space after centering
    # and projection onto the atlas span
    vectors = np.stack([znormalize(v).data[mask.data] for _, v in atlases])
    mean = vectors.mean(axis=0)
    centered = vectors - mean
    q, _ = np.linalg.qr(centered.T[:, :-1])  # orthonormal basis of the span
    test_c = (znormalize(test_vol).data[mask.data] - mean) @ q
    atlas_c = centered @ q
    dists = np.linalg.norm(atlas_c - test_c, axis=1)
    expected = [manifold.atlas_ids[i] for i in np.argsort(dists, kind="stable")]
    assert picked == expected


def test_select_too_many_rejected(rng):
    manifold = build_manifold(make_atlases(rng, 3), full_mask((6, 6, 6)))
    with pytest.raises(InsufficientDataError):
        select(manifold, Volume(np.zeros((6, 6, 6)) + np.arange(6), (1, 1, 1)),
               n=4)


def test_degenerate_select_falls_back_to_id_order(rng, caplog):
    data = rng.standard_normal((5, 5, 5))
    atlases = [(name, Volume(data.copy(), (1, 1, 1))) for name in "abc"]
    manifold = build_manifold(atlases, full_mask((5, 5, 5)))
    import logging

    with caplog.at_level(logging.WARNING, logger="tilefuse.atlas_select"):
        picked = select(manifold, atlases[0][1], n=2)
    assert picked == ["a", "b"]
    assert any("degenerate" in r.message for r in caplog.records)


def test_grid_mismatch_rejected(rng):
    manifold = build_manifold(make_atlases(rng, 3), full_mask((6, 6, 6)))
    with pytest.raises(GeometryError):
        select(manifold, Volume(rng.standard_normal((4, 4, 4)), (1, 1, 1)), n=1)


def test_manifold_save_load_roundtrip(tmp_path, rng):
    mask = full_mask((5, 5, 5))
    manifold = build_manifold(make_atlases(rng, 4, dims=(5, 5, 5)), mask)
    files = save_manifold(manifold, tmp_path)
    back = load_manifold(tmp_path, files, list(manifold.atlas_ids), mask)
    assert np.array_equal(back.mean, manifold.mean)
    assert np.array_equal(back.components, manifold.components)
    assert np.array_equal(back.atlas_projections, manifold.atlas_projections)
    assert back.atlas_ids == manifold.atlas_ids
    assert back.degenerate == manifold.degenerate
