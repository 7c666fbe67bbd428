import itertools

import numpy as np
import pytest
from shapely.geometry import LineString, Polygon, box

from beamscene.scene import (
    Building,
    BuildingSpec,
    Environment,
    GenerationError,
    PointCloud,
    default_layout,
    generate_environment,
    make_building_catalog,
    ms_positions,
    synthesize_point_cloud,
)


@pytest.fixture(scope="module")
def layout():
    return default_layout()


@pytest.fixture(scope="module")
def catalog():
    return make_building_catalog()


def test_catalog_matches_building_table(catalog):
    assert [(s.type_id, s.length_m, s.width_m, s.height_m) for s in catalog] == [
        ("A", 25.6, 18.5, 25.0),
        ("B", 20.0, 14.0, 25.0),
        ("C", 12.0, 9.0, 15.0),
    ]
    assert len(catalog) == 3
    assert sorted(s.height_m for s in catalog) == [15, 25, 25]


def test_building_spec_rejects_nonpositive():
    with pytest.raises(ValueError):
        BuildingSpec("X", 1.0, 0.0, 2.0)


def test_default_layout_parameters(layout):
    assert layout.bs_position.tolist() == [0.0, 0.0, 10.0]
    assert layout.track_start.tolist() == [-40.0, 60.0, 2.0]
    assert layout.track_end.tolist() == [40.0, 60.0, 2.0]
    assert layout.track_length == pytest.approx(80.0)
    assert len(ms_positions(layout)) == 161
    widths = layout.sa_rects[:, 2] - layout.sa_rects[:, 0]
    depths = layout.sa_rects[:, 3] - layout.sa_rects[:, 1]
    np.testing.assert_allclose(widths, 36.5)
    np.testing.assert_allclose(depths, 35.6)
    # near row ends at q = 45
    np.testing.assert_allclose(layout.sa_rects[:4, 3], 45.0)


def test_sas_disjoint_and_clear_of_track(layout):
    rects = [box(*r) for r in layout.sa_rects]
    for a, b in itertools.combinations(rects, 2):
        assert a.intersection(b).area == 0
    track = LineString([layout.track_start[:2], layout.track_end[:2]])
    for r in rects:
        assert not r.intersects(track)


def test_mid_row_sas_cut_the_bs_track_corridor(layout):
    corridor = Polygon([layout.bs_position[:2], layout.track_start[:2], layout.track_end[:2]])
    hits = [i + 1 for i, r in enumerate(layout.sa_rects) if box(*r).intersection(corridor).area > 0]
    assert 2 in hits and 3 in hits
    # the far row lies behind the track
    assert not any(h >= 5 for h in hits)


def test_generate_is_deterministic(layout, catalog):
    assert generate_environment(layout, catalog, 1234) == generate_environment(layout, catalog, 1234)
    assert generate_environment(layout, catalog, 1234) != generate_environment(layout, catalog, 1235)


def _footprints_overlap(a: Building, b: Building) -> bool:
    return bool(np.all(a.lo[:2] < b.hi[:2]) and np.all(b.lo[:2] < a.hi[:2]))


def test_generated_environments_satisfy_constraints(layout, catalog):
    for seed in range(1000):
        env = generate_environment(layout, catalog, seed)
        occ = env.occupied
        assert len(env.buildings) == 5
        assert len(set(occ)) == 5 and all(1 <= s <= 8 for s in occ)
        assert 2 in occ or 3 in occ
        for b in env.buildings:
            xlo, ylo, xhi, yhi = layout.sa_rects[b.sa_index - 1]
            assert xlo <= b.lo[0] and b.hi[0] <= xhi
            assert ylo <= b.lo[1] and b.hi[1] <= yhi
            assert b.lo[2] == 0.0 and b.hi[2] == b.spec.height_m
        for a, b in itertools.combinations(env.buildings, 2):
            assert not _footprints_overlap(a, b)


def test_sa_occupancy_follows_conditional_uniform_law(layout, catalog):
    # oracle: enumerate every admissible 5-subset of the 8 SAs
    admissible = [s for s in itertools.combinations(range(1, 9), 5) if 2 in s or 3 in s]
    expected = {k: sum(k in s for s in admissible) / len(admissible) for k in range(1, 9)}
    assert len(admissible) == 50 and expected[1] == pytest.approx(0.6)

    n = 10_000
    counts = np.zeros(9)
    for seed in range(n):
        for s in generate_environment(layout, catalog, seed).occupied:
            counts[s] += 1
    for k in (1, 4, 5, 6, 7, 8):
        p = expected[k]
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(counts[k] / n - p) < 3 * sigma, (k, counts[k] / n, p)


def test_generation_failure_when_building_cannot_fit(layout):
    huge = [BuildingSpec("Z", 100.0, 100.0, 10.0)]
    with pytest.raises(GenerationError):
        generate_environment(layout, huge, 0)


def test_ms_positions_spacing_and_endpoints(layout):
    pts = ms_positions(layout)
    assert len(pts) == 161
    np.testing.assert_array_equal(pts[0], layout.track_start)
    np.testing.assert_allclose(pts[-1], layout.track_end, atol=1e-12)
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    np.testing.assert_allclose(steps, 0.5, atol=1e-12)
    direction = (layout.track_end - layout.track_start) / layout.track_length
    proj = (pts - layout.track_start) @ direction
    assert np.all(np.diff(proj) > 0)
    resid = (pts - layout.track_start) - np.outer(proj, direction)
    assert np.abs(resid).max() < 1e-12


@pytest.mark.parametrize("spacing", [0.0, -1.0, 0.3])
def test_ms_positions_rejects_bad_spacing(layout, spacing):
    bad = type(layout)(layout.sa_rects, layout.bs_position, layout.track_start, layout.track_end, spacing)
    with pytest.raises(ValueError):
        ms_positions(bad)


def _single_building_env(layout, spec, corner=(5.0, 20.0, 0.0)):
    return Environment(layout, (Building(spec, corner, 3),), seed=0)


def _distance_to_box_surface(p, lo, hi):
    """Exact distance from points to the boundary of an axis-aligned box (outside or inside)."""
    outside = np.linalg.norm(np.maximum(np.maximum(lo - p, p - hi), 0.0), axis=1)
    inside = np.minimum(p - lo, hi - p).min(axis=1)
    return np.where(np.all((p > lo) & (p < hi), axis=1), inside, outside)


def test_noise_free_cloud_lies_on_the_building_surface(layout, catalog):
    spec = catalog[2]
    env = _single_building_env(layout, spec)
    cloud = synthesize_point_cloud(env, density=1.0, noise_sigma=0.0, seed=3)
    world = cloud.points + cloud.origin
    b = env.buildings[0]
    d = _distance_to_box_surface(world, b.lo, b.hi)
    assert d.max() < 1e-9
    # no samples on the ground-contact face
    assert world[:, 2].min() > 0


def _face_dims(spec):
    l, w, h = spec.length_m, spec.width_m, spec.height_m
    return [(w, h), (w, h), (l, h), (l, h), (l, w)]


@pytest.mark.parametrize("density", [0.5, 1.0, 2.0, 4.0])
@pytest.mark.parametrize("type_index", [0, 1, 2])
def test_point_count_matches_face_area(layout, catalog, density, type_index):
    spec = catalog[type_index]
    env = _single_building_env(layout, spec, (0.0, 10.0, 0.0))
    n = len(synthesize_point_cloud(env, density=density, noise_sigma=0.0))
    area = sum(u * v for u, v in _face_dims(spec))
    # rounding each face grid to whole rows and columns
    slack = sum(0.5 * (u + v) * np.sqrt(density) + 0.25 for u, v in _face_dims(spec))
    assert abs(n - density * area) <= slack


def test_type_c_unit_density_count_is_exact(layout, catalog):
    env = _single_building_env(layout, catalog[2])
    assert len(synthesize_point_cloud(env, 1.0, 0.0)) == 2 * 9 * 15 + 2 * 12 * 15 + 12 * 9


def test_cloud_is_deterministic_and_noise_has_requested_scale(layout, catalog):
    env = generate_environment(layout, catalog, 7)
    a = synthesize_point_cloud(env, 1.0, 0.2, seed=11)
    b = synthesize_point_cloud(env, 1.0, 0.2, seed=11)
    clean = synthesize_point_cloud(env, 1.0, 0.0, seed=11)
    np.testing.assert_array_equal(a.points, b.points)
    resid = a.points - clean.points
    assert resid.std() == pytest.approx(0.2, rel=0.05)
    assert abs(resid.mean()) < 0.01


def test_cloud_is_bs_relative(layout, catalog):
    env = generate_environment(layout, catalog, 7)
    cloud = synthesize_point_cloud(env, 1.0, 0.0)
    np.testing.assert_array_equal(cloud.origin, layout.bs_position)
    assert cloud.points[:, 2].min() > -layout.bs_position[2]


def test_point_cloud_rejects_non_finite():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))


def test_environment_round_trips_through_dict(layout, catalog):
    env = generate_environment(layout, catalog, 99)
    assert Environment.from_dict(env.to_dict(), layout) == env
