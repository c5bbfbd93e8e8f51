import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from firstarrival.grid_data import (InputError, PixelGrid, RawRecords, RouteDef, aggregate_checklists,
                                    aggregate_occurrences, build_tables, load_inputs, read_tables,
                                    route_intensity_weights, write_csv, write_tables)


def make_grid(n=3, years=(2001, 2002)):
    # pixels in a row, 20 km apart, around (-72, 42)
    proto = PixelGrid([0], [-72.0], [42.0], [400.0], years, origin=(-72.0, 42.0))
    lon, lat = proto.unproject(20.0 * (np.arange(n) - (n - 1) / 2), np.zeros(n))
    return PixelGrid(np.arange(n), lon, lat, np.full(n, 400.0), years)


def point_in(grid, i, dx=0.0, dy=0.0):
    lon, lat = grid.unproject(grid.x_km[i] + dx, grid.y_km[i] + dy)
    return float(lon), float(lat)


def checklist_rows(grid, pix, year, durations):
    lon, lat = point_in(grid, pix, 1.0, -2.0)
    return [(lon, lat, year, d) for d in durations]


def test_projection_round_trip():
    g = make_grid(5)
    lon, lat = g.unproject(*g.project(g.lon, g.lat))
    np.testing.assert_allclose(lon, g.lon, atol=1e-12)
    np.testing.assert_allclose(lat, g.lat, atol=1e-12)
    np.testing.assert_allclose(np.diff(g.x_km), 20.0, rtol=1e-9)


def test_grid_invariants():
    with pytest.raises(InputError):
        PixelGrid([0, 2], [0, 1], [0, 1], [1, 1], [2001])
    with pytest.raises(InputError):
        PixelGrid([0, 1], [0, 1], [0, 1], [1, 0], [2001])


def test_locate_half_open_boundaries():
    g = make_grid(3)
    # the shared edge between pixels 0 and 1 belongs to pixel 1
    edge = point_in(g, 0, 10.0)
    assert g.locate([edge[0]], [edge[1]]).tolist() == [1]
    far = point_in(g, 2, 10.5)
    assert g.locate([far[0]], [far[1]]).tolist() == [-1]


def test_median_duration_examples():
    g = make_grid()
    rows = checklist_rows(g, 0, 2001, [10, 20, 40]) + checklist_rows(g, 1, 2001, [10, 20])
    n, d = aggregate_checklists(rows, g)
    assert n[0, 0] == 3 and d[0, 0] == 20.0
    assert n[1, 0] == 2 and d[1, 0] == 15.0
    # no records: no entry rather than zero
    assert n[2, 1] == 0 and np.isnan(d[2, 1])


def test_bad_checklists_dropped_with_warning(caplog):
    g = make_grid()
    rows = checklist_rows(g, 0, 2001, [10]) + checklist_rows(g, 0, 2001, [-5]) + checklist_rows(g, 0, 1999, [7])
    rows.append((0.0, 0.0, 2001, 3.0))  # far outside
    with caplog.at_level(logging.WARNING):
        n, d = aggregate_checklists(rows, g)
    assert n.sum() == 1 and d[0, 0] == 10.0
    assert "negative duration" in caplog.text and "outside the grid" in caplog.text


def occurrence_rows(grid, pix, year, days, flags):
    lon, lat = point_in(grid, pix, -3.0, 4.0)
    return [(lon, lat, year, d, f) for d, f in zip(days, flags)]


def test_first_arrival_transform():
    g = make_grid()
    n_ckl = np.array([[4, 0], [2, 0], [1, 0]])
    rows = (occurrence_rows(g, 0, 2001, [120, 95, 140, 20], [1, 1, 1, 0])
            + occurrence_rows(g, 1, 2001, [366, 300], [1, 0])
            + occurrence_rows(g, 2, 2001, [50], [0]))
    n_spc, z = aggregate_occurrences(rows, g, n_ckl)
    assert n_spc[0, 0] == 3
    assert z[0, 0] == pytest.approx(1.348756441800825, rel=1e-13)  # ln(366/95)
    assert z[1, 0] == pytest.approx(0.001367054, rel=1e-6)
    assert n_spc[2, 0] == 0 and np.isnan(z[2, 0])


def test_invalid_presence_flag_rejected(caplog):
    g = make_grid()
    n_ckl = np.array([[2, 0], [0, 0], [0, 0]])
    with caplog.at_level(logging.WARNING):
        n_spc, _ = aggregate_occurrences(occurrence_rows(g, 0, 2001, [100, 110], [1, 2]), g, n_ckl)
    assert n_spc[0, 0] == 1 and "presence flag" in caplog.text


def test_route_weights():
    assert route_intensity_weights(RouteDef(1, 2001, [(4, 1.0)], 50)) == [(4, 1.0)]
    assert route_intensity_weights(RouteDef(1, 2001, [(4, 1.0)], 25)) == [(4, 0.5)]
    assert route_intensity_weights(RouteDef(1, 2001, [(0, 0.6), (1, 0.4)], 50)) == [(0, 0.6), (1, 0.4)]
    with pytest.raises(InputError, match="weights sum 1.1"):
        RouteDef(1, 2001, [(0, 0.6), (1, 0.5)], 50).validate()
    with pytest.raises(InputError):
        RouteDef(1, 2001, [(0, 1.0)], 0).validate()


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.integers(1, 50))
def test_route_multipliers_sum(raw, stops):
    w = np.asarray(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    mult = route_intensity_weights(RouteDef(0, 2001, list(enumerate(w.tolist())), stops))
    assert sum(m for _, m in mult) == pytest.approx(stops / 50, abs=1e-12)


@given(st.randoms(use_true_random=False))
def test_aggregation_permutation_invariant(rnd):
    g = make_grid()
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    pix = rng.integers(0, 3, 40)
    ck = np.array([(*point_in(g, p, rng.uniform(-9, 9), rng.uniform(-9, 9)), 2001 + rng.integers(0, 2),
                    rng.integers(1, 90)) for p in pix], float)
    occ = np.column_stack([ck[:, :3], rng.integers(1, 366, 40), rng.integers(0, 2, 40)])
    perm = rng.permutation(40)
    a = aggregate_checklists(ck, g)
    b = aggregate_checklists(ck[perm], g)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].sum() == 40
    za = aggregate_occurrences(occ, g, a[0])
    zb = aggregate_occurrences(occ[perm], g, a[0])
    np.testing.assert_array_equal(za[0], zb[0])
    np.testing.assert_array_equal(za[1], zb[1])
    has_z = ~np.isnan(za[1])
    assert np.all(za[0][has_z] >= 1) and np.all(a[0][za[0] >= 1] >= 1)


def write_inputs(tmp_path, grid, weights=((0, 0.6), (1, 0.4))):
    write_csv(tmp_path / "pixels.csv", ("pixel_id", "lon", "lat", "area_km2"),
              zip(range(grid.n_pixels), grid.lon, grid.lat, grid.area))
    write_csv(tmp_path / "nao.csv", ("year", "value"), [(2001, 0.5), (2002, -0.25)])
    write_csv(tmp_path / "bbs.csv", ("route_id", "year", "count", "stops"), [(7, 2001, 3, 50), (7, 2002, 1, 40)])
    write_csv(tmp_path / "bbs_segments.csv", ("route_id", "pixel_id", "weight"), [(7, p, w) for p, w in weights])
    rows = checklist_rows(grid, 0, 2001, [10, 30]) + checklist_rows(grid, 2, 2002, [15])
    write_csv(tmp_path / "checklists.csv", ("lon", "lat", "year", "duration_min"), rows)
    occ = occurrence_rows(grid, 0, 2001, [130, 100], [1, 1]) + occurrence_rows(grid, 2, 2002, [200], [0])
    write_csv(tmp_path / "occurrences.csv", ("lon", "lat", "year", "day", "present"), occ)


def test_load_inputs_and_table_round_trip(tmp_path):
    grid = make_grid()
    write_inputs(tmp_path, grid)
    g, routes, counts, raw = load_inputs(tmp_path)
    assert g.n_pixels == 3 and g.years.tolist() == [2001, 2002]
    assert counts.tolist() == [3, 1] and routes[1].stops_visited == 40
    t = build_tables(g, routes, counts, raw)
    assert t.n_ckl[0, 0] == 2 and t.median_duration[0, 0] == 20.0 and t.n_spc[0, 0] == 2
    assert t.z[0, 0] == pytest.approx(-np.log(100 / 366))
    write_tables(tmp_path / "tables.csv", g, t)
    back = read_tables(tmp_path / "tables.csv", g, routes, counts, t.nao)
    assert back.equals(t)


def test_load_errors_name_file_and_line(tmp_path):
    grid = make_grid()
    write_inputs(tmp_path, grid, weights=((0, 0.6), (1, 0.5)))
    with pytest.raises(InputError, match=r"bbs.csv:2: route 7: weights sum 1.1"):
        load_inputs(tmp_path)
    write_inputs(tmp_path, grid)
    (tmp_path / "nao.csv").write_text("year,value\n2001,0.1\n2002,abc\n")
    with pytest.raises(InputError, match=r"nao.csv:3: non-numeric"):
        load_inputs(tmp_path)
    (tmp_path / "nao.csv").write_text("year,val\n2001,0.1\n")
    with pytest.raises(InputError, match="missing column"):
        load_inputs(tmp_path)
    (tmp_path / "nao.csv").write_text("year,value\n2001,0.1\n2002,0.2\n")
    (tmp_path / "pixels.csv").write_text("pixel_id,lon,lat,area_km2\n0,1,1,400\n0,2,2,400\n")
    with pytest.raises(InputError, match="duplicate pixel_id"):
        load_inputs(tmp_path)


def test_table_invariants():
    g = make_grid()
    raw = RawRecords(checklists=np.array(checklist_rows(g, 0, 2001, [10])), nao={2001: 0.0, 2002: 0.0})
    t = build_tables(g, [], [], raw)
    t.n_spc[0, 0] = 5
    with pytest.raises(InputError):
        t.validate()
