import io

import numpy as np
import pytest

from hivmob.model import (DAY, DEFAULT_WINDOW, HOUR, AntennaRecord, AntennaTable, HierarchyError,
                          HivEstimate, PopulationTable, RecordParseError, SpatialHierarchy,
                          SurveyCluster, TrajectoryTable, Window, fmt_num, format_antenna_records,
                          format_survey_clusters, format_trajectory_records, parse_antenna_records,
                          parse_hour, parse_survey_clusters, parse_timestamp, parse_trajectory_records,
                          validate_dataset)

from conftest import line_hierarchy


def test_parse_antenna_line():
    t = parse_antenna_records("2011-12-01T00\t17\t23\t5\t600\n")
    assert list(t) == [AntennaRecord(parse_hour("2011-12-01T00"), 17, 23, 5, 600)]


def test_parse_empty_stream():
    assert len(parse_antenna_records("")) == 0
    assert len(parse_trajectory_records(io.StringIO(""))) == 0


def test_negative_calls_is_a_line_error():
    text = "2011-12-01T00\t1\t2\t3\t10\n2011-12-01T01\t1\t2\t-1\t10\n"
    with pytest.raises(RecordParseError) as exc:
        parse_antenna_records(text)
    assert [e.lineno for e in exc.value.errors] == [2]
    t = parse_antenna_records(text, max_errors=1)
    assert len(t) == 1 and t.errors[0].lineno == 2


def test_zero_call_rows_are_dropped_and_counted():
    t = parse_antenna_records("2011-12-01T00\t1\t2\t0\t0\n2011-12-01T00\t1\t2\t2\t0\n")
    assert len(t) == 1 and t.dropped_zero == 1
    assert t[0].total_duration == 0


def test_parse_trajectory_line_and_duplicates():
    line = "42\t2011-12-01T08:30:00\t101\n"
    t = parse_trajectory_records(line * 2)
    assert len(t) == 2 and t[0] == t[1]
    assert t[0].user_id == "42" and t[0].subpref == 101
    assert t[0].at == parse_timestamp("2011-12-01") + 8 * HOUR + 30 * 60


def test_out_of_order_times_are_kept_in_input_order():
    t = parse_trajectory_records("a\t2011-12-02T00:00:00\t1\na\t2011-12-01T00:00:00\t1\n")
    assert t.at[0] > t.at[1]
    assert list(t.sorted().at) == sorted(t.at)


def test_coarse_timestamps_are_tolerated():
    assert parse_timestamp("2011-12-01T08") == parse_timestamp("2011-12-01T08:00:00")
    assert parse_timestamp("2011-12-01") == parse_timestamp("2011-12-01T00:00")


@pytest.mark.parametrize("bad", ["2011-12-01T24", "2011-12-01T7", "2011/12/01T07"])
def test_bad_hour_stamps(bad):
    with pytest.raises(ValueError):
        parse_hour(bad)


def test_antenna_round_trip(cdr):
    text = format_antenna_records(cdr[:500])
    assert format_antenna_records(parse_antenna_records(text)) == text


def test_trajectory_round_trip(trajectories):
    table = trajectories[0][:500]
    text = format_trajectory_records(table)
    back = parse_trajectory_records(text)
    assert back == table
    assert format_trajectory_records(back) == text


def test_survey_round_trip():
    cl = [SurveyCluster(1.5, -2.0, 30, 4), SurveyCluster(0.0, 7.25, 12, 0)]
    text = format_survey_clusters(cl)
    assert parse_survey_clusters(text) == cl


def test_fmt_num_shortest_round_trip():
    for v in (0.1, 1 / 3, 1e-17, 2.5e300):
        assert float(fmt_num(v)) == v
    assert fmt_num(3.0) == "3"
    assert fmt_num(np.int64(7)) == "7"


def test_window_defaults_and_membership():
    w = DEFAULT_WINDOW
    assert w.end - w.start == 150 * DAY
    assert w.contains(w.start) and not w.contains(w.end) and w.contains(w.end - 1)


def test_validation_clean_and_dirty():
    h = line_hierarchy(2)
    good = parse_trajectory_records("u\t2011-12-01T00:00:00\t101\nu\t2011-12-02T00:00:00\t102\n")
    rep = validate_dataset(good, h)
    assert rep.n_violations == 0 and rep.accepted()

    bad = parse_trajectory_records("u\t2011-12-01T00:00:00\t999\nu\t2011-12-02T00:00:00\t101\n")
    rep = validate_dataset(bad, h)
    assert rep.n_violations == 1 and rep.unknown_ids == [999]
    assert not rep.accepted() and rep.accepted(drop_invalid=True)
    assert len(rep.filter(bad)) == 1


def test_validation_flags_one_second_past_window():
    h = line_hierarchy(1)
    w = Window.from_dates("2011-12-01", "2011-12-02")
    t = TrajectoryTable([0, 0], [w.end - 1, w.end], [101, 101], ["u"])
    rep = validate_dataset(t, h, w)
    assert rep.n_out_of_window == 1 and rep.invalid.tolist() == [False, True]


def test_validation_of_antenna_tables():
    h = line_hierarchy(2)
    t = AntennaTable([DEFAULT_WINDOW.start] * 2, [1001, 1001], [1002, 5], [1, 1], [1.0, 1.0])
    rep = validate_dataset(t, h)
    assert rep.n_unknown == 1 and rep.unknown_ids == [5]


def test_hierarchy_closure(world):
    h = world.hierarchy
    ants = np.array(sorted(h.antennas))
    di = h.antenna_dept_index(ants)
    assert (di >= 0).all()
    for a in ants.tolist():
        d = h.department_of_antenna(a)
        assert h.region_of_department(d) in h.regions
    assert SpatialHierarchy.from_json(h.to_json()).to_json() == h.to_json()


def test_hierarchy_rejects_dangling_ids():
    h = line_hierarchy(1)
    with pytest.raises(HierarchyError):
        SpatialHierarchy(h.antennas, {101: h.subprefs[101].__class__(7, (0.0, 0.0))}, h.departments, h.regions)


def test_population_rescaling():
    p = PopulationTable({1: 3.0, 2: 1.0}, 100.0)
    assert p.rescaled() == {1: 75.0, 2: 25.0}
    with pytest.raises(ValueError):
        PopulationTable({1: 0.0}, 1.0)


def test_domain_invariants():
    with pytest.raises(ValueError):
        SurveyCluster(0, 0, 10, 11)
    with pytest.raises(ValueError):
        HivEstimate(1, 1.5, "good")
    with pytest.raises(ValueError):
        AntennaRecord(1, 1, 1, 1, 1.0)  # not on an hour boundary
