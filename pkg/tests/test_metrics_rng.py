import numpy as np

from dat import rng
from dat.metrics import MetricsRecord, append_jsonl, read_jsonl, to_csv


def test_streams_independent_of_other_consumers():
    a = rng.stream(5, "shuffle").random(4)
    rng.stream(5, "some/new/consumer").random(100)
    assert np.array_equal(a, rng.stream(5, "shuffle").random(4))
    assert not np.array_equal(a, rng.stream(5, "init").random(4))
    assert not np.array_equal(a, rng.stream(5, "shuffle", 1).random(4))
    assert not np.array_equal(a, rng.stream(6, "shuffle").random(4))


def test_record_json_round_trip():
    rec = MetricsRecord.create("r", "abc", 3, {"acc": np.float64(0.5), "n": 4})
    back = MetricsRecord.from_json(rec.to_json())
    assert back == rec
    assert "started" not in back.without_timestamps()


def test_jsonl_tolerates_partial_last_line(tmp_path):
    p = tmp_path / "m.jsonl"
    for i in range(3):
        append_jsonl(p, MetricsRecord.create("r", "h", i, {"x": i}))
    with open(p, "a") as fh:
        fh.write('{"run": "r", "conf')
    assert [r.step for r in read_jsonl(p)] == [0, 1, 2]


def test_csv_one_row_per_metric():
    rec = MetricsRecord.create("r", "h", 0, {"b": 1.0, "a": 2.0})
    lines = to_csv([rec]).strip().split("\n")
    assert lines[0] == "schema,run,config_hash,step,metric,value"
    assert [l.split(",")[4] for l in lines[1:]] == ["a", "b"]
