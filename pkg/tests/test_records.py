import json

from hypothesis import given
from hypothesis import strategies as st

from advinterp.records import RunRecord, atomic_write, canonical_json, config_hash, sha256_file

json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=5),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=20,
)


@given(json_values)
def test_canonical_json_round_trips(value):
    assert json.loads(canonical_json(value)) == value


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16


def test_record_round_trip(tmp_path):
    rec = RunRecord("r", "train", "standard-s0", {"train": {"epochs": 2}}, 0, "abc",
                    [{"epoch": 1, "train_loss": 0.5}], {"clean_acc": 0.9}, ["checkpoints/x.pt"])
    path = rec.save(tmp_path / "rec.json")
    assert RunRecord.load(path) == rec
    first = path.read_bytes()
    rec.save(path)
    assert path.read_bytes() == first


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "d" / "f.bin", b"\x00\x01")
    atomic_write(tmp_path / "d" / "f.bin", b"\x02")
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["f.bin"]
    assert sha256_file(tmp_path / "d" / "f.bin") == "dbc1b4c900ffe48d575b5da5c638040125f65db0fe3e24494b76ea986457d986"
