import json

import numpy as np
import pytest

from embryobench.io import nrrd
from embryobench.io.config import ConfigError, apply_overrides, build_config, parse_config, parse_frames
from embryobench.io.manifest import checksums, read_manifest, verify_manifest, write_manifest
from embryobench.io.tables import (
    ObjectTableRow, TableError, TABLE_HEADER, read_object_table, validate_rows, write_object_table,
)

MINIMAL = {"guide": {"generator": {}}}


# -- config -------------------------------------------------------------------

def test_minimal_config_defaults():
    cfg = build_config(MINIMAL)
    assert cfg.dynamics.w_dir == 1.0 and cfg.dynamics.w_rep == 1.0 and cfg.dynamics.w_nna == 0.1
    assert cfg.dynamics.K == 10
    assert (cfg.dynamics.r_min, cfg.dynamics.r_max, cfg.dynamics.l_min) == (7.0, 10.0, 28)
    assert cfg.division["r_rho"] == 40.0
    assert cfg.video_spec.count == 56
    assert cfg.fraction == 0.5


def test_fraction_and_count_exclusive():
    with pytest.raises(ConfigError, match="fraction or count"):
        build_config({**MINIMAL, "population": {"fraction": 0.5, "count": 10}})


def test_negative_weight_rejected():
    with pytest.raises(ConfigError, match="w_rep"):
        build_config({**MINIMAL, "dynamics": {"w_rep": -1}})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="dynamics.bogus"):
        build_config({**MINIMAL, "dynamics": {"bogus": 1}})
    with pytest.raises(ConfigError, match="guide.generator.nope"):
        build_config({"guide": {"generator": {"nope": 1}}})


def test_guide_source_required():
    with pytest.raises(ConfigError, match="guide"):
        build_config({})
    with pytest.raises(ConfigError, match="guide"):
        build_config({"guide": {"path": "g.csv", "generator": {}}})


def test_overrides_coerce_values():
    raw = apply_overrides(MINIMAL, ["dynamics.K=5", "acquisition.multiview=true", "division.variant=count_coupled_oldest"])
    cfg = build_config(raw)
    assert cfg.dynamics.K == 5
    assert cfg.acquisition["multiview"] is True
    assert cfg.division["variant"] == "count_coupled_oldest"
    assert MINIMAL == {"guide": {"generator": {}}}


def test_override_needs_equals():
    with pytest.raises(ConfigError):
        apply_overrides(MINIMAL, ["dynamics.K"])


def test_division_p_defaults():
    cfg = build_config({**MINIMAL, "population": {"count": 30}})
    assert cfg.division_model(60).p == 0.5
    assert build_config({**MINIMAL, "population": {"fraction": 0.25}}).division_model(60).p == 0.25


def test_parse_frames():
    assert parse_frames("2..5") == [2, 5]
    assert parse_frames([0, 0]) == [0, 0]
    for bad in ("5..2", "x", [3]):
        with pytest.raises(ConfigError):
            parse_frames(bad)


def test_parse_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(MINIMAL), encoding="utf-8")
    assert parse_config(path, ["seed=9"]).seed == 9
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(path)


def test_to_dict_roundtrip():
    cfg = build_config({**MINIMAL, "seed": 4, "dynamics": {"K": 3}})
    again = build_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


# -- tables ---------------------------------------------------------------------

def random_rows(n, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        frame = i // 100
        oid = i + 1
        parent = int(rng.integers(1, oid)) if oid > 100 and rng.random() < 0.5 else None
        if parent is not None and parent > frame * 100:
            parent = None
        x = rng.normal(size=7) * 100
        rows.append(ObjectTableRow(frame, oid, parent, *x, int(rng.integers(1, 40)), 40,
                                   int(rng.integers(1, 57)), int(rng.integers(0, 3000)), bool(rng.random() < 0.1)))
    return rows


def test_table_roundtrip(tmp_path):
    rows = random_rows(1000)
    write_object_table(rows, tmp_path / "t.csv")
    assert read_object_table(tmp_path / "t.csv") == rows


def test_table_roundtrip_unrendered(tmp_path):
    rows = [ObjectTableRow(0, 1, None, 0.1, 0.2, 0.3, 1, 2, 3, 7.5, 1, 30, 4)]
    write_object_table(rows, tmp_path / "t.csv")
    back = read_object_table(tmp_path / "t.csv")
    assert back == rows and back[0].labeled_voxels is None and back[0].clipped is None


def test_table_rounds_on_construction():
    r = ObjectTableRow(0, 1, None, 1 / 3, 0, 0, 0, 0, 0, 8, 1, 30, 1)
    assert r.x == float(format(1 / 3, ".9g"))


def test_empty_table(tmp_path):
    write_object_table([], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == ",".join(TABLE_HEADER) + "\n"
    assert read_object_table(tmp_path / "t.csv") == []


def test_later_born_parent(tmp_path):
    rows = [ObjectTableRow(0, 1, None, 0, 0, 0, 0, 0, 0, 8, 1, 30, 1),
            ObjectTableRow(0, 2, 5, 0, 0, 0, 0, 0, 0, 8, 1, 30, 1),
            ObjectTableRow(1, 5, None, 0, 0, 0, 0, 0, 0, 8, 1, 30, 1)]
    write_object_table(rows, tmp_path / "t.csv")
    with pytest.raises(TableError, match="later-born parent"):
        read_object_table(tmp_path / "t.csv")


def test_duplicate_frame_id():
    r = ObjectTableRow(0, 1, None, 0, 0, 0, 0, 0, 0, 8, 1, 30, 1)
    with pytest.raises(TableError, match="duplicate"):
        validate_rows([r, r])


def test_table_bad_field(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(",".join(TABLE_HEADER) + "\n0,1,,x,0,0,0,0,0,8,1,30,1,,\n", encoding="utf-8")
    with pytest.raises(TableError, match=":2"):
        read_object_table(path)


# -- nrrd -------------------------------------------------------------------------

def test_nrrd_roundtrip(tmp_path):
    data = np.random.default_rng(0).integers(0, 65536, (32, 32, 32), dtype=np.uint16)
    files = nrrd.write_volume(data, tmp_path / "v.nrrd", (1.0, 1.0, 2.5), {"note": "x"})
    assert [f.name for f in files] == ["v.nrrd", "v.raw"]
    back, spacing, meta = nrrd.read_volume(tmp_path / "v.nrrd")
    assert back.dtype == np.uint16 and np.array_equal(back, data)
    assert spacing == (1.0, 1.0, 2.5)
    assert meta == {"note": "x"}


@pytest.mark.parametrize("dtype", [np.uint8, np.uint32, np.float32, np.float64])
def test_nrrd_dtypes(tmp_path, dtype):
    data = (np.arange(60).reshape(3, 4, 5) * 3).astype(dtype)
    nrrd.write_volume(data, tmp_path / "v.nrrd", (0.1, 0.2, 0.3))
    back, spacing, _ = nrrd.read_volume(tmp_path / "v.nrrd")
    assert np.array_equal(back, data) and spacing == (0.1, 0.2, 0.3)


def test_nrrd_x_fastest_on_disk(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    nrrd.write_volume(data, tmp_path / "v.nrrd")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), np.uint8)
    assert raw[:2].tolist() == [data[0, 0, 0], data[1, 0, 0]]


def test_nrrd_size_mismatch(tmp_path):
    nrrd.write_volume(np.zeros((4, 4, 4), np.uint16), tmp_path / "v.nrrd")
    text = (tmp_path / "v.nrrd").read_text().replace("sizes: 4 4 4", "sizes: 4 4 5")
    (tmp_path / "v.nrrd").write_text(text)
    with pytest.raises(nrrd.NrrdError, match="bytes"):
        nrrd.read_volume(tmp_path / "v.nrrd")


def test_nrrd_rejects_bad_magic(tmp_path):
    (tmp_path / "v.nrrd").write_text("hello\n")
    with pytest.raises(nrrd.NrrdError):
        nrrd.read_volume(tmp_path / "v.nrrd")


# -- manifest -----------------------------------------------------------------------

def test_manifest(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.txt").write_text("one")
    (tmp_path / "y.bin").write_bytes(b"\x00\x01")
    write_manifest({"seed": 3}, tmp_path, {"extra": 1})
    m = read_manifest(tmp_path)
    assert set(m["files"]) == {"a/x.txt", "y.bin"}
    assert m["seed"] == 3 and m["extra"] == 1
    assert verify_manifest(tmp_path) == []
    (tmp_path / "y.bin").write_bytes(b"\x00\x02")
    assert verify_manifest(tmp_path) == ["y.bin"]


def test_manifest_identical_except_timestamp(tmp_path):
    (tmp_path / "f").write_text("same")
    write_manifest({"seed": 0}, tmp_path)
    a = read_manifest(tmp_path)
    write_manifest({"seed": 0}, tmp_path)
    b = read_manifest(tmp_path)
    a.pop("created"), b.pop("created")
    assert a == b
    assert checksums(tmp_path) == a["files"]
