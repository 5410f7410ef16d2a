import json
import threading

import numpy as np
import pytest

from synthcount.manifest import (
    ManifestError,
    ManifestWriter,
    load_image,
    read_manifest,
    resolve,
    save_image,
    validate_row,
    write_manifest,
)


def test_roundtrip(tmp_path):
    rows = [{"path": f"images/{i}.png", "prompt_count": i, "kept": True} for i in range(5)]
    p = write_manifest(tmp_path / "m.jsonl", "count", rows)
    assert read_manifest(p, "count") == rows


@pytest.mark.parametrize(
    "kind,row",
    [
        ("sorting", {"triplet_id": 0, "paths": ["a", "b"], "ranks": [0, 1]}),
        ("sorting", {"triplet_id": 0, "paths": ["a", "b", "c"], "ranks": [0, 1, 1]}),
        ("count", {"path": "a", "prompt_count": -1, "kept": True}),
        ("count", {"path": "a", "kept": True}),
        ("density", {"path": "a", "density_label": 3}),
        ("eval", {"path": "a"}),
        ("nope", {}),
    ],
)
def test_invalid_rows(kind, row):
    with pytest.raises(ManifestError):
        validate_row(kind, row)


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"path": "a", "true_count": 1}) + "\n\n{oops\n")
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(p)


def test_concurrent_appends(tmp_path):
    with ManifestWriter(tmp_path / "m.jsonl", "eval") as w:
        threads = [threading.Thread(target=lambda k=k: [w.append({"path": f"{k}-{i}", "true_count": i}) for i in range(50)]) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    rows = read_manifest(tmp_path / "m.jsonl", "eval")
    assert len(rows) == 200 == w.rows_written
    assert len({r["path"] for r in rows}) == 200


def test_image_io_and_resolve(tmp_path):
    img = np.random.default_rng(0).integers(0, 255, (10, 12, 3), dtype=np.uint8)
    save_image(img, tmp_path / "sub" / "x.png")
    assert resolve(tmp_path / "m.jsonl", "sub/x.png") == tmp_path / "sub" / "x.png"
    assert resolve(tmp_path / "m.jsonl", str(tmp_path / "abs.png")) == tmp_path / "abs.png"
    np.testing.assert_array_equal(load_image(tmp_path / "sub" / "x.png"), img)
