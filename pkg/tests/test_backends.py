import json

import numpy as np
import pytest

from wsiqc.artifacts import SegMask
from wsiqc.backends import BackendArtifactSet, load_file_backend, write_file_backend
from wsiqc.content import Detection
from wsiqc.errors import InputError, MalformedDetectionLine, MaskSizeMismatch, UnknownClass
from wsiqc.imaging import write_png

GOOD = {"level": "x20", "i": 0, "j": 1, "class": "neutrophil", "x": 1.5, "y": 2, "w": 10, "h": 12, "conf": 0.8}


def write_lines(d, lines):
    d.mkdir(exist_ok=True)
    (d / "detections.jsonl").write_text("\n".join(lines) + "\n")
    return d


def test_empty_directory_is_empty_set(tmp_path):
    s = load_file_backend(tmp_path)
    assert s.masks == [] and s.detections == []


def test_parses_detection(tmp_path):
    s = load_file_backend(write_lines(tmp_path / "a", [json.dumps(GOOD)]))
    assert s.detections == [Detection("x20", 0, 1, "neutrophil", 1.5, 2, 10, 12, 0.8)]


@pytest.mark.parametrize("patch", [{"conf": 1.2}, {"w": -1}, {"x": 510}, {"i": 1.5}, {"level": "20x"}])
def test_invalid_detection_values(tmp_path, patch):
    with pytest.raises(MalformedDetectionLine) as err:
        load_file_backend(write_lines(tmp_path / "a", [json.dumps(GOOD), json.dumps({**GOOD, **patch})]))
    assert err.value.lineno == 2


def test_bad_json_and_class(tmp_path):
    with pytest.raises(MalformedDetectionLine):
        load_file_backend(write_lines(tmp_path / "a", ["{not json"]))
    with pytest.raises(UnknownClass):
        load_file_backend(write_lines(tmp_path / "b", [json.dumps({**GOOD, "class": "lymphocyte"})]))


def test_mask_size_and_name(tmp_path):
    (tmp_path / "m" / "masks").mkdir(parents=True)
    write_png(tmp_path / "m" / "masks" / "x4_0_0_marker.png", np.zeros((512, 513), bool))
    with pytest.raises(MaskSizeMismatch):
        load_file_backend(tmp_path / "m")
    (tmp_path / "n" / "masks").mkdir(parents=True)
    write_png(tmp_path / "n" / "masks" / "marker_0_0.png", np.zeros((512, 512), bool))
    with pytest.raises(InputError):
        load_file_backend(tmp_path / "n")


def test_load_serialize_load_fixpoint(tmp_path, rng):
    dets = [Detection("x20", int(rng.integers(3)), int(rng.integers(3)), c, float(rng.integers(0, 400)),
                      float(rng.integers(0, 400)), 11.25, 9.0, float(rng.uniform(0, 1)))
            for c in ("squamous_cell", "cell_mass", "neutrophil") for _ in range(5)]
    masks = [SegMask("x4", 0, k, "marker", rng.uniform(size=(512, 512)) < 0.1) for k in range(2)]
    masks.append(SegMask("x5-2", 1, 0, "bubble", rng.uniform(size=(512, 512)) < 0.3))
    a = load_file_backend(write_file_backend(BackendArtifactSet(masks, dets, meta={"producer": "t"}), tmp_path / "a"))
    b = load_file_backend(write_file_backend(a, tmp_path / "b"))
    assert (tmp_path / "a" / "detections.jsonl").read_bytes() == (tmp_path / "b" / "detections.jsonl").read_bytes()
    assert sorted(a.detections, key=Detection.sort_key) == sorted(dets, key=Detection.sort_key)
    assert a.detections == b.detections
    for m0, m1 in zip(sorted(a.masks, key=lambda m: m.key), sorted(b.masks, key=lambda m: m.key)):
        assert m0.key == m1.key and np.array_equal(m0.bits, m1.bits)
    assert {m.key for m in a.masks} == {m.key for m in masks}
    assert a.meta == {"producer": "t"}
