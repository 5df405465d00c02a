import json

import numpy as np
import pytest
import torch

from faultdistill.config import ConfigError, SynthConfig
from faultdistill.data import (FORMAT_VERSION, DatasetFormatError, FormatVersionError, generate,
                               generate_annotations, load)


def test_same_seed_identical_annotations(tmp_path):
    cfg = SynthConfig(seed=5, image_size=64, train_count=6, test_count=2)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    assert (tmp_path / "a/annotations.jsonl").read_bytes() == (tmp_path / "b/annotations.jsonl").read_bytes()
    other = generate_annotations(SynthConfig(seed=6, image_size=64, train_count=6, test_count=2))
    assert other != generate_annotations(cfg)


def test_one_object_per_image_count(tmp_path):
    cfg = SynthConfig(seed=0, image_size=64, min_objects=1, max_objects=1, train_count=8, test_count=2)
    summary = generate(cfg, tmp_path / "d")
    lines = (tmp_path / "d/annotations.jsonl").read_text().splitlines()
    assert len(lines) == 10 == summary["objects"]
    assert summary["images"] == 10


def test_fault_rate_balance():
    cfg = SynthConfig(seed=1, train_count=1000, test_count=0)
    recs = generate_annotations(cfg)
    rate = np.mean([r["class_id"] == 1 for r in recs])
    assert abs(rate - cfg.fault_rate) <= 0.1 * cfg.fault_rate


def test_boxes_large_enough_at_coarsest_level():
    recs = generate_annotations(SynthConfig(seed=2, image_size=256, train_count=300, test_count=0))
    cells = 256 // 32
    for r in recs:
        x1, y1, x2, y2 = r["box"]
        assert 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1
        assert (x2 - x1) * cells * (y2 - y1) * cells >= 4


def test_round_trip_and_order(tiny_data):
    ds = load(tiny_data, None)
    written = [json.loads(l) for l in (tiny_data / "annotations.jsonl").read_text().splitlines()]
    ids = [s.image_id for s in ds]
    assert ids == sorted(ids)
    got = [(s.image_id, c, b) for s in ds
           for b, c in zip(s.labels.boxes.tolist(), s.labels.classes.tolist())]
    assert len(got) == len(written)
    for (im, c, b), w in zip(got, written):
        assert (im, c) == (w["image_id"], w["class_id"])
        assert np.allclose(b, w["box"], rtol=0, atol=1e-9)
    assert {s.split for s in load(tiny_data, "test")} == {"test"}
    assert len(load(tiny_data, "train")) == 24


def test_normalized_channel_means(tiny_data):
    imgs = torch.stack([s.image for s in load(tiny_data, "train")])
    assert imgs.shape[1:] == (3, 64, 64)
    assert imgs.mean(dim=(0, 2, 3)).abs().max() < 0.1


def test_truncated_annotations_names_record(tmp_path, tiny_data):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(tiny_data, root)
    text = (root / "annotations.jsonl").read_text()
    lines = text.splitlines()
    (root / "annotations.jsonl").write_text("\n".join(lines[:-1]) + "\n" + lines[-1][:10])
    with pytest.raises(DatasetFormatError, match=f"record {len(lines) - 1}"):
        load(root)


def test_invalid_box_rejected_with_diagnostic(tmp_path, tiny_data):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(tiny_data, root)
    with open(root / "annotations.jsonl", "a") as fh:
        fh.write(json.dumps({"image_id": 0, "class_id": 0, "box": [0.5, 0.5, 0.2, 0.9]}) + "\n")
    ds = load(root, None)
    assert len(ds.rejected) == 1 and "invalid box" in ds.rejected[0]
    for s in ds:
        s.labels.validate(2)


def test_format_version_mismatch(tmp_path, tiny_data):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(tiny_data, root)
    meta = json.loads((root / "meta.json").read_text())
    meta["format_version"] = FORMAT_VERSION + 1
    (root / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(FormatVersionError, match="regenerate"):
        load(root)


def test_refuses_to_overwrite(tmp_path):
    cfg = SynthConfig(seed=0, image_size=64, train_count=2, test_count=0)
    generate(cfg, tmp_path / "d")
    with pytest.raises(FileExistsError):
        generate(cfg, tmp_path / "d")
    generate(cfg, tmp_path / "d", overwrite=True)


@pytest.mark.parametrize("bad", [dict(image_size=100), dict(min_objects=3, max_objects=2),
                                 dict(fault_rate=1.5)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SynthConfig(**bad).validate()
