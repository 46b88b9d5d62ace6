import json

import numpy as np
import pytest

from hier_attn.boxes import iou_3d_axis_aligned, load_records, points_in_box_mask
from hier_attn.geometry import load_cloud_binary
from hier_attn.metrics import percentile_thresholds
from hier_attn.scenesim import (
    DEFAULT_CLASSES,
    ClassSpec,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_manifest,
    manifest_mean_sizes,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(room=(0, 4, 2))
    with pytest.raises(ValueError):
        SceneSpec(clutter_fraction=1.0)
    with pytest.raises(ValueError):
        SceneSpec(points=32)
    with pytest.raises(ValueError):
        SceneSpec(min_objects=3, max_objects=2)


def test_noise_free_single_object_points_inside_box():
    spec = SceneSpec(min_objects=1, max_objects=1, clutter_fraction=0.0,
                     surface_noise=0.0, points=256, seed=5)
    sample = generate_scene(spec)
    assert sample.placed_objects == 1
    box = sample.boxes[0].to_proposal(len(spec.classes))
    mask = points_in_box_mask(sample.cloud.coords, box)
    assert mask.all()


def test_same_seed_bitwise_identical():
    spec = SceneSpec(seed=9)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert a.cloud.coords.tobytes() == b.cloud.coords.tobytes()
    assert a.boxes == b.boxes
    c = generate_scene(spec, seed=10)
    assert a.cloud.coords.tobytes() != c.cloud.coords.tobytes()


def test_crowded_room_places_fewer_and_records_counts(tmp_path):
    crowded = SceneSpec(room=(1.2, 1.2, 1.2), min_objects=10, max_objects=10,
                        max_place_attempts=50, seed=3,
                        classes=(ClassSpec("slab", (0.9, 0.9, 0.4), 0.05),))
    sample = generate_scene(crowded)
    assert sample.requested_objects == 10
    assert sample.placed_objects < 10
    manifest = generate_dataset(crowded, 2, tmp_path / "ds")
    for scene in manifest["scenes"]:
        assert scene["objects"] <= scene["requested"]


def test_boxes_inside_room_and_disjoint():
    spec = SceneSpec(seed=11, min_objects=3, max_objects=5)
    for i in range(20):
        sample = generate_scene(spec, seed=100 + i)
        proposals = [b.to_proposal(4) for b in sample.boxes]
        for b in proposals:
            lo = b.center - b.size / 2
            hi = b.center + b.size / 2
            assert np.all(lo >= -1e-9)
            assert np.all(hi <= np.asarray(spec.room) + 1e-9)
        for i1 in range(len(proposals)):
            for i2 in range(i1 + 1, len(proposals)):
                assert iou_3d_axis_aligned(proposals[i1], proposals[i2]) == 0.0


def test_dataset_roundtrip(tmp_path):
    spec = SceneSpec(seed=2, points=512)
    manifest = generate_dataset(spec, 4, tmp_path / "ds")
    assert len(manifest["scenes"]) == 4
    for scene in manifest["scenes"]:
        cloud = load_cloud_binary(tmp_path / "ds" / scene["file"])
        assert cloud.count == 512
        boxes = load_records(tmp_path / "ds" / scene["boxes"])
        assert len(boxes) == scene["objects"]


def test_manifest_mean_sizes_match_recomputation(tmp_path):
    spec = SceneSpec(seed=7, points=256)
    manifest = generate_dataset(spec, 6, tmp_path / "ds")
    sums = {}
    counts = {}
    for scene in manifest["scenes"]:
        for b in load_records(tmp_path / "ds" / scene["boxes"]):
            sums.setdefault(b.class_id, np.zeros(3))
            sums[b.class_id] += np.asarray(b.size)
            counts[b.class_id] = counts.get(b.class_id, 0) + 1
    means = manifest_mean_sizes(manifest)
    for cid, total in sums.items():
        assert np.allclose(means[cid], total / counts[cid], atol=1e-9)


def test_manifest_volume_list_and_percentiles(tmp_path):
    spec = SceneSpec(seed=13, points=256)
    manifest = generate_dataset(spec, 8, tmp_path / "ds")
    total_boxes = sum(s["objects"] for s in manifest["scenes"])
    assert len(manifest["volumes"]) == total_boxes
    # recomputing the nearest-rank percentiles reproduces the stored ones
    assert percentile_thresholds(manifest["volumes"]) == tuple(manifest["thresholds"])


def test_empty_dataset(tmp_path):
    manifest = generate_dataset(SceneSpec(seed=0), 0, tmp_path / "ds")
    assert manifest["scenes"] == []
    assert manifest["volumes"] == []
    assert not list((tmp_path / "ds").glob("*.pcf"))


def test_thread_count_does_not_change_output(tmp_path):
    spec = SceneSpec(seed=21, points=256)
    m1 = generate_dataset(spec, 5, tmp_path / "a", threads=1)
    m4 = generate_dataset(spec, 5, tmp_path / "b", threads=4)
    for s1, s4 in zip(m1["scenes"], m4["scenes"]):
        b1 = (tmp_path / "a" / s1["file"]).read_bytes()
        b4 = (tmp_path / "b" / s4["file"]).read_bytes()
        assert b1 == b4
    assert (tmp_path / "a" / "manifest.jsonl").read_text() == \
        (tmp_path / "b" / "manifest.jsonl").read_text()


def test_size_mix_brackets_reference_thresholds(tmp_path):
    # a 30/40/30 small/medium/large mix: the empirical nearest-rank 30th and
    # 70th volume percentiles fall in the gaps between the size clusters
    spec = SceneSpec(seed=4, points=128, min_objects=4, max_objects=6)
    manifest = generate_dataset(spec, 50, tmp_path / "ds")
    vols = np.array(manifest["volumes"])
    assert len(vols) >= 200
    v30, v70 = percentile_thresholds(vols)
    small_max = max(v for v in vols if v < 0.155)
    medium = [v for v in vols if 0.155 <= v <= 0.526]
    assert small_max <= v30 <= max(medium)
    assert min(medium) <= v70 <= min(v for v in vols if v > 0.526)