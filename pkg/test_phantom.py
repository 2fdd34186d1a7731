#!/usr/bin/env python3
"""
Phantom generator and dataset layout tests.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from dataset import (
    MANIFEST_NAME,
    load_dataset,
    load_mask_dir,
    load_volume_dir,
    select,
    write_dataset,
)
from errors import ConfigError, DataError
from phantom import (
    PhantomSpec,
    class_region,
    ellipsoid_mask,
    gen_dataset,
    gen_phantom_pair,
    mirror_index,
    phantom_labels,
    phantom_target,
)
from volume_io import Volume, save_volume


def test_same_seed_same_pair():
    spec = PhantomSpec(size=16)
    a = gen_phantom_pair(4, spec, 1)
    b = gen_phantom_pair(4, spec, 1)
    assert a[0] == b[0] and a[1] == b[1]
    assert gen_phantom_pair(5, spec)[0] != a[0]


def test_values_in_unit_range_and_inside_ellipsoid():
    spec = PhantomSpec(size=16)
    source, target = gen_phantom_pair(0, spec)
    for volume in (source, target):
        assert volume.data.min() >= 0.0 and volume.data.max() <= 1.0
    assert source.data.max() == 1.0
    assert (source.data[~ellipsoid_mask(16)] == 0).all()


def test_nonlocal_target_reacts_at_the_mirror():
    source, _ = gen_phantom_pair(1, PhantomSpec(size=16))
    local = phantom_target(source, "local").data
    # the strongest smoothed voxel on the high side of axis 0, and its mirror
    offset = np.unravel_index(np.argmax(local[10:]), local[10:].shape)
    far = (int(offset[0]) + 10, int(offset[1]), int(offset[2]))
    mirrored = mirror_index(far, 16)
    assert mirror_index(mirrored, 16) == far
    bumped = np.array(source.data)
    bumped[mirrored] = 0.0 if bumped[mirrored] > 0.25 else 1.0
    moved = Volume(bumped)

    assert phantom_target(source, "nonlocal").data[far] != phantom_target(moved, "nonlocal").data[far]

    changed = np.argwhere(np.abs(local - phantom_target(moved, "local").data) > 1e-6)
    assert len(changed) > 0
    assert (np.abs(changed - np.array(mirrored)).max(axis=1) <= 1).all()


def test_class_region_is_off_the_mirror_plane():
    region = class_region(32)
    assert region[0].stop <= 16 - 1
    dimmed = np.zeros((32, 32, 32), bool)
    dimmed[region] = True
    assert not (dimmed & dimmed[::-1]).any()


def test_class_one_dims_the_region():
    spec = PhantomSpec(size=16, amplitude=0.5)
    plain, _ = gen_phantom_pair(2, spec, 0)
    dimmed, _ = gen_phantom_pair(2, spec, 1)
    region = class_region(16)
    np.testing.assert_allclose(dimmed.data[region], plain.data[region] * 0.5, rtol=1e-6)
    outside = np.ones((16, 16, 16), bool)
    outside[region] = False
    np.testing.assert_array_equal(dimmed.data[outside], plain.data[outside])


def test_zero_amplitude_removes_class_signal():
    spec = PhantomSpec(size=16, amplitude=0.0)
    assert gen_phantom_pair(3, spec, 0) == gen_phantom_pair(3, spec, 1)


def test_spec_validation():
    with pytest.raises(ConfigError):
        PhantomSpec(n=3, balance="strict").validate()
    PhantomSpec(n=3, balance="loose").validate()
    with pytest.raises(ConfigError):
        PhantomSpec(mode="mirror").validate()
    with pytest.raises(ConfigError):
        PhantomSpec(amplitude=1.5).validate()
    with pytest.raises(ConfigError):
        gen_dataset(PhantomSpec(size=8, n=5))


def test_dataset_ids_labels_and_seeds():
    spec = PhantomSpec(size=8, n=6, seed=10)
    dataset = gen_dataset(spec)
    assert dataset.ids() == [f"sub{i:03d}" for i in range(6)]
    assert dataset.labels() == phantom_labels(spec) == [0, 1, 0, 1, 0, 1]
    assert dataset.subjects[3].input == gen_phantom_pair(13, spec, 1)[0]
    threaded = gen_dataset(spec, workers=3)
    assert all(a.input == b.input and a.target == b.target
               for a, b in zip(dataset.subjects, threaded.subjects))


def test_write_and_load_dataset(tmp_path):
    dataset = gen_dataset(PhantomSpec(size=8, n=4))
    manifest = write_dataset(dataset, tmp_path / "data")
    assert manifest.name == MANIFEST_NAME
    lines = manifest.read_text().splitlines()
    assert lines[1] == "sub001,1,sub001_input.rvol,sub001_target.rvol"

    for source in (tmp_path / "data", manifest):
        loaded = load_dataset(source)
        assert loaded.ids() == dataset.ids()
        assert loaded.labels() == dataset.labels()
        assert loaded.subjects[2].target == dataset.subjects[2].target
    assert loaded.index_of("sub003") == 3
    with pytest.raises(DataError):
        loaded.index_of("sub999")


def test_manifest_errors(tmp_path):
    write_dataset(gen_dataset(PhantomSpec(size=8, n=2)), tmp_path)
    manifest = tmp_path / MANIFEST_NAME
    good = manifest.read_text()

    cases = [
        "sub000,0,sub000_input.rvol\n",
        "sub000,2,sub000_input.rvol,sub000_target.rvol\n",
        "sub000,0,nowhere.rvol,sub000_target.rvol\n",
        "# only a comment\n",
        good.splitlines()[0] + "\n" + good.splitlines()[0] + "\n",
    ]
    for text in cases:
        manifest.write_text(text)
        with pytest.raises(DataError):
            load_dataset(tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def test_volume_and_mask_dirs(tmp_path):
    save_volume(Volume(np.full((4, 4, 4), 0.2)), tmp_path / "sub000.rvol")
    mask = np.zeros((4, 4, 4))
    mask[1:3] = 1.0
    save_volume(Volume(mask), tmp_path / "sub000_coverage.rvol")

    volumes = load_volume_dir(tmp_path)
    assert list(volumes) == ["sub000"]
    masks = load_mask_dir(tmp_path)
    assert masks["sub000"].dtype == bool
    assert masks["sub000"].sum() == 32
    assert select(volumes, ["sub000"], "predictions")[0] == volumes["sub000"]
    with pytest.raises(DataError):
        select(volumes, ["sub000", "sub001"], "predictions")
    with pytest.raises(DataError):
        load_volume_dir(tmp_path / "absent")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
