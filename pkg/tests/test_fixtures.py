"""Synthetic fixture generation with exactly known ground truth."""

from __future__ import annotations

import json

import numpy as np
import pytest

from attnmask.aggregate import aggregate
from attnmask.binarize import threshold
from attnmask.bundle import read_bundle, validate_bundle
from attnmask.errors import ValidationError
from attnmask.fixtures import MODEL_ID, FixtureSpec, gen_fixture, write_fixture_set
from attnmask.rasters import load_mask

from conftest import tree_digest

SMALL = FixtureSpec(dims=(32, 32), resolutions=(8, 16), timesteps=(1, 5))


def class_token_of(bundle, class_name):
    return next(i for i, word in bundle.tokens if word == class_name)


def bundles_equal(a, b):
    if (a.prompt, a.tokens, a.seed, a.model_id) != (b.prompt, b.tokens, b.seed, b.model_id):
        return False
    if not np.array_equal(a.image, b.image):
        return False
    if len(a.entries) != len(b.entries):
        return False
    for x, y in zip(a.entries, b.entries):
        same_key = (x.layer_id, x.timestep, x.token_index) == (y.layer_id, y.timestep, y.token_index)
        if not same_key or not np.array_equal(x.map, y.map):
            return False
    return True


class TestFixtureSpec:
    def test_defaults_valid(self):
        spec = FixtureSpec()
        assert spec.dims == (128, 128)
        assert spec.prompt == "a photo of a blob"

    def test_area_bounds_widen_range(self):
        spec = FixtureSpec(area_range=(0.2, 0.4))
        lo, hi = spec.area_bounds
        assert lo == pytest.approx(0.05)
        assert hi == pytest.approx(0.92)

    def test_rejections(self):
        with pytest.raises(ValidationError, match="at least"):
            FixtureSpec(dims=(16, 64))
        with pytest.raises(ValidationError, match="aspect"):
            FixtureSpec(dims=(32, 80))
        with pytest.raises(ValidationError, match=">= 4"):
            FixtureSpec(resolutions=(2, 8))
        with pytest.raises(ValidationError, match="exceed the image side"):
            FixtureSpec(dims=(32, 32), resolutions=(64,))
        with pytest.raises(ValidationError, match="timestep"):
            FixtureSpec(timesteps=())
        with pytest.raises(ValidationError, match="unique"):
            FixtureSpec(timesteps=(1, 1))
        with pytest.raises(ValidationError, match="non-negative"):
            FixtureSpec(attn_noise=-0.1)
        with pytest.raises(ValidationError, match="area range"):
            FixtureSpec(area_range=(0.0, 0.4))
        with pytest.raises(ValidationError, match="class"):
            FixtureSpec(class_id=0)


class TestGenFixture:
    def test_deterministic(self):
        a_bundle, a_sample = gen_fixture(SMALL, seed=11)
        b_bundle, b_sample = gen_fixture(SMALL, seed=11)
        assert bundles_equal(a_bundle, b_bundle)
        assert a_sample == b_sample

    def test_seed_changes_content(self):
        a_bundle, _ = gen_fixture(SMALL, seed=11)
        b_bundle, _ = gen_fixture(SMALL, seed=12)
        assert not bundles_equal(a_bundle, b_bundle)

    def test_bundle_passes_validation(self):
        bundle, _ = gen_fixture(SMALL, seed=3)
        assert validate_bundle(bundle) == []

    def test_bundle_contents(self):
        bundle, sample = gen_fixture(SMALL, seed=5)
        assert bundle.model_id == MODEL_ID
        assert bundle.seed == 5
        assert bundle.prompt == "a photo of a blob"
        assert np.array_equal(bundle.image, sample.image)
        keys = {(e.layer_id, e.timestep) for e in bundle.entries}
        assert keys == {(r, t) for r in (8, 16) for t in (1, 5)}
        for entry in bundle.entries:
            assert entry.map.shape == (entry.layer_id, entry.layer_id)
            assert entry.map.dtype == np.float32
            assert entry.token_index == class_token_of(bundle, "blob")

    def test_zero_noise_ground_truth_is_aggregation_fixed_point(self):
        # With attn_noise 0 the stored maps equal the clean fields, so
        # aggregate + threshold(0.5) must rebuild the mask bit for bit.
        for seed in range(6):
            bundle, sample = gen_fixture(SMALL, seed=seed)
            token = class_token_of(bundle, "blob")
            fused = aggregate(bundle, [token], SMALL.dims)
            rebuilt = threshold(fused, 0.5) * SMALL.class_id
            assert np.array_equal(rebuilt.astype(np.uint8), sample.mask)

    def test_noisy_maps_differ_but_stay_valid(self):
        noisy_spec = FixtureSpec(dims=(32, 32), resolutions=(8, 16), timesteps=(1, 5), attn_noise=0.1)
        clean, _ = gen_fixture(SMALL, seed=7)
        noisy, _ = gen_fixture(noisy_spec, seed=7)
        assert not bundles_equal(clean, noisy)
        for entry in noisy.entries:
            assert np.isfinite(entry.map).all()
            assert entry.map.min() >= 0.0
        assert validate_bundle(noisy) == []

    def test_mask_area_within_bounds(self):
        lo, hi = SMALL.area_bounds
        for seed in range(12):
            _, sample = gen_fixture(SMALL, seed=seed)
            fraction = np.count_nonzero(sample.mask) / sample.mask.size
            assert lo <= fraction <= hi, f"seed {seed}: fraction {fraction}"

    def test_mask_uses_class_id(self):
        spec = FixtureSpec(dims=(32, 32), resolutions=(8,), timesteps=(1,), class_id=9)
        _, sample = gen_fixture(spec, seed=2)
        assert set(np.unique(sample.mask)) <= {0, 9}
        assert (sample.mask == 9).any()

    def test_clean_image_is_two_distant_colors(self):
        bundle, sample = gen_fixture(SMALL, seed=4)
        fg = bundle.image[sample.mask == SMALL.class_id]
        bg = bundle.image[sample.mask == 0]
        assert len(np.unique(fg.reshape(-1, 3), axis=0)) == 1
        assert len(np.unique(bg.reshape(-1, 3), axis=0)) == 1
        assert np.abs(fg[0].astype(int) - bg[0].astype(int)).max() >= 96

    def test_image_noise_perturbs_pixels(self):
        noisy_spec = FixtureSpec(dims=(32, 32), resolutions=(8, 16), timesteps=(1, 5), image_noise=5.0)
        clean, _ = gen_fixture(SMALL, seed=9)
        noisy, _ = gen_fixture(noisy_spec, seed=9)
        assert not np.array_equal(clean.image, noisy.image)

    def test_custom_prompt_with_class_word(self):
        bundle, _ = gen_fixture(SMALL, seed=1, prompt="one blob near water")
        assert bundle.prompt == "one blob near water"
        assert bundle.tokens == [(0, "one"), (1, "blob"), (2, "near"), (3, "water")]
        assert all(e.token_index == 1 for e in bundle.entries)

    def test_custom_prompt_without_class_word_appends_it(self):
        bundle, _ = gen_fixture(SMALL, seed=1, prompt="an empty scene")
        assert bundle.tokens[-1] == (3, "blob")
        assert all(e.token_index == 3 for e in bundle.entries)


class TestWriteFixtureSet:
    def test_layout_and_index(self, tmp_path):
        fixture_set = write_fixture_set(tmp_path, 3, SMALL, seed=21)
        assert len(fixture_set.bundle_dirs) == 3
        for i in range(3):
            assert (tmp_path / f"bundle_{i:05d}" / "manifest.json").is_file()
            assert (tmp_path / "gt" / f"{i:05d}.png").is_file()
        index = json.loads((tmp_path / "fixtures.json").read_text())
        assert index["count"] == 3
        assert [row["bundle"] for row in index["samples"]] == [
            "bundle_00000",
            "bundle_00001",
            "bundle_00002",
        ]
        assert index["samples"][0]["class_id"] == SMALL.class_id
        assert index["samples"][0]["class_name"] == "blob"

    def test_round_trip_matches_generation(self, tmp_path):
        fixture_set = write_fixture_set(tmp_path, 2, SMALL, seed=21)
        for bundle_dir, gt_path in zip(fixture_set.bundle_dirs, fixture_set.gt_paths):
            bundle = read_bundle(bundle_dir)
            assert validate_bundle(bundle) == []
            mask = load_mask(gt_path)
            assert mask.shape == SMALL.dims
            assert set(np.unique(mask)) <= {0, SMALL.class_id}

    def test_samples_differ_from_each_other(self, tmp_path):
        fixture_set = write_fixture_set(tmp_path, 2, SMALL, seed=21)
        a = read_bundle(fixture_set.bundle_dirs[0])
        b = read_bundle(fixture_set.bundle_dirs[1])
        assert not bundles_equal(a, b)

    def test_two_runs_byte_identical(self, tmp_path):
        write_fixture_set(tmp_path / "a", 2, SMALL, seed=21)
        write_fixture_set(tmp_path / "b", 2, SMALL, seed=21)
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_changes_tree(self, tmp_path):
        write_fixture_set(tmp_path / "a", 2, SMALL, seed=21)
        write_fixture_set(tmp_path / "b", 2, SMALL, seed=22)
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")

    def test_bad_count_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="positive"):
            write_fixture_set(tmp_path, 0, SMALL, seed=1)
