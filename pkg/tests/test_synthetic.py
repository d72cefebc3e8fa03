import numpy as np
import pytest

from engine.errors import InfeasibleSceneError, UsageError
from sources.synthetic import (
    IDENTITY, SHIFT_PRESETS, DomainShiftSpec, SceneSpec, SyntheticSource, apply_shift, desk_domains,
    foreground_bounds, generate, render_scene, shift_preset, site_shift,
)


class TestScenes:
    def test_same_seed_same_bytes(self):
        scene = SceneSpec(image_size=32, radius=(3.0, 6.0), seed=11)
        a, b = generate(scene, IDENTITY, 3), generate(scene, IDENTITY, 3)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != generate(SceneSpec(image_size=32, radius=(3.0, 6.0), seed=12), IDENTITY, 3).fingerprint()

    def test_images_and_masks_are_well_formed(self):
        data = generate(SceneSpec(image_size=32, radius=(3.0, 6.0)), shift_preset("texture"), 4)
        for image, mask in zip(data.images, data.masks):
            assert image.shape == (1, 32, 32)
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert set(np.unique(mask)) <= {0, 1}

    def test_foreground_fraction_within_bounds(self):
        scene = SceneSpec(image_size=64, seed=5)
        lower, upper = foreground_bounds(scene)
        for i in range(10):
            _, mask = render_scene(scene, np.random.default_rng(i))
            assert lower <= mask.mean() <= upper

    def test_oversized_blobs_are_infeasible(self):
        with pytest.raises(InfeasibleSceneError):
            generate(SceneSpec(image_size=16, radius=(5.0, 12.0)), IDENTITY, 1)

    def test_count_must_be_positive(self):
        with pytest.raises(UsageError):
            generate(SceneSpec(), IDENTITY, 0)

    def test_manifest_records_the_recipe(self):
        data = generate(SceneSpec(image_size=16, radius=(1.5, 3.0), seed=4), IDENTITY, 2, "target")
        assert data.domain_tag == "target"
        assert [m["index"] for m in data.manifest] == [0, 1]
        assert data.manifest[0]["seed"] == 4


class TestShift:
    def test_identity_is_a_no_op(self, rng):
        image = rng.random((8, 8))
        assert np.array_equal(apply_shift(image, IDENTITY), image)
        assert IDENTITY.is_identity

    def test_gain_and_offset(self):
        image = np.full((4, 4), 0.5)
        out = apply_shift(image, DomainShiftSpec(intensity_gain=0.5, intensity_offset=0.1))
        assert np.allclose(out, 0.35)

    def test_clamp_is_optional(self):
        image = np.full((4, 4), 0.9)
        shift = DomainShiftSpec(intensity_gain=2.0)
        assert apply_shift(image, shift).max() == 1.0
        assert apply_shift(image, shift, clamp=False).max() == pytest.approx(1.8)

    def test_noise_needs_a_generator(self):
        with pytest.raises(UsageError):
            apply_shift(np.zeros((4, 4)), DomainShiftSpec(noise_std=0.1))

    def test_blur_keeps_constant_images(self):
        out = apply_shift(np.full((6, 6), 0.4), DomainShiftSpec(blur_radius=2))
        assert np.allclose(out, 0.4)

    def test_masks_ignore_the_shift(self):
        scene = SceneSpec(image_size=32, radius=(3.0, 6.0), seed=2)
        clean, shifted = generate(scene, IDENTITY, 3), generate(scene, shift_preset("texture"), 3)
        for a, b in zip(clean.masks, shifted.masks):
            assert np.array_equal(a, b)
        assert not np.array_equal(clean.images[0], shifted.images[0])

    def test_presets_and_sites(self):
        assert set(SHIFT_PRESETS) >= {"identity", "texture"}
        assert site_shift(0) == IDENTITY
        assert site_shift(3) == site_shift(3)
        assert site_shift(1) != site_shift(2)
        with pytest.raises(UsageError):
            shift_preset("sepia")


class TestCachedSource:
    def test_cache_round_trip_is_exact(self, tmp_path, caplog):
        source = SyntheticSource(cache_dir=tmp_path)
        scene = SceneSpec(image_size=16, radius=(1.5, 3.0), seed=9)
        first = source.fetch(scene, shift_preset("noisy"), 3)
        with caplog.at_level("INFO"):
            second = source.fetch(scene, shift_preset("noisy"), 3)
        assert "[CACHE HIT]" in caplog.text
        assert first.fingerprint() == second.fingerprint()
        assert second.manifest[0]["seed"] == 9

    def test_desk_domains_are_disjoint_and_shifted(self):
        source, target = desk_domains(source_count=4, target_count=3, image_size=16)
        assert (len(source), len(target)) == (4, 3)
        assert source.domain_tag == "source" and target.domain_tag == "target"
        assert source.manifest[0]["seed"] != target.manifest[0]["seed"]
        assert np.mean([img.mean() for img in target.images]) != np.mean([img.mean() for img in source.images])
