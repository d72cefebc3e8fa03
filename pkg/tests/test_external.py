import numpy as np
import pytest

from engine.errors import EmptyDatasetError, LabelRangeError, MissingFileError, SizeMismatchError
from sources.external import MANIFEST_NAME, export, load_external, read_manifest
from sources.synthetic import IDENTITY, SceneSpec, generate


@pytest.fixture
def scenes():
    return generate(SceneSpec(image_size=16, radius=(1.5, 3.0), seed=1), IDENTITY, 3)


class TestExportLoad:
    def test_round_trip_16_bit(self, tmp_path, scenes):
        manifest = export(scenes, tmp_path / "set")
        assert manifest.name == MANIFEST_NAME
        loaded = load_external(manifest)
        assert len(loaded) == 3 and loaded.labeled
        for original, back in zip(scenes.images, loaded.images):
            assert back.shape == (1, 16, 16)
            assert np.abs(original - back).max() <= 0.5 / 65535 + 1e-12
        for original, back in zip(scenes.masks, loaded.masks):
            assert np.array_equal(original, back)

    def test_unlabeled_export(self, tmp_path, scenes):
        manifest = export(scenes.unlabeled(), tmp_path / "bare")
        loaded = load_external(manifest, domain_tag="target")
        assert not loaded.labeled and loaded.domain_tag == "target"
        assert read_manifest(manifest)["mask"].isna().all()


    def test_hash_in_path_is_not_a_comment(self, tmp_path, scenes):
        export(scenes, tmp_path / "scan#2")
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text(
            "# scanner export, batch 2\n"
            + "".join(f"scan#2/images/{i:05d}.pgm\tscan#2/masks/{i:05d}.pgm\n" for i in range(3))
            + "  # trailing note\n"
        )
        rows = read_manifest(manifest)
        assert rows["image"].tolist()[0] == "scan#2/images/00000.pgm"
        loaded = load_external(manifest)
        assert len(loaded) == 3 and loaded.labeled


class TestErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_external(tmp_path / "nope.tsv")

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / MANIFEST_NAME
        path.write_text("\n")
        with pytest.raises(EmptyDatasetError):
            load_external(path)

    def test_missing_image(self, tmp_path, scenes):
        manifest = export(scenes, tmp_path / "set")
        (tmp_path / "set" / "images" / "00001.pgm").unlink()
        with pytest.raises(MissingFileError):
            load_external(manifest)

    def test_size_mismatch_names_the_pair(self, tmp_path, scenes):
        manifest = export(scenes, tmp_path / "set")
        other = generate(SceneSpec(image_size=32, radius=(3.0, 6.0)), IDENTITY, 1)
        export(other, tmp_path / "big")
        lines = manifest.read_text().splitlines()
        lines[1] = "images/00001.pgm\t../big/masks/00000.pgm"
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(SizeMismatchError, match="00001.pgm"):
            load_external(manifest)

    def test_label_out_of_range(self, tmp_path, scenes):
        manifest = export(scenes, tmp_path / "set")
        with pytest.raises(LabelRangeError):
            load_external(manifest, num_classes=1)

    def test_partial_masks(self, tmp_path, scenes):
        manifest = export(scenes, tmp_path / "set")
        lines = manifest.read_text().splitlines()
        lines[2] = lines[2].split("\t")[0]
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(MissingFileError):
            load_external(manifest)
