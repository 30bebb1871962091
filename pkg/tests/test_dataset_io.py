"""Tests for manifest, mask and submission I/O."""

import json

import numpy as np
import pytest
from PIL import Image

from lesion_bench.core_model import (
    BinaryMask,
    DatasetManifest,
    DiagnosisClass,
    ManifestEntry,
    Partition,
    PredictionRecord,
    SegStratum,
    Task,
)
from lesion_bench.dataset_io import (
    CLASSIFICATION_HEADER,
    load_classification_submission,
    load_ground_truth,
    load_manifest,
    load_mask,
    load_segmentation_submission,
    load_submission,
    parse_classification_csv,
    save_mask,
    write_classification_csv,
    write_manifest,
)
from lesion_bench.errors import (
    DecodeError,
    DuplicateImageId,
    ExtraRows,
    HeaderMismatch,
    MissingField,
    MissingPrediction,
    MissingRows,
    ParseError,
    UnsupportedFormat,
    ValueOutOfRange,
)

HEADER = ",".join(CLASSIFICATION_HEADER)


def write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_sidecar(manifest_path, **meta):
    data = {"schema_version": 1, **meta}
    write_text(manifest_path.with_suffix(".json"), json.dumps(data))


@pytest.fixture
def cls_manifest(make_cls_manifest):
    return make_cls_manifest([("b", "NV", "INTERNAL"), ("a", "MEL", "EXTERNAL")])


class TestManifest:
    """Tests for loading and writing manifests."""

    def test_segmentation_round_trip(self, temp_dir, seg_manifest):
        """Should write and reload a segmentation manifest with relative mask paths."""
        manifest = DatasetManifest(
            task=Task.SEGMENTATION,
            entries=tuple(
                ManifestEntry(e.image_id, masks=(temp_dir / "truth" / f"{e.image_id}.png",), stratum=e.stratum)
                for e in seg_manifest
            ),
            threshold=0.7,
        )

        path = write_manifest(manifest, temp_dir / "manifest.csv")
        loaded = load_manifest(path)

        assert path.read_text(encoding="utf-8").splitlines()[:2] == [
            "image,stratum,mask",
            "img_a,MEL,truth/img_a.png",
        ]
        assert loaded.image_ids() == ["img_a", "img_b", "img_c"]
        assert loaded.entry("img_b").stratum is SegStratum.NEVI
        assert loaded.entry("img_c").masks == (temp_dir / "truth" / "img_c.png",)
        assert loaded.threshold == 0.7
        assert len(loaded.digest) == 64

    def test_classification_round_trip(self, temp_dir, cls_manifest):
        """Should keep labels and partitions."""
        loaded = load_manifest(write_manifest(cls_manifest, temp_dir / "cls.csv"))

        assert loaded.entry("a").label is DiagnosisClass.MEL
        assert loaded.entry("a").partition is Partition.EXTERNAL
        assert loaded.task is Task.CLASSIFICATION

    def test_digest_tracks_content(self, temp_dir, cls_manifest, make_cls_manifest):
        """Should change the digest when the manifest changes."""
        first = load_manifest(write_manifest(cls_manifest, temp_dir / "one.csv")).digest
        again = load_manifest(write_manifest(cls_manifest, temp_dir / "two.csv")).digest
        other = make_cls_manifest([("b", "NV", "INTERNAL"), ("a", "BCC", "EXTERNAL")])
        changed = load_manifest(write_manifest(other, temp_dir / "three.csv")).digest

        assert first == again
        assert first != changed

    def test_header_mismatch(self, temp_dir):
        """Should refuse a wrong header and point at row 1."""
        path = write_text(temp_dir / "m.csv", "image,label\nx,MEL\n")
        write_sidecar(path, task="classification")

        with pytest.raises(HeaderMismatch) as e:
            load_manifest(path)

        assert e.value.row == 1

    def test_duplicate_id(self, temp_dir):
        """Should refuse a repeated image id with its row number."""
        path = write_text(temp_dir / "m.csv", "image,label,partition\nx,MEL,INTERNAL\nx,NV,INTERNAL\n")
        write_sidecar(path, task="classification")

        with pytest.raises(DuplicateImageId) as e:
            load_manifest(path)

        assert e.value.row == 3

    def test_unknown_label(self, temp_dir):
        """Should refuse labels outside the seven classes."""
        path = write_text(temp_dir / "m.csv", "image,label,partition\nx,SCC,INTERNAL\n")
        write_sidecar(path, task="classification")

        with pytest.raises(ParseError, match="SCC"):
            load_manifest(path)

    def test_missing_files(self, temp_dir):
        """Should report a missing manifest or sidecar as MissingField."""
        with pytest.raises(MissingField):
            load_manifest(temp_dir / "absent.csv")

        path = write_text(temp_dir / "m.csv", "image,label,partition\n")
        with pytest.raises(MissingField):
            load_manifest(path)

    def test_unsupported_schema_version(self, temp_dir):
        """Should refuse sidecars from another schema version."""
        path = write_text(temp_dir / "m.csv", "image,label,partition\n")
        write_text(path.with_suffix(".json"), json.dumps({"schema_version": 2, "task": "classification"}))

        with pytest.raises(ParseError, match="schema_version"):
            load_manifest(path)

    def test_attributes_need_names(self, temp_dir):
        """Should refuse an attributes sidecar with no attribute names."""
        path = write_text(temp_dir / "m.csv", "image\n")
        write_sidecar(path, task="attributes")

        with pytest.raises(MissingField):
            load_manifest(path)

    @pytest.mark.parametrize(
        ("meta", "column"),
        [
            ({"threshold": "abc"}, "threshold"),
            ({"threshold": None}, "threshold"),
            ({"threshold": True}, "threshold"),
            ({"threshold": 1.5}, "threshold"),
            ({"threshold": 0}, "threshold"),
            ({"attribute_names": "globules"}, "attribute_names"),
            ({"attribute_names": ["globules", 3]}, "attribute_names"),
            ({"attribute_names": ["streaks", "streaks"]}, "attribute_names"),
            ({"naming": ["x"]}, "naming"),
            ({"naming": {"thumbnail": "{image_id}.png"}}, "naming"),
            ({"naming": {"segmentation": 7}}, "naming.segmentation"),
            ({"naming": {"segmentation": "{image}_seg.png"}}, "naming.segmentation"),
            ({"naming": {"segmentation": "{image_id.x}.png"}}, "naming.segmentation"),
            ({"naming": {"segmentation": "mask.png"}}, "naming.segmentation"),
            ({"naming": {"attribute": "{image_id}.png"}}, "naming.attribute"),
            ({"task": ["segmentation"]}, "task"),
        ],
    )
    def test_bad_sidecar_values(self, temp_dir, meta, column):
        """Should raise ParseError naming the sidecar and the offending field."""
        path = write_text(temp_dir / "m.csv", "image,stratum,mask\n")
        write_sidecar(path, **{"task": "segmentation", **meta})

        with pytest.raises(ParseError) as e:
            load_manifest(path)

        assert e.value.column == column
        assert e.value.path == path.with_suffix(".json")
        assert e.value.exit_code == 2

    def test_custom_naming(self, temp_dir):
        """Should accept templates that use the image id."""
        path = write_text(temp_dir / "m.csv", "image,stratum,mask\n")
        write_sidecar(path, task="segmentation", threshold=0.7, naming={"segmentation": "seg-{image_id}.png"})

        manifest = load_manifest(path)

        assert manifest.threshold == 0.7
        assert manifest.mask_filename("x1") == "seg-x1.png"
        assert manifest.mask_filename("x1", "globules") == "x1_attribute_globules.png"

    def test_fixture_1512(self, fixture_1512_path):
        """Should load the shipped 1,512-image fixture with its partition split."""
        manifest = load_manifest(fixture_1512_path)

        assert len(manifest) == 1512
        assert manifest.partition_counts() == {Partition.INTERNAL: 1196, Partition.EXTERNAL: 316}
        for partition in Partition:
            labels = {manifest.entry(i).label for i in manifest.ids_in_partition(partition)}
            assert labels == set(DiagnosisClass)


class TestMasks:
    """Tests for mask decoding."""

    def test_binarizes_at_128(self, temp_dir):
        """Should treat gray levels of 128 and above as foreground."""
        gray = np.array([[0, 127, 128, 255]], dtype=np.uint8)
        Image.fromarray(gray).save(temp_dir / "m.png")

        mask = load_mask(temp_dir / "m.png")

        assert mask.bits.tolist() == [[False, False, True, True]]

    def test_save_and_load(self, temp_dir, mask_from_rows):
        """Should store masks as 0/255 PNGs."""
        mask = mask_from_rows("#..", ".##")

        save_mask(mask, temp_dir / "sub" / "m.png")

        with Image.open(temp_dir / "sub" / "m.png") as image:
            assert image.mode == "L"
            assert sorted(set(np.asarray(image).ravel().tolist())) == [0, 255]
        assert load_mask(temp_dir / "sub" / "m.png") == mask

    def test_rgb_converts_to_gray(self, temp_dir):
        """Should accept RGB PNGs through gray conversion."""
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[0, 0] = 255
        Image.fromarray(rgb).save(temp_dir / "rgb.png")

        assert load_mask(temp_dir / "rgb.png").foreground == 1

    def test_rejects_jpeg(self, temp_dir):
        """Should refuse formats other than PNG."""
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(temp_dir / "m.jpg", format="JPEG")

        with pytest.raises(UnsupportedFormat):
            load_mask(temp_dir / "m.jpg")

    def test_rejects_16_bit(self, temp_dir):
        """Should refuse 16-bit gray images."""
        Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(temp_dir / "deep.png")

        with pytest.raises(UnsupportedFormat):
            load_mask(temp_dir / "deep.png")

    def test_rejects_garbage(self, temp_dir):
        """Should report undecodable bytes as DecodeError."""
        (temp_dir / "bad.png").write_bytes(b"not an image at all")

        with pytest.raises(DecodeError):
            load_mask(temp_dir / "bad.png")

    def test_missing_ground_truth(self, temp_dir):
        """Should refuse a manifest whose truth mask is absent."""
        manifest = DatasetManifest(
            task=Task.SEGMENTATION,
            entries=(ManifestEntry("x", masks=(temp_dir / "x.png",), stratum=SegStratum.MEL),),
        )

        with pytest.raises(MissingField):
            load_ground_truth(manifest)


class TestSegmentationSubmission:
    """Tests for loading mask submissions."""

    @pytest.fixture
    def manifest(self, temp_dir, mask_from_rows):
        entries = []
        for image_id in ("b", "a"):
            path = save_mask(mask_from_rows("#.", ".."), temp_dir / "truth" / f"{image_id}.png")
            entries.append(ManifestEntry(image_id, masks=(path,), stratum=SegStratum.OTHER))
        return DatasetManifest(task=Task.SEGMENTATION, entries=tuple(entries))

    def test_loads_named_masks(self, temp_dir, manifest, mask_from_rows):
        """Should load one mask per image by the naming template."""
        for image_id in ("a", "b"):
            save_mask(mask_from_rows("##", ".."), temp_dir / "sub" / f"{image_id}_segmentation.png")

        bundle = load_segmentation_submission(temp_dir / "sub", manifest, workers=2)

        assert bundle.submission_id == "sub"
        assert sorted(bundle.masks) == ["a", "b"]
        assert bundle.masks["a"].foreground == 2
        assert bundle.flags == ()
        assert load_ground_truth(manifest)["b"].foreground == 1

    def test_missing_mask(self, temp_dir, manifest, mask_from_rows):
        """Should name every image without a mask file."""
        save_mask(mask_from_rows("##", ".."), temp_dir / "sub" / "a_segmentation.png")

        with pytest.raises(MissingPrediction) as e:
            load_segmentation_submission(temp_dir / "sub", manifest)

        assert e.value.ids == ["b"]

    def test_unexpected_file_is_flagged(self, temp_dir, manifest, mask_from_rows):
        """Should flag and skip files the manifest does not name."""
        for name in ("a_segmentation.png", "b_segmentation.png", "zzz.png"):
            save_mask(mask_from_rows("##", ".."), temp_dir / "sub" / name)

        bundle = load_submission(temp_dir / "sub", manifest, submission_id="team")

        assert bundle.submission_id == "team"
        assert [flag.code for flag in bundle.flags] == ["UnexpectedFile"]

    def test_empty_mask_is_a_prediction(self, temp_dir, manifest):
        """Should accept an all-background mask as an empty prediction."""
        for image_id in ("a", "b"):
            save_mask(BinaryMask.empty(2, 2), temp_dir / "sub" / f"{image_id}_segmentation.png")

        bundle = load_segmentation_submission(temp_dir / "sub", manifest)

        assert bundle.masks["a"].foreground == 0


class TestClassificationCsv:
    """Tests for classification submission parsing."""

    def test_parses_and_sorts(self, temp_dir, cls_manifest):
        """Should return records in image id order."""
        path = write_text(
            temp_dir / "sub.csv",
            f"{HEADER}\nb,0.1,0.9,0,0,0,0,0\na,1e-1,.5,0,0,0,0,1.0\n",
        )

        records = parse_classification_csv(path, cls_manifest)

        assert [r.image_id for r in records] == ["a", "b"]
        assert records[0].probs == (0.1, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0)

    def test_round_trip(self, temp_dir, cls_manifest):
        """Should reload exactly what was written."""
        records = [
            PredictionRecord("b", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)),
            PredictionRecord("a", (1 / 3, 0.0, 1.0, 0.25, 0.125, 2 / 3, 1e-7)),
        ]

        path = write_classification_csv(records, temp_dir / "out.csv")
        bundle = load_classification_submission(path, cls_manifest)

        assert bundle.submission_id == "out"
        assert list(bundle.records) == sorted(records, key=lambda r: r.image_id)

    def test_header_mismatch(self, temp_dir, cls_manifest):
        """Should refuse columns in another order."""
        path = write_text(temp_dir / "sub.csv", "image,NV,MEL,BCC,AKIEC,BKL,DF,VASC\n")

        with pytest.raises(HeaderMismatch):
            parse_classification_csv(path, cls_manifest)

    @pytest.mark.parametrize("raw", ["abc", "1,5", "nan", "inf", ""])
    def test_rejects_non_decimal(self, temp_dir, cls_manifest, raw):
        """Should refuse values that are not plain decimals."""
        path = write_text(temp_dir / "sub.csv", f'{HEADER}\na,"{raw}",0,0,0,0,0,0\nb,0,0,0,0,0,0,0\n')

        with pytest.raises(ParseError) as e:
            parse_classification_csv(path, cls_manifest)

        assert e.value.row == 2
        assert e.value.column == "MEL"

    def test_rejects_out_of_range(self, temp_dir, cls_manifest):
        """Should refuse probabilities above one."""
        path = write_text(temp_dir / "sub.csv", f"{HEADER}\na,0,0,0,0,0,0,1.5\nb,0,0,0,0,0,0,0\n")

        with pytest.raises(ValueOutOfRange) as e:
            parse_classification_csv(path, cls_manifest)

        assert e.value.column == "VASC"

    def test_duplicate_row(self, temp_dir, cls_manifest):
        """Should refuse a repeated image id."""
        path = write_text(temp_dir / "sub.csv", f"{HEADER}\na,0,0,0,0,0,0,0\na,0,0,0,0,0,0,0\n")

        with pytest.raises(DuplicateImageId):
            parse_classification_csv(path, cls_manifest)

    def test_extra_rows_reported_before_missing(self, temp_dir, cls_manifest):
        """Should report rows for unknown images ahead of absent rows."""
        path = write_text(temp_dir / "sub.csv", f"{HEADER}\nzz,0,0,0,0,0,0,0\n")

        with pytest.raises(ExtraRows) as e:
            parse_classification_csv(path, cls_manifest)

        assert e.value.ids == ["zz"]

    def test_missing_rows(self, temp_dir, cls_manifest):
        """Should list every manifest image without a row."""
        path = write_text(temp_dir / "sub.csv", f"{HEADER}\nb,0,0,0,0,0,0,0\n")

        with pytest.raises(MissingRows) as e:
            parse_classification_csv(path, cls_manifest)

        assert e.value.ids == ["a"]
