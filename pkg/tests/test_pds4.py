import numpy as np
import pytest

from mrnet.data import load_image
from mrnet.pds4 import (AXIS_ORDERS, LabelError, convert_product, pds4lite_convert, pds4lite_parse, read_array,
                        write_product)


def gradient_image(lines=4, samples=4):
    b, l, s = np.meshgrid(np.arange(3), np.arange(lines), np.arange(samples), indexing="ij")
    return (b * 80 + l * 16 + s * 3).astype(np.uint8)


def edit_label(path, old, new):
    text = path.read_text()
    assert old in text
    path.write_text(text.replace(old, new))


class TestParse:
    def test_minimal_label(self, tmp_path):
        label = pds4lite_parse(write_product(gradient_image(), tmp_path / "p.xml"))
        assert label.extents == (3, 4, 4)
        assert (label.data_type, label.offset, label.file_name) == ("UnsignedByte", 0, "p.raw")
        assert label.axis_order == "band-sequential"

    def test_prefixed_namespace(self, tmp_path):
        path = write_product(gradient_image(), tmp_path / "p.xml")
        text = path.read_text().replace('xmlns="', 'xmlns:pds="')
        text = text.replace("<", "<pds:").replace("<pds:/", "</pds:").replace("<pds:?xml", "<?xml")
        path.write_text(text)
        assert pds4lite_parse(path).extents == (3, 4, 4)

    def test_unsupported_type_named(self, tmp_path):
        path = write_product(gradient_image(), tmp_path / "p.xml")
        edit_label(path, "UnsignedByte", "SignedMSB2")
        with pytest.raises(LabelError, match=r"Element_Array/data_type 'SignedMSB2'"):
            pds4lite_parse(path)

    def test_missing_samples_extent_named(self, tmp_path):
        path = write_product(gradient_image(), tmp_path / "p.xml")
        text = path.read_text()
        start = text.index("<axis_name>Sample</axis_name>")
        a = text.index("<elements>", start)
        b = text.index("</elements>", start) + len("</elements>")
        path.write_text(text[:a] + text[b:])
        with pytest.raises(LabelError, match=r"Axis_Array\[Sample\]/elements"):
            pds4lite_parse(path)

    def test_missing_offset_named(self, tmp_path):
        path = write_product(gradient_image(), tmp_path / "p.xml")
        edit_label(path, '<offset unit="byte">0</offset>', "")
        with pytest.raises(LabelError, match="Array_3D_Image/offset"):
            pds4lite_parse(path)

    def test_wrong_band_count(self, tmp_path):
        path = write_product(gradient_image(), tmp_path / "p.xml")
        edit_label(path, "<elements>3</elements>", "<elements>4</elements>")
        with pytest.raises(LabelError, match=r"Axis_Array\[Band\]"):
            pds4lite_parse(path)

    def test_malformed_xml(self, tmp_path):
        (tmp_path / "bad.xml").write_text("<Product_Observational><File>")
        with pytest.raises(LabelError, match="malformed XML"):
            pds4lite_parse(tmp_path / "bad.xml")


class TestConvert:
    @pytest.mark.parametrize("order", sorted(AXIS_ORDERS.values()))
    def test_round_trip_every_byte(self, tmp_path, order):
        img = gradient_image(5, 7)
        label_path = write_product(img, tmp_path / "p.xml", axis_order=order)
        out = convert_product(label_path, tmp_path / "p.png")
        back = np.rint(load_image(out) * 255).astype(np.uint8)
        assert np.array_equal(back, img)

    def test_offset_skips_exact_prefix(self, tmp_path):
        img = gradient_image()
        sentinel = b"\xfe" * 16  # never produced by gradient_image
        label_path = write_product(img, tmp_path / "p.xml", offset=16, prefix=sentinel)
        label = pds4lite_parse(label_path)
        assert label.offset == 16
        arr = read_array(label, tmp_path / "p.raw")
        assert np.array_equal(arr, img)
        assert 0xFE not in arr
        out = convert_product(label_path, tmp_path / "p.png")
        assert np.array_equal(np.rint(load_image(out) * 255).astype(np.uint8), img)

    def test_truncated_raw_rejected_and_nothing_written(self, tmp_path):
        label_path = write_product(gradient_image(), tmp_path / "p.xml")
        raw = tmp_path / "p.raw"
        raw.write_bytes(raw.read_bytes()[:-1])
        with pytest.raises(LabelError, match="need 48"):
            pds4lite_convert(pds4lite_parse(label_path), raw, tmp_path / "p.png")
        assert not (tmp_path / "p.png").exists()
        assert not (tmp_path / "p.png.part").exists()

    def test_trailing_bytes_ignored(self, tmp_path):
        img = gradient_image()
        label_path = write_product(img, tmp_path / "p.xml")
        with open(tmp_path / "p.raw", "ab") as fh:
            fh.write(b"\xff" * 9)
        assert np.array_equal(read_array(pds4lite_parse(label_path), tmp_path / "p.raw"), img)
