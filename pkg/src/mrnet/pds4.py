"""Minimal PDS4 reader for colour Array_3D_Image products.

Only what a Level-2B camera product needs: one unsigned-byte 3-axis image
in a local flat binary file, described by an XML label.  Namespaces are
ignored so both bare and ``pds:``-qualified labels parse.
"""

from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import save_image

SUPPORTED_TYPES = ("UnsignedByte",)
# axis-name order -> storage tag
AXIS_ORDERS = {
    ("band", "line", "sample"): "band-sequential",
    ("line", "band", "sample"): "line-interleaved",
    ("line", "sample", "band"): "pixel-interleaved",
}


class LabelError(ValueError):
    """The label is malformed or outside the supported subset."""


@dataclass(frozen=True)
class Pds4LiteLabel:
    bands: int
    lines: int
    samples: int
    data_type: str
    file_name: str
    offset: int
    axis_order: str = "band-sequential"

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.bands, self.lines, self.samples

    @property
    def nbytes(self) -> int:
        return self.bands * self.lines * self.samples


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _find(node, name):
    for child in node.iter():
        if _local(child.tag) == name:
            return child
    return None


def _children(node, name):
    return [c for c in node if _local(c.tag) == name]


def _int_field(node, name, where):
    el = _find(node, name)
    if el is None or el.text is None or not el.text.strip():
        raise LabelError(f"missing element {where}/{name}")
    try:
        return int(el.text.strip())
    except ValueError:
        raise LabelError(f"element {where}/{name} is not an integer: {el.text.strip()!r}") from None


def pds4lite_parse(label_file) -> Pds4LiteLabel:
    path = Path(label_file)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise LabelError(f"{path}: malformed XML: {exc}") from None
    except OSError as exc:
        raise LabelError(f"{path}: cannot read label: {exc}") from None

    array = _find(root, "Array_3D_Image")
    if array is None:
        raise LabelError(f"{path}: missing element Array_3D_Image")
    file_el = _find(root, "File")
    name_el = _find(file_el, "file_name") if file_el is not None else None
    if name_el is None or not (name_el.text or "").strip():
        raise LabelError(f"{path}: missing element File/file_name")
    offset = _int_field(array, "offset", "Array_3D_Image")
    axes = _int_field(array, "axes", "Array_3D_Image")
    if axes != 3:
        raise LabelError(f"{path}: Array_3D_Image/axes must be 3, got {axes}")
    elem = _find(array, "Element_Array")
    dtype_el = _find(elem, "data_type") if elem is not None else None
    if dtype_el is None or not (dtype_el.text or "").strip():
        raise LabelError(f"{path}: missing element Element_Array/data_type")
    data_type = dtype_el.text.strip()
    if data_type not in SUPPORTED_TYPES:
        raise LabelError(f"{path}: unsupported Element_Array/data_type {data_type!r} "
                         f"(supported: {', '.join(SUPPORTED_TYPES)})")

    extents: dict[str, int] = {}
    seq: dict[str, int] = {}
    for i, ax in enumerate(_children(array, "Axis_Array")):
        name_node = _find(ax, "axis_name")
        axis = (name_node.text or "").strip().lower() if name_node is not None else ""
        if axis not in ("band", "line", "sample"):
            raise LabelError(f"{path}: Axis_Array[{i}]/axis_name {axis!r} not one of Band, Line, Sample")
        extents[axis] = _int_field(ax, "elements", f"Axis_Array[{axis.capitalize()}]")
        seq_node = _find(ax, "sequence_number")
        seq[axis] = int(seq_node.text.strip()) if seq_node is not None and seq_node.text else i + 1
    for axis in ("band", "line", "sample"):
        if axis not in extents:
            raise LabelError(f"{path}: missing element Axis_Array[{axis.capitalize()}]/elements "
                             f"({axis} extent)")
        if extents[axis] < 1:
            raise LabelError(f"{path}: Axis_Array[{axis.capitalize()}]/elements must be positive")
    if offset < 0:
        raise LabelError(f"{path}: Array_3D_Image/offset must be >= 0")
    order = tuple(sorted(seq, key=seq.get))
    if order not in AXIS_ORDERS:
        raise LabelError(f"{path}: unsupported axis order {order}")
    if extents["band"] != 3:
        raise LabelError(f"{path}: Axis_Array[Band]/elements must be 3 for colour products, "
                         f"got {extents['band']}")
    return Pds4LiteLabel(extents["band"], extents["line"], extents["sample"], data_type,
                         name_el.text.strip(), offset, AXIS_ORDERS[order])


def read_array(label: Pds4LiteLabel, raw_file) -> np.ndarray:
    """Raw bytes as a bands x lines x samples uint8 array."""
    blob = Path(raw_file).read_bytes()
    need = label.offset + label.nbytes
    if len(blob) < need:
        raise LabelError(f"{raw_file}: {len(blob)} bytes, need {need} (offset {label.offset} + "
                         f"{label.bands}x{label.lines}x{label.samples})")
    flat = np.frombuffer(blob, dtype=np.uint8, count=label.nbytes, offset=label.offset)
    b, l, s = label.extents
    if label.axis_order == "band-sequential":
        return flat.reshape(b, l, s).copy()
    if label.axis_order == "line-interleaved":
        return flat.reshape(l, b, s).transpose(1, 0, 2).copy()
    return flat.reshape(l, s, b).transpose(2, 0, 1).copy()


def pds4lite_convert(label: Pds4LiteLabel, raw_file, out_path) -> Path:
    """Write the product as an interleaved RGB PNG; nothing is written on error."""
    arr = read_array(label, raw_file)
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".part")
    save_image(arr, tmp)
    os.replace(tmp, out_path)
    return out_path


def convert_product(label_file, out_path) -> Path:
    label = pds4lite_parse(label_file)
    return pds4lite_convert(label, Path(label_file).parent / label.file_name, out_path)


def write_product(image: np.ndarray, label_path, raw_name: str | None = None, offset: int = 0,
                  axis_order: str = "band-sequential", prefix: bytes | None = None) -> Path:
    """Write a uint8 3 x lines x samples array as a raw file plus XML label (fixture helper)."""
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("image must be uint8 shaped 3 x lines x samples")
    label_path = Path(label_path)
    raw_name = raw_name or label_path.with_suffix(".raw").name
    if prefix is None:
        prefix = bytes(offset)
    if len(prefix) != offset:
        raise ValueError("prefix length must equal offset")
    order = {v: k for k, v in AXIS_ORDERS.items()}[axis_order]
    perm = [("band", "line", "sample").index(a) for a in order]
    (label_path.parent / raw_name).write_bytes(prefix + np.ascontiguousarray(image.transpose(perm)).tobytes())
    extents = dict(zip(("band", "line", "sample"), image.shape))
    axes_xml = "\n".join(
        f"""      <Axis_Array>
        <axis_name>{a.capitalize()}</axis_name>
        <elements>{extents[a]}</elements>
        <sequence_number>{i + 1}</sequence_number>
      </Axis_Array>""" for i, a in enumerate(order))
    label_path.write_text(f"""<?xml version="1.0" encoding="UTF-8"?>
<Product_Observational xmlns="http://pds.nasa.gov/pds4/pds/v1">
  <File_Area_Observational>
    <File>
      <file_name>{raw_name}</file_name>
    </File>
    <Array_3D_Image>
      <offset unit="byte">{offset}</offset>
      <axes>3</axes>
      <axis_index_order>Last Index Fastest</axis_index_order>
      <Element_Array>
        <data_type>UnsignedByte</data_type>
      </Element_Array>
{axes_xml}
    </Array_3D_Image>
  </File_Area_Observational>
</Product_Observational>
""", encoding="utf-8")
    return label_path
