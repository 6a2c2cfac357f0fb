import json

import numpy as np
import pytest
from PIL import Image

from calcpheno.volgrid import (BinaryMask, SliceAnnotation, VolumeFormatError, VoxelVolume,
                               load_annotations, load_mask, load_stack, normalize, save_annotations,
                               save_mask, save_volume, write_sidecar)


def test_raw_roundtrip_layout(tmp_path):
    # x varies fastest in the file
    raw = np.arange(2 * 3 * 4, dtype=np.uint16).reshape(2, 3, 4)
    raw.astype("<u2").tofile(tmp_path / "v.raw")
    write_sidecar(tmp_path / "v.json", raw.shape, "uint16", 5.0)
    vol = load_stack(tmp_path / "v.raw")
    assert vol.shape == (2, 3, 4)
    assert vol.spacing_um == 5.0
    assert vol.intensities[0, 0, 1] > vol.intensities[0, 0, 0]
    np.testing.assert_allclose(vol.intensities, raw / raw.max(), atol=1e-7)


def test_normalize_constant_is_zero():
    assert not normalize(np.full((2, 2, 2), 7.0)).any()


def test_voxel_count_mismatch(tmp_path):
    np.zeros(10, np.uint8).tofile(tmp_path / "v.raw")
    write_sidecar(tmp_path / "v.json", (2, 2, 2), "uint8", 3.0)
    with pytest.raises(VolumeFormatError, match="voxel count mismatch"):
        load_stack(tmp_path / "v.raw")


def test_missing_sidecar_field(tmp_path):
    np.zeros(8, np.uint8).tofile(tmp_path / "v.raw")
    (tmp_path / "v.json").write_text(json.dumps({"nx": 2, "ny": 2, "nz": 2, "dtype": "uint8"}))
    with pytest.raises(VolumeFormatError, match="spacing_um"):
        load_stack(tmp_path / "v.raw")


def test_anisotropic_rejected(tmp_path):
    np.zeros(8, np.uint8).tofile(tmp_path / "v.raw")
    write_sidecar(tmp_path / "v.json", (2, 2, 2), "uint8", 3.0, spacing_um_xyz=[3, 3, 6])
    with pytest.raises(VolumeFormatError, match="anisotropic"):
        load_stack(tmp_path / "v.raw")


def test_image_dir_order_and_mismatch(tmp_path):
    for i, v in enumerate([10, 20, 30]):
        Image.fromarray(np.full((4, 5), v, np.uint8)).save(tmp_path / f"s{i:03d}.png")
    vol = load_stack(tmp_path)
    assert vol.shape == (3, 4, 5)
    assert vol.intensities[0].max() == 0 and vol.intensities[2].min() == 1
    Image.fromarray(np.zeros((4, 6), np.uint8)).save(tmp_path / "s999.png")
    with pytest.raises(VolumeFormatError, match="slice-dimension mismatch"):
        load_stack(tmp_path)


def test_float_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vol = VoxelVolume(rng.random((3, 4, 5)).astype(np.float32), 2.5)
    save_volume(vol, tmp_path / "v.raw")
    back = load_stack(tmp_path / "v.raw")
    np.testing.assert_array_equal(back.intensities, vol.intensities)


def test_mask_roundtrip(tmp_path):
    bits = np.random.default_rng(1).random((4, 5, 6)) > 0.5
    save_mask(BinaryMask(bits, 3.0), tmp_path / "m.raw")
    assert load_mask(tmp_path / "m.raw").bits.tolist() == bits.tolist()
    assert set(np.fromfile(tmp_path / "m.raw", np.uint8)) <= {0, 255}


def test_annotation_lipid_outside_sample():
    s = np.zeros((4, 4), bool)
    l = s.copy()
    l[0, 0] = True
    with pytest.raises(VolumeFormatError):
        SliceAnnotation(0, s, l)


def test_annotation_manifest_roundtrip(tmp_path):
    s = np.zeros((6, 7), bool)
    s[1:5, 1:6] = True
    l = np.zeros_like(s)
    l[2:4, 2:4] = True
    path = save_annotations([SliceAnnotation(3, s, l), SliceAnnotation(1, s, l & False)], tmp_path)
    anns = load_annotations(path)
    assert [a.z for a in anns] == [1, 3]
    assert (anns[1].lipid_mask == l).all() and (anns[1].sample_mask == s).all()


def test_annotation_manifest_missing(tmp_path):
    with pytest.raises(VolumeFormatError, match="not found"):
        load_annotations(tmp_path / "nope.json")
