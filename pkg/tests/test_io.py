import zipfile

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oasis.io import (DatasetError, DatasetLayout, davis_palette, load_checkpoint,
                      load_sequence, read_mask_png, save_checkpoint, save_predictions,
                      write_frame_png, write_mask_png, zip_predictions)
from oasis.model import ModelConfig, build_model
from oasis.types import IdMask, InvalidInputError


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, (9, 11), elements=st.integers(0, 255)))
def test_mask_png_round_trip(tmp_path_factory, labels):
    p = tmp_path_factory.mktemp("m") / "a.png"
    write_mask_png(p, labels)
    back, pal = read_mask_png(p)
    np.testing.assert_array_equal(back, labels)
    assert pal[:768] == davis_palette()


def test_empty_mask_round_trip(tmp_path):
    write_mask_png(tmp_path / "e.png", np.zeros((5, 6), int))
    back, _ = read_mask_png(tmp_path / "e.png")
    assert back.shape == (5, 6) and not back.any()


def test_custom_palette_preserved(tmp_path):
    pal = list(range(768))
    pal = [(v * 7) % 256 for v in pal]
    write_mask_png(tmp_path / "p.png", np.array([[0, 1], [2, 3]]), pal)
    assert read_mask_png(tmp_path / "p.png")[1][:768] == pal


def test_out_of_range_labels_rejected(tmp_path):
    with pytest.raises(InvalidInputError):
        write_mask_png(tmp_path / "x.png", np.array([[256]]))


def _make_sequence(root, name="seq", n=3, annotate=(0,), palette=None):
    rng = np.random.default_rng(0)
    for t in range(n):
        write_frame_png(root / "JPEGImages" / name / f"{t:05d}.png", rng.random((3, 16, 16)))
        if t in annotate:
            lab = np.zeros((16, 16), int)
            lab[4:8, 4:8] = 1
            lab[10:14, 2:6] = 2
            write_mask_png(root / "Annotations" / name / f"{t:05d}.png", lab, palette)
    return DatasetLayout(root)


def test_first_frame_only_annotations(tmp_path):
    seq = load_sequence(_make_sequence(tmp_path), "seq")
    assert isinstance(seq.masks[0], IdMask)
    assert seq.masks[1:] == [None, None]
    assert seq.frame_names == ["00000", "00001", "00002"]


def test_corrupt_png_names_file_and_sequence(tmp_path):
    layout = _make_sequence(tmp_path)
    bad = tmp_path / "JPEGImages" / "seq" / "00001.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError) as ei:
        load_sequence(layout, "seq")
    assert "00001.png" in str(ei.value) and "seq" in str(ei.value)
    assert ei.value.sequence == "seq"


def test_missing_first_annotation(tmp_path):
    layout = _make_sequence(tmp_path, annotate=())
    with pytest.raises(DatasetError, match="first-frame"):
        load_sequence(layout, "seq")


def test_palette_collision_detected(tmp_path):
    pal = davis_palette()
    pal[6:9] = pal[3:6]  # index 2 gets the colour of index 1
    layout = _make_sequence(tmp_path, palette=pal)
    with pytest.raises(DatasetError, match="collision"):
        load_sequence(layout, "seq")


def test_zip_is_deterministic(tmp_path):
    masks = [IdMask(np.eye(8, dtype=int)) for _ in range(3)]
    for d in ("a", "b"):
        layout = DatasetLayout(tmp_path / d)
        save_predictions(masks, layout, "s")
        zip_predictions(layout, tmp_path / f"{d}.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    with zipfile.ZipFile(tmp_path / "a.zip") as zf:
        assert zf.namelist() == [f"Annotations/s/{i:05d}.png" for i in range(3)]


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_model(ModelConfig(), 3)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    a, b = model.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k
    assert back.cfg == model.cfg
    save_checkpoint(tmp_path / "n.ckpt", back)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "x.ckpt")
