import json

import numpy as np
import pytest

from opmicro.fieldstore import (AnalysisReport, FieldError, FrameStack, ScalarField, canonicalize, load_field,
                                load_stack, save_field, save_stack)


def test_npy_shape_maps_to_frames(tmp_path):
    arr = np.zeros((501, 16, 16), dtype=np.float32)
    np.save(tmp_path / "x.npy", arr)
    st = load_stack(tmp_path / "x.npy")
    assert st.n_frames == 501 and st.channels == 1 and st.shape == (16, 16)


def test_single_frame_roundtrip(tmp_path):
    st = FrameStack(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
    back = load_stack(save_stack(st, tmp_path / "one.npy"))
    assert back == st
    assert back.n_frames == 1


def test_csv_frame_row_major(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("1,2,3\n4,5,6\n7,8,9\n")
    st = load_stack(p)
    np.testing.assert_array_equal(st.gray()[0].ravel(), np.arange(1, 10))


def test_random_field_roundtrip_is_bit_exact(tmp_path):
    data = np.random.default_rng(7).random((3, 128, 128))
    st = FrameStack(data, times=[0.0, 0.5, 2.0], pixel_size=0.1, value_range=(0.0, 1.0), meta={"note": "x"})
    back = load_stack(save_stack(st, tmp_path / "r"))
    assert back == st
    assert back.meta["note"] == "x"
    assert back.data.tobytes() == st.data.tobytes()


def test_save_is_byte_deterministic(tmp_path):
    st = FrameStack(np.random.default_rng(0).random((2, 8, 8)))
    a = save_stack(st, tmp_path / "a.npy").read_bytes()
    b = save_stack(st, tmp_path / "b.npy").read_bytes()
    assert a == b and a[:6] == b"\x93NUMPY"


def test_float32_precision(tmp_path):
    st = FrameStack(np.random.default_rng(0).random((2, 8, 8)))
    back = load_stack(save_stack(st, tmp_path / "a.npy", "float32"))
    assert back.data.dtype == np.float32
    np.testing.assert_allclose(back.data, st.data, rtol=1e-7)


def test_color_stack_channel_last(tmp_path):
    st = FrameStack(np.random.default_rng(1).random((2, 5, 6, 3)))
    back = load_stack(save_stack(st, tmp_path / "c.npy"))
    assert back.channels == 3 and back == st
    with pytest.raises(FieldError):
        back.gray()


@pytest.mark.parametrize("bad", [np.zeros((0, 4, 4)), np.zeros((2, 4, 4, 2)), np.zeros(5)])
def test_rejects_malformed_stacks(bad):
    with pytest.raises(FieldError):
        FrameStack(bad)


def test_rejects_non_finite_on_load(tmp_path):
    arr = np.ones((1, 3, 3))
    arr[0, 1, 1] = np.nan
    np.save(tmp_path / "nan.npy", arr)
    with pytest.raises(FieldError):
        load_stack(tmp_path / "nan.npy")


def test_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.npy").write_bytes(b"not a numpy file")
    with pytest.raises(FieldError):
        load_stack(tmp_path / "bad.npy")


def test_times_must_increase():
    with pytest.raises(FieldError):
        FrameStack(np.zeros((2, 2, 2)), times=[1.0, 1.0])


def test_scalar_field_invariants():
    with pytest.raises(FieldError):
        ScalarField(np.array([[np.inf]]))
    with pytest.raises(FieldError):
        ScalarField(np.zeros((2, 2)), value_range=(1.0, 0.0))
    f = ScalarField(np.zeros((2, 3)), value_range=(0, 2))
    assert f.span() == 2.0 and f.shape == (2, 3)


def test_containers_are_immutable():
    st = FrameStack(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        st.data[0, 0, 0, 0] = 1.0


def test_canonicalize_layouts_and_idempotence():
    a = np.random.default_rng(0).random((4, 5, 3, 2))  # H W C T
    c = canonicalize(a, "HWCT")
    assert c.shape == (2, 4, 5, 3)
    np.testing.assert_array_equal(canonicalize(c, "THWC"), c)
    assert canonicalize(np.zeros((4, 5)), "HW").shape == (1, 4, 5, 1)
    with pytest.raises(FieldError):
        canonicalize(a, "HWC")
    with pytest.raises(FieldError):
        canonicalize(a, "HHWC")


def test_layout_from_sidecar(tmp_path):
    a = np.random.default_rng(0).random((6, 7, 3))  # H W T
    np.save(tmp_path / "hwt.npy", a)
    (tmp_path / "hwt.meta.json").write_text(json.dumps({"layout": "HWT"}))
    st = load_stack(tmp_path / "hwt.npy")
    assert st.shape == (6, 7) and st.n_frames == 3
    np.testing.assert_array_equal(st.gray()[1], a[:, :, 1])


def test_field_roundtrip(tmp_path):
    f = ScalarField(np.random.default_rng(2).random((5, 5)), pixel_size=0.5)
    g = load_field(save_field(f, tmp_path / "f.npy"))
    assert g == f


def test_report_roundtrip_and_provenance(tmp_path):
    inp = tmp_path / "in.bin"
    inp.write_bytes(b"abc")
    rep = AnalysisReport.build("metrics", {"psnr": float("inf"), "v": np.arange(3)}, inputs=[inp],
                               config={"a": 1}, seed=4)
    back = AnalysisReport.read(rep.write(tmp_path / "r.json"))
    assert back.payload == {"psnr": "inf", "v": [0, 1, 2]}
    assert back.provenance["inputs"]["in.bin"] == rep.provenance["inputs"]["in.bin"]
    assert len(back.provenance["config_digest"]) == 64
    with pytest.raises(FieldError):
        AnalysisReport("nonsense", {}, back.provenance)
