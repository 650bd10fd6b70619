import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from camkit import checkpoint


def test_round_trip_mixed_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "frontend/depthwise/WTC:0/weight": rng.normal(size=(4, 1, 2, 2)).astype(np.float32),
        "backbone/head/bias": rng.normal(size=3),
        "optim/t": np.array([7], dtype=np.int64),
        "scalar": np.float64(2.5) * np.ones(()),
    }
    checkpoint.save(tmp_path / "m.camk", tensors)
    back = checkpoint.load(tmp_path / "m.camk")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape and np.array_equal(back[k], v)


def test_header_layout():
    raw = checkpoint.dumps({"a": np.zeros(2, dtype=np.float32)})
    assert raw[:4] == b"CAMK"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1


def test_corrupt_input_rejected():
    raw = checkpoint.dumps({"a": np.zeros(3)})
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.loads(raw[:-5])


@settings(max_examples=50, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(max_dims=4, max_side=4),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(arr):
    back = checkpoint.loads(checkpoint.dumps({"x": arr}))["x"]
    assert back.dtype == arr.dtype and np.array_equal(back, arr)
