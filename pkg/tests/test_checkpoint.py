import numpy as np
import pytest

from saf import checkpoint, model
from saf.checkpoint import CheckpointError
from saf.model import ModelConfig

SMALL = ModelConfig(channels=8, tcn_hidden=16, tcn_dilations=(1, 2), tcn_repeats=1)


@pytest.fixture
def saved(tmp_path):
    params = model.init_params(SMALL, seed=9)
    m = {k: np.full(p.shape, 0.25, np.float32) for k, p in params.items()}
    v = {k: np.full(p.shape, 1e-7, np.float32) for k, p in params.items()}
    path = checkpoint.save(tmp_path / "x.saf", SMALL, params, {"step": 7}, m, v)
    return path, params, m, v


def test_round_trip_is_bit_exact(saved):
    path, params, m, v = saved
    ck = checkpoint.load(path, expect=SMALL)
    assert ck.config == SMALL
    assert list(ck.params) == list(params)
    for k in params:
        assert ck.params[k].data.tobytes() == params[k].data.tobytes()
        assert ck.adam_m[k].tobytes() == m[k].tobytes()
        assert ck.adam_v[k].tobytes() == v[k].tobytes()
    assert ck.state == {"step": "7"}
    again = checkpoint.encode(ck.config, ck.params, ck.state, ck.adam_m, ck.adam_v)
    assert again == path.read_bytes()


def test_corruption_detected(saved):
    path, *_ = saved
    blob = bytearray(path.read_bytes())
    blob[-9] ^= 0x01  # last payload byte, just before the checksum
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.load(path)


def test_truncation_and_bad_magic(saved, tmp_path):
    path, *_ = saved
    blob = path.read_bytes()
    (tmp_path / "t.saf").write_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "t.saf")
    (tmp_path / "m.saf").write_bytes(b"RIFF" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(tmp_path / "m.saf")


def test_config_mismatch_names_the_keys(saved):
    path, *_ = saved
    with pytest.raises(CheckpointError, match="tcn_repeats"):
        checkpoint.load(path, expect=ModelConfig(channels=8, tcn_hidden=16, tcn_dilations=(1, 2), tcn_repeats=2))


def test_no_temp_file_left(saved):
    path, *_ = saved
    assert sorted(p.name for p in path.parent.iterdir()) == ["x.saf"]
