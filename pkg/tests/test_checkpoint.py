import numpy as np
import pytest

from worldtime4d import checkpoint
from worldtime4d.autodiff import ParamSet
from worldtime4d.errors import ManifestParseError


def _params():
    rng = np.random.default_rng(0)
    return ParamSet([("a.W", rng.standard_normal((3, 4))), ("b", np.array(2.5)), ("c", np.zeros((0, 2))),
                     ("d", rng.standard_normal(5))])


def test_round_trip_is_bit_exact(tmp_path):
    p = _params()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, p)
    q = checkpoint.load(path)
    assert list(q) == list(p)
    for k in p:
        assert q[k].shape == p[k].shape and q[k].tobytes() == p[k].tobytes()
    assert checkpoint.dumps(q) == checkpoint.dumps(p)


def test_truncation_raises_parse_error():
    blob = checkpoint.dumps(_params())
    for cut in (0, 5, 12, len(blob) - 1):
        with pytest.raises(ManifestParseError):
            checkpoint.loads(blob[:cut])


def test_corrupt_header():
    blob = bytearray(checkpoint.dumps(_params()))
    blob[8] = ord("#")
    with pytest.raises(ManifestParseError) as info:
        checkpoint.loads(bytes(blob))
    assert info.value.offset == 8
