import json
import os
import struct
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rdcnet.checkpoint import (
    FORMAT_VERSION, MAGIC, Checkpoint, from_bytes, from_params, load_checkpoint, restore_params, save_checkpoint,
    to_bytes,
)
from rdcnet.errors import DataIOError, FormatError, ShapeError
from rdcnet.model import RDCNetConfig, build
from rdcnet.optim import adam_step
from rdcnet.tensor import make_rng


def small_config(**overrides):
    values = dict(groups=2, group_channels=4, dilation_rates=[1, 2], iterations=2, scale=2, stem_channels=8)
    values.update(overrides)
    return RDCNetConfig(**values)


@pytest.fixture
def params():
    p = build(small_config(), make_rng(0))
    for _, tensor in p.items():
        tensor.grad = np.full(tensor.shape, 0.1, dtype=np.float32)
    adam_step(p, lr=1e-3)
    return p


class TestEncoding:
    def test_header(self, params):
        data = to_bytes(from_params(params))
        assert data[:4] == MAGIC
        assert struct.unpack('<I', data[4:8])[0] == FORMAT_VERSION

    def test_round_trip_is_lossless(self, params):
        ckpt = from_params(params, best_score=0.75)
        back = from_bytes(to_bytes(ckpt))
        assert back.config == ckpt.config
        assert back.step == 1
        assert back.best_score == 0.75
        for name, values in ckpt.params.items():
            assert back.params[name].tobytes() == values.tobytes()
            assert back.first_moment[name].tobytes() == ckpt.first_moment[name].tobytes()
            assert back.second_moment[name].tobytes() == ckpt.second_moment[name].tobytes()

    def test_encoding_is_deterministic(self, params):
        assert to_bytes(from_params(params)) == to_bytes(from_params(params))

    def test_shared_kernel_size(self):
        # adding dilation rates only grows the 1x1 projection
        a = small_config(dilation_rates=[1, 2, 4, 8])
        b = small_config(dilation_rates=[1])
        size_a = len(to_bytes(from_params(build(a, make_rng(0)), include_moments=False)))
        size_b = len(to_bytes(from_params(build(b, make_rng(0)), include_moments=False)))
        width = a.state_channels
        config_delta = (len(json.dumps(a.to_dict(), sort_keys=True, separators=(',', ':')))
                        - len(json.dumps(b.to_dict(), sort_keys=True, separators=(',', ':'))))
        assert size_a - size_b == width * width * 3 * 4 + config_delta


class TestCorruption:
    def test_bad_magic(self, params):
        data = bytearray(to_bytes(from_params(params)))
        data[:4] = b'NOPE'
        with pytest.raises(FormatError, match='magic'):
            from_bytes(bytes(data))

    def test_wrong_version(self, params):
        data = bytearray(to_bytes(from_params(params)))
        data[4:8] = struct.pack('<I', FORMAT_VERSION + 1)
        with pytest.raises(FormatError, match='version'):
            from_bytes(bytes(data))

    def test_truncated(self, params):
        data = to_bytes(from_params(params))
        with pytest.raises(FormatError, match='truncated'):
            from_bytes(data[:-3])

    def test_trailing_bytes(self, params):
        with pytest.raises(FormatError, match='trailing'):
            from_bytes(to_bytes(from_params(params)) + b'\0')

    def test_unpaired_moments(self, params):
        ckpt = from_params(params)
        ckpt.second_moment.pop('stem.weight')
        with pytest.raises(FormatError, match='pair'):
            from_bytes(to_bytes(ckpt))


class TestRestore:
    def test_restores_weights_moments_and_step(self, params):
        restored = restore_params(from_bytes(to_bytes(from_params(params))))
        assert restored.step_count == 1
        for name, tensor in params.items():
            np.testing.assert_array_equal(restored[name].data, tensor.data)
            np.testing.assert_array_equal(restored.first_moment[name], params.first_moment[name])
            assert restored[name].track_grad

    def test_wrong_topology_names_first_offender(self, params):
        other = small_config(group_channels=8)
        with pytest.raises(ShapeError, match='mix.weight'):
            restore_params(from_params(params), other)

    def test_missing_parameter(self, params):
        ckpt = from_params(params)
        del ckpt.params['head.bias']
        with pytest.raises(ShapeError, match='head.bias'):
            restore_params(ckpt)

    def test_unexpected_parameter(self, params):
        ckpt = from_params(params)
        ckpt.params['extra.weight'] = np.zeros(3, dtype=np.float32)
        with pytest.raises(ShapeError, match='extra.weight'):
            restore_params(ckpt)


class TestFiles:
    def test_save_and_load(self, params, tmp_path):
        path = save_checkpoint(tmp_path / 'run' / 'last.ckpt', from_params(params))
        assert path.exists()
        assert not (tmp_path / 'run' / 'last.ckpt.tmp').exists()
        assert isinstance(load_checkpoint(path), Checkpoint)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError, match='absent.ckpt'):
            load_checkpoint(tmp_path / 'absent.ckpt')

    def test_garbage_file(self, tmp_path):
        path = tmp_path / 'garbage.ckpt'
        path.write_bytes(b'0123456789')
        with pytest.raises(FormatError):
            load_checkpoint(path)
