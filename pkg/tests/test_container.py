"""
张量容器格式测试
"""
import os
import struct
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from dfr_workbench.container import (  # noqa: E402
    MAGIC,
    decode_container,
    encode_container,
    load_container,
    save_container,
)
from dfr_workbench.errors import FormatError  # noqa: E402


class TestContainerLayout(unittest.TestCase):
    """字节布局"""

    def test_empty_container_round_trips(self):
        data = encode_container({})
        self.assertEqual(data, MAGIC + struct.pack("<II", 1, 0))
        self.assertEqual(decode_container(data), {})

    def test_single_matrix_byte_length(self):
        """2x3 张量 'w': 4 + 4 + 4 + (4 + 1) + 4 + 16 + 48"""
        values = np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0
        data = encode_container({"w": values})
        self.assertEqual(len(data), 85)
        decoded = decode_container(data)
        self.assertEqual(list(decoded), ["w"])
        self.assertEqual(decoded["w"].tobytes(), values.tobytes())

    def test_payload_is_little_endian_row_major(self):
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        data = encode_container({"m": values})
        payload = data[-32:]
        self.assertEqual(struct.unpack("<4d", payload), (1.0, 2.0, 3.0, 4.0))

    def test_scalar_entry(self):
        decoded = decode_container(encode_container({"s": np.array(2.5)}))
        self.assertEqual(decoded["s"].shape, ())
        self.assertEqual(float(decoded["s"]), 2.5)


class TestContainerErrors(unittest.TestCase):
    """格式错误报告字节偏移"""

    def setUp(self):
        self.data = encode_container({"w": np.ones((2, 3))})

    def test_bad_magic(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(b"XXXX" + self.data[4:])
        self.assertEqual(ctx.exception.offset, 0)

    def test_version_mismatch(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.data[:4] + struct.pack("<I", 99) + self.data[8:])
        self.assertEqual(ctx.exception.offset, 4)

    def test_truncated_payload(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.data[:-8])
        self.assertEqual(ctx.exception.offset, 37)

    def test_trailing_bytes(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.data + b"\x00")
        self.assertEqual(ctx.exception.offset, len(self.data))

    def test_duplicate_names_rejected(self):
        entry = self.data[12:]
        crafted = MAGIC + struct.pack("<II", 1, 2) + entry + entry
        with self.assertRaises(FormatError) as ctx:
            decode_container(crafted)
        self.assertEqual(ctx.exception.offset, 12 + len(entry))


class TestContainerFiles(unittest.TestCase):
    """文件读写"""

    def test_save_and_load(self):
        entries = {"a/b": np.linspace(-1, 1, 12).reshape(3, 4), "c": np.zeros((0, 5))}
        with tempfile.TemporaryDirectory() as tmp:
            path = save_container(Path(tmp) / "sub" / "t.dfrt", entries)
            loaded = load_container(path)
        self.assertEqual(list(loaded), ["a/b", "c"])
        np.testing.assert_array_equal(loaded["a/b"], entries["a/b"])
        self.assertEqual(loaded["c"].shape, (0, 5))


shapes = st.lists(st.integers(min_value=0, max_value=4), min_size=0, max_size=3)


class TestContainerProperties(unittest.TestCase):
    """随机形状的无损往返"""

    @settings(max_examples=50, deadline=None)
    @given(shapes, st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_bitwise_round_trip(self, shape, seed):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal(shape) * 1e3
        decoded = decode_container(encode_container({"t": values}))["t"]
        self.assertEqual(decoded.shape, tuple(shape))
        self.assertEqual(decoded.tobytes(), values.tobytes())


if __name__ == '__main__':
    unittest.main()
