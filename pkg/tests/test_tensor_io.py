import struct

import numpy as np
import pytest

from fseg import (
    DenseMatrix,
    FeatureTensor,
    FstFormatError,
    InputError,
    LabelMask,
    Palette,
    PaletteError,
    UnsupportedError,
    load_palette,
    read_fst,
    read_fst_header,
    read_gt_mask,
    write_fst,
    write_mask_pgm,
)

from conftest import make_tensor, save_code_image


class TestFstRoundTrip:
    def test_smallest_tensor_layout(self, tmp_path):
        path = tmp_path / "t.fst"
        write_fst(path, FeatureTensor(np.zeros((1, 1, 1), dtype=np.float32)))
        raw = path.read_bytes()
        # 4 magic + 2 version + 1 dtype + 1 ndim + 3*4 dims + 4 payload
        assert len(raw) == 24
        assert raw[:4] == b"FSEG"
        assert struct.unpack_from("<H", raw, 4)[0] == 1
        assert raw[6] == 0 and raw[7] == 3
        assert struct.unpack_from("<3I", raw, 8) == (1, 1, 1)
        assert struct.unpack_from("<f", raw, 20)[0] == 0.0

    def test_tensor_round_trip_bit_exact(self, tmp_path):
        t = make_tensor(0, 14, 14, 1024)
        path = tmp_path / "t.fst"
        write_fst(path, t)
        back = read_fst(path)
        assert isinstance(back, FeatureTensor)
        assert back.data.tobytes() == t.data.tobytes()
        assert back == t

    def test_matrix_round_trip(self, tmp_path):
        m = DenseMatrix(np.array([[1.5, -2.25], [0.0, 7.0]], dtype=np.float32))
        write_fst(tmp_path / "m.fst", m)
        assert read_fst(tmp_path / "m.fst") == m

    def test_mask_round_trip_with_trailer(self, tmp_path):
        mask = LabelMask(np.array([[0, 3], [2, 1]], dtype=np.uint32), 4)
        path = tmp_path / "m.fst"
        write_fst(path, mask)
        back = read_fst(path)
        assert back == mask
        assert back.n_labels == 4
        # trailer is the last u32
        assert struct.unpack("<I", path.read_bytes()[-4:])[0] == 4

    def test_random_round_trips(self, tmp_path):
        rng = np.random.default_rng(11)
        for i in range(50):
            kind = i % 3
            if kind == 0:
                obj = make_tensor(i, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 9)))
            elif kind == 1:
                obj = DenseMatrix(rng.standard_normal((int(rng.integers(1, 7)), int(rng.integers(1, 7)))).astype(np.float32))
            else:
                n = int(rng.integers(2, 9))
                obj = LabelMask(rng.integers(0, n, size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)))).astype(np.uint32), n)
            path = tmp_path / f"obj{i}.fst"
            write_fst(path, obj)
            assert read_fst(path) == obj

    def test_one_dim_file_reads_as_single_row(self, tmp_path):
        path = tmp_path / "v.fst"
        payload = np.array([1.0, 2.0, 3.0], dtype="<f4").tobytes()
        path.write_bytes(struct.pack("<4sHBB", b"FSEG", 1, 0, 1) + struct.pack("<I", 3) + payload)
        back = read_fst(path)
        assert isinstance(back, DenseMatrix)
        assert back.n_rows == 1 and back.n_cols == 3
        assert np.array_equal(back.data[0], [1.0, 2.0, 3.0])

    def test_one_dim_label_file(self, tmp_path):
        path = tmp_path / "l.fst"
        payload = np.array([0, 2, 1], dtype="<u4").tobytes()
        path.write_bytes(
            struct.pack("<4sHBB", b"FSEG", 1, 1, 1) + struct.pack("<I", 3) + payload + struct.pack("<I", 3)
        )
        back = read_fst(path)
        assert isinstance(back, LabelMask)
        assert back.rows == 1 and back.cols == 3 and back.n_labels == 3


class TestFstErrors:
    def test_negative_value_rejected_at_construction(self):
        with pytest.raises(InputError, match="non-negative"):
            FeatureTensor(np.array([[[-0.5]]], dtype=np.float32))

    def test_mutated_tensor_rejected_before_write(self, tmp_path):
        t = make_tensor(1, 2, 2, 2)
        t.data[0, 0, 0] = -0.5
        with pytest.raises(InputError, match="non-negative"):
            write_fst(tmp_path / "bad.fst", t)
        assert not (tmp_path / "bad.fst").exists()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.fst"
        path.write_bytes(b"XSEG" + bytes(20))
        with pytest.raises(FstFormatError, match="bad magic"):
            read_fst(path)

    def test_truncated_payload(self, tmp_path):
        # declares 2x2x2 but carries only 7 floats
        path = tmp_path / "x.fst"
        head = struct.pack("<4sHBB", b"FSEG", 1, 0, 3) + struct.pack("<3I", 2, 2, 2)
        path.write_bytes(head + np.zeros(7, dtype="<f4").tobytes())
        with pytest.raises(FstFormatError, match="truncated payload"):
            read_fst(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.fst"
        head = struct.pack("<4sHBB", b"FSEG", 1, 0, 3) + struct.pack("<3I", 1, 1, 1)
        path.write_bytes(head + np.zeros(2, dtype="<f4").tobytes())
        with pytest.raises(FstFormatError, match="trailing"):
            read_fst(path)

    def test_negative_payload_in_tensor_file(self, tmp_path):
        path = tmp_path / "x.fst"
        head = struct.pack("<4sHBB", b"FSEG", 1, 0, 3) + struct.pack("<3I", 1, 1, 2)
        path.write_bytes(head + np.array([1.0, -1.0], dtype="<f4").tobytes())
        with pytest.raises(FstFormatError, match="non-negative"):
            read_fst(path)

    def test_zero_dimension(self, tmp_path):
        path = tmp_path / "x.fst"
        head = struct.pack("<4sHBB", b"FSEG", 1, 0, 2) + struct.pack("<2I", 0, 3)
        path.write_bytes(head)
        with pytest.raises(FstFormatError, match="positive"):
            read_fst(path)

    def test_dimension_overflow(self, tmp_path):
        path = tmp_path / "x.fst"
        head = struct.pack("<4sHBB", b"FSEG", 1, 0, 3) + struct.pack("<3I", 70000, 70000, 70000)
        path.write_bytes(head)
        with pytest.raises(FstFormatError, match="overflow"):
            read_fst(path)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(OSError):
            read_fst(tmp_path / "nope.fst")

    def test_header_info(self, tmp_path):
        mask = LabelMask(np.array([[0, 1]], dtype=np.uint32), 2)
        write_fst(tmp_path / "m.fst", mask)
        info = read_fst_header(tmp_path / "m.fst")
        assert info["dtype"] == "u32-labels"
        assert info["dims"] == [1, 2]
        assert info["n_labels"] == 2


class TestPalette:
    def test_parse_with_comments(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("# tumor goes first\n1 0\n2 1  # stroma\n\n3 2\n")
        pal = load_palette(p)
        assert pal.mapping == {1: 0, 2: 1, 3: 2}
        assert pal.n_categories == 3
        assert pal.ignore_label == 3

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 0 9\n")
        with pytest.raises(PaletteError, match="expected"):
            load_palette(p)

    def test_duplicate_source_code(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 0\n1 1\n")
        with pytest.raises(PaletteError, match="twice"):
            load_palette(p)

    def test_collision_flag(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 0\n2 0\n3 1\n")
        assert load_palette(p).n_categories == 2  # many-to-one is fine by default
        with pytest.raises(PaletteError, match="collision"):
            load_palette(p, forbid_collisions=True)

    def test_non_contiguous_targets(self):
        with pytest.raises(PaletteError, match="contiguous"):
            Palette({1: 0, 2: 2})


class TestGtMask:
    def test_direct_remap(self, tmp_path):
        save_code_image(tmp_path / "m.png", np.array([[1, 2], [1, 2]]))
        mask = read_gt_mask(tmp_path / "m.png", Palette({1: 0, 2: 1}))
        assert np.array_equal(mask.labels, [[0, 1], [0, 1]])
        assert mask.n_labels == 2

    def test_unmapped_code_gets_ignore_label(self, tmp_path):
        save_code_image(tmp_path / "m.png", np.array([[1, 7], [2, 1]]))
        pal = Palette({1: 0, 2: 1})
        mask = read_gt_mask(tmp_path / "m.png", pal)
        assert mask.labels[0, 1] == pal.ignore_label == 2
        assert mask.n_labels == 3

    def test_unreadable_image(self, tmp_path):
        bad = tmp_path / "m.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(InputError, match="unreadable"):
            read_gt_mask(bad, Palette({1: 0}))

    def test_five_category_histogram_preserved(self, tmp_path):
        # synthetic mask shaped like a 5-category tissue test set:
        # 33.55% / 24.3% / 26.24% / 9.23% / 3.26% of 10000 pixels, the
        # remaining 3.42% is code 0, absent from the palette.
        counts = {1: 3355, 2: 2430, 3: 2624, 4: 923, 5: 326}
        codes = np.zeros(10000, dtype=np.int64)
        start = 0
        for code, cnt in counts.items():
            codes[start : start + cnt] = code
            start += cnt
        rng = np.random.default_rng(5)
        rng.shuffle(codes)
        save_code_image(tmp_path / "m.png", codes.reshape(100, 100))

        pal = Palette({1: 0, 2: 1, 3: 2, 4: 3, 5: 4})
        mask = read_gt_mask(tmp_path / "m.png", pal)
        hist = np.bincount(mask.labels.reshape(-1), minlength=6)
        assert hist.sum() == 10000  # total pixel count preserved
        fractions = hist[:5] / 10000
        assert np.allclose(fractions, [0.3355, 0.2430, 0.2624, 0.0923, 0.0326])
        assert hist[5] == 10000 - sum(counts.values())


class TestPgm:
    def test_raw_labels(self, tmp_path):
        mask = LabelMask(np.array([[0, 1]], dtype=np.uint32), 2)
        path = tmp_path / "m.pgm"
        write_mask_pgm(path, mask, scale=False)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 1\n255\n")
        assert raw[-2:] == bytes([0, 1])

    def test_scaled_stretch_endpoints(self, tmp_path):
        mask = LabelMask(np.array([[0, 1]], dtype=np.uint32), 2)
        path = tmp_path / "m.pgm"
        write_mask_pgm(path, mask, scale=True)
        assert path.read_bytes()[-2:] == bytes([0, 255])
        sidecar = (tmp_path / "m.labels.txt").read_text()
        assert "0 0" in sidecar and "1 255" in sidecar

    def test_too_many_labels(self, tmp_path):
        mask = LabelMask(np.zeros((1, 1), dtype=np.uint32), 300)
        with pytest.raises(UnsupportedError):
            write_mask_pgm(tmp_path / "m.pgm", mask, scale=False)

    def test_empty_path_is_io_error(self):
        mask = LabelMask(np.zeros((1, 1), dtype=np.uint32), 1)
        with pytest.raises(OSError):
            write_mask_pgm("", mask, scale=False)
