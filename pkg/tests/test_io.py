import numpy as np
import pytest

from conftest import build_dataset
from virt4d import io_engine
from virt4d.dataset import DatasetDescriptor, Partition, make_descriptor
from virt4d.errors import BackendUnsupportedError, TruncatedPartitionError
from virt4d.io_engine import (ReadBackend, TilingPlan, direct_io_supported,
                              plan_tile_spans, read_backend_open, tile_iterator)

BACKENDS = ["mmap", "buffered", "direct"]


def collect(ds_dir, desc, partition, plan, backend):
    return [(t.frame_start, t.frame_count, t.row_start, t.row_count,
             t.data.copy())
            for t in tile_iterator(ds_dir, desc, partition, plan, backend)]


class TestTilingPlan:
    def test_whole_frames_when_small(self):
        desc = make_descriptor((8, 1), (128, 128), "float32_le", 1 << 30)
        # 64 KiB frames, 1 MiB target -> whole-frames, 16 frames/tile
        plan = TilingPlan(1 << 20)
        assert plan.mode(desc) == "whole-frames"
        spans = list(plan_tile_spans(desc, desc.partitions[0], plan))
        assert spans == [(0, 8, 0, 128)]  # 8 frames fit in 512 KiB

    def test_row_slabs_for_big_frames(self):
        desc = make_descriptor((2, 1), (1448, 1448), "float32_le", 1 << 30)
        # 8 MiB frames, 1 MiB target -> 8 slabs of 1/8 of the rows
        plan = TilingPlan(desc.bytes_per_frame // 8)
        assert plan.mode(desc) == "row-slabs"
        spans = list(plan_tile_spans(desc, desc.partitions[0], plan))
        per_frame = [s for s in spans if s[0] == 0]
        assert len(per_frame) == 8
        assert sum(s[3] for s in per_frame) == 1448

    def test_degenerate_single_frame(self):
        desc = make_descriptor((1,), (8, 8), "float32_le", 1024)
        spans = list(plan_tile_spans(desc, desc.partitions[0], TilingPlan()))
        assert spans == [(0, 1, 0, 8)]

    def test_tile_bound(self):
        desc = make_descriptor((64, 1), (16, 16), "float32_le", 1 << 20)
        plan = TilingPlan(3000)  # not a multiple of the 1 KiB frame
        for _, count, _, rows in plan_tile_spans(desc, desc.partitions[0], plan):
            assert count * desc.bytes_per_frame <= 2 * plan.tile_target_bytes

    def test_uint12_odd_row_slabs_stay_aligned(self):
        desc = make_descriptor((2,), (64, 31), "uint12_packed_le", 1 << 20)
        plan = TilingPlan(200)
        for _, _, row_start, row_count in plan_tile_spans(
                desc, desc.partitions[0], plan):
            assert (row_start * 31) % 2 == 0
            assert (row_count * 31) % 2 == 0


class TestBackends:
    @pytest.mark.parametrize("dtype", ["float32_le", "uint16_le",
                                       "uint12_packed_le"])
    def test_equivalence(self, tmp_path, dtype):
        desc, ds_dir, values = build_dataset(tmp_path, (4, 4), (8, 6), dtype,
                                             seed=7)
        plan = TilingPlan(300)
        streams = {}
        for backend in BACKENDS:
            chunks = []
            for p in desc.partitions:
                for *_, data in collect(ds_dir, desc, p, plan, backend):
                    chunks.append(data.reshape(-1))
            streams[backend] = np.concatenate(chunks)
        assert np.array_equal(streams["mmap"], streams["buffered"])
        assert np.array_equal(streams["mmap"], streams["direct"])
        assert np.array_equal(streams["mmap"],
                              values.astype(np.float32).reshape(-1))

    def test_direct_unaligned_partition_offset(self, tmp_path):
        # one shared file, second partition starts 1 frame (non-4096) in
        rng = np.random.default_rng(9)
        frames = rng.random((9, 32, 32), dtype=np.float32)  # 4 KiB frames
        raw = frames.tobytes()
        (tmp_path / "blob.raw").write_bytes(raw)
        bpf = 32 * 32 * 4
        parts = (
            Partition(0, 0, 1, "blob.raw", 0, bpf),
            Partition(1, 1, 8, "blob.raw", bpf, 8 * bpf),
        )
        desc = DatasetDescriptor((9, 1), (32, 32), "float32_le", parts)
        desc.validate()
        plan = TilingPlan(2 * bpf)
        direct = collect(tmp_path, desc, parts[1], plan, "direct")
        buffered = collect(tmp_path, desc, parts[1], plan, "buffered")
        assert len(direct) == len(buffered) == 4
        for (fa, *_, da), (fb, *_, db) in zip(direct, buffered):
            assert fa == fb
            assert np.array_equal(da, db)

    def test_missing_file_names_partition(self, tmp_path):
        desc = make_descriptor((2,), (4, 4), "float32_le", 128)
        with pytest.raises(IOError, match="partition 0"):
            read_backend_open(tmp_path, desc.partitions[0], "buffered")

    def test_truncated_partition(self, tmp_path, small_dataset):
        desc, ds_dir, _ = small_dataset
        part = desc.partitions[0]
        path = ds_dir / part.file_path
        path.write_bytes(path.read_bytes()[:-10])
        for backend in BACKENDS:
            with pytest.raises(TruncatedPartitionError):
                list(tile_iterator(ds_dir, desc, part,
                                   TilingPlan(part.byte_length), backend))

    def test_direct_probe_matches_contract(self, tmp_path):
        # on this filesystem direct IO is expected to work; the probe and the
        # reader must agree either way
        supported = direct_io_supported(tmp_path)
        (tmp_path / "f.raw").write_bytes(b"\0" * 64)
        part = Partition(0, 0, 1, "f.raw", 0, 64)
        if supported:
            read_backend_open(tmp_path, part, "direct").close()
        else:
            with pytest.raises(BackendUnsupportedError, match="buffered"):
                read_backend_open(tmp_path, part, "direct")


class TestTileCompleteness:
    @pytest.mark.parametrize("tile_bytes", [64, 200, 1024, 1 << 20])
    def test_concat_reproduces_partition(self, small_dataset, tile_bytes):
        desc, ds_dir, values = small_dataset
        for p in desc.partitions:
            tiles = collect(ds_dir, desc, p, TilingPlan(tile_bytes), "mmap")
            got = np.concatenate([t[4].reshape(-1) for t in tiles])
            lo = p.frame_start * desc.n_pixels
            hi = lo + p.frame_count * desc.n_pixels
            assert np.array_equal(got,
                                  values.astype(np.float32).reshape(-1)[lo:hi])

    def test_tiles_ascending_no_overlap(self, small_dataset):
        desc, ds_dir, _ = small_dataset
        p = desc.partitions[0]
        covered = []
        for t in tile_iterator(ds_dir, desc, p, TilingPlan(64), "buffered"):
            for f in range(t.frame_start, t.frame_start + t.frame_count):
                for r in range(t.row_start, t.row_start + t.row_count):
                    covered.append((f, r))
        assert covered == sorted(covered)
        assert len(set(covered)) == len(covered)
        assert len(covered) == p.frame_count * desc.sig_shape[0]
