import numpy as np
import pytest

from virt4d import codec, dataset

#: one "[PASS]/[FAIL] criterion: detail" line per acceptance criterion,
#: appended by tests/test_acceptance.py and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_values(total_frames, n_pixels, dtype, seed=0):
    """Random pixel values representable exactly in the given dtype."""
    rng = np.random.default_rng(seed)
    if dtype == "float32_le":
        return rng.random((total_frames, n_pixels), dtype=np.float32)
    if dtype == "uint16_le":
        return rng.integers(0, 65536, size=(total_frames, n_pixels),
                            dtype=np.uint16)
    return rng.integers(0, 4096, size=(total_frames, n_pixels),
                        dtype=np.uint16)


def encode_values(values, dtype) -> bytes:
    if dtype == "float32_le":
        return np.ascontiguousarray(values, dtype="<f4").tobytes()
    if dtype == "uint16_le":
        return np.ascontiguousarray(values, dtype="<u2").tobytes()
    return codec.encode_uint12_le(values.reshape(-1))


def build_dataset(tmp_path, scan_shape, sig_shape, dtype="float32_le",
                  target_partition_bytes=None, seed=0, name="ds"):
    """Write + ingest a random dataset; returns (descriptor, dir, values).

    ``values`` is the (total_frames, n_pixels) float64 ground truth.
    """
    total = int(np.prod(scan_shape))
    pixels = int(np.prod(sig_shape))
    values = make_values(total, pixels, dtype, seed)
    raw = encode_values(values, dtype)
    src = tmp_path / f"{name}-src.raw"
    src.write_bytes(raw)
    if target_partition_bytes is None:
        target_partition_bytes = max(len(raw) // 4, len(raw) // total)
    desc = dataset.ingest(src, dtype, scan_shape, sig_shape,
                          tmp_path / name, target_partition_bytes)
    return desc, tmp_path / name, values.astype(np.float64)


def oracle_apply(values_f64, masks):
    """Naive double-loop reference for mask application.

    float32 products, float64 accumulation, pixel order; independent of the
    tiled engine path.
    """
    frames, pixels = values_f64.shape
    k = len(masks)
    out = np.zeros((frames, k))
    v32 = values_f64.astype(np.float32)
    m32 = [np.asarray(m, dtype=np.float32).reshape(-1) for m in masks]
    for f in range(frames):
        for ki in range(k):
            s = 0.0
            for p in range(pixels):
                s += float(np.float32(v32[f, p] * m32[ki][p]))
            out[f, ki] = s
    return out


@pytest.fixture
def small_dataset(tmp_path):
    return build_dataset(tmp_path, (4, 4), (8, 8), "float32_le",
                         target_partition_bytes=4 * 64 * 4)
