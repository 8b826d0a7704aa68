import numpy as np
import pytest

from spermvision.core import InputStackSpec, ValidationError
from spermvision.ingestion import (
    DecodeError,
    SamplingMode,
    SamplingPlan,
    VideoSource,
    build_stack,
    decode_video,
    evenly_spaced_starts,
    probe_video,
    read_frame_cache,
    resolve_video_path,
    sample_stacks,
    write_frame_cache,
)


def make_cache(tmp_path, video_id="vid", n=20, size=256, dtype=np.float32, fill=None):
    rng = np.random.default_rng(7)
    if fill is not None:
        frames = np.full((n, size, size), fill, dtype=np.float32)
    else:
        frames = rng.random((n, size, size), dtype=np.float32)
    if dtype == np.uint8:
        frames = np.round(frames * 255).astype(np.uint8)
    path = tmp_path / f"{video_id}.frames"
    write_frame_cache(path, video_id, frames)
    return path, frames


class TestFrameCache:
    def test_round_trip_float32(self, tmp_path):
        path, frames = make_cache(tmp_path)
        video_id, loaded = read_frame_cache(path)
        assert video_id == "vid"
        np.testing.assert_array_equal(loaded, frames)

    def test_round_trip_uint8_scales(self, tmp_path):
        path, frames = make_cache(tmp_path, dtype=np.uint8)
        _, loaded = read_frame_cache(path)
        np.testing.assert_array_equal(loaded, frames.astype(np.float32) / 255.0)

    def test_probe_reads_header_only(self, tmp_path):
        path, _ = make_cache(tmp_path, n=19, size=64)
        source = probe_video(path)
        assert source.video_id == "vid"
        assert source.frame_count == 19
        assert source.native_size == (64, 64)

    def test_truncated_body(self, tmp_path):
        path, _ = make_cache(tmp_path, n=5, size=16)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(DecodeError, match="bytes"):
            read_frame_cache(path)

    def test_not_a_cache_file(self, tmp_path):
        path = tmp_path / "x.frames"
        path.write_bytes(b"garbage here")
        with pytest.raises(DecodeError):
            read_frame_cache(path)


class TestDecodeVideo:
    def test_native_size_is_identity(self, tmp_path):
        path, frames = make_cache(tmp_path, n=20, size=256)
        source = probe_video(path)
        decoded = decode_video(source, frame_size=256)
        assert decoded.shape == (20, 256, 256)
        np.testing.assert_array_equal(decoded, frames)

    def test_all_black_video(self, tmp_path):
        path, _ = make_cache(tmp_path, n=6, size=32, fill=0.0)
        decoded = decode_video(probe_video(path), frame_size=32)
        assert decoded.min() == 0.0 and decoded.max() == 0.0

    def test_checkerboard_downscale_matches_block_mean_oracle(self, tmp_path):
        # 512 -> 256 bilinear at exactly half scale equals the 2x2 block mean;
        # independent oracle computed by reshaping.
        ii, jj = np.indices((512, 512))
        board = (((ii // 2) + (jj // 2)) % 2).astype(np.float32)
        path = tmp_path / "board.frames"
        write_frame_cache(path, "board", board[None])
        decoded = decode_video(probe_video(path), frame_size=256)
        oracle = board.reshape(256, 2, 256, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(decoded[0], oracle, atol=1e-6)
        assert decoded.min() >= 0.0 and decoded.max() <= 1.0

    def test_missing_file(self, tmp_path):
        source = VideoSource("v", tmp_path / "v.frames", 5, (8, 8))
        with pytest.raises(DecodeError, match="not found"):
            decode_video(source, 8)

    def test_stale_probe_detected(self, tmp_path):
        path, _ = make_cache(tmp_path, n=20, size=32)
        source = VideoSource("vid", path, 99, (32, 32))
        with pytest.raises(DecodeError, match="stale"):
            decode_video(source, 32)


@pytest.fixture
def cv2_video(tmp_path):
    import cv2

    rng = np.random.default_rng(2)
    frames = (rng.random((12, 48, 48)) * 255).astype(np.uint8)
    path = tmp_path / "clip.avi"
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 25.0, (48, 48), False)
    if not writer.isOpened():
        pytest.skip("no MJPG writer in this OpenCV build")
    for frame in frames:
        writer.write(frame)
    writer.release()
    return path


class TestContainerDecode:
    def test_avi_round_trip_shapes_and_range(self, cv2_video):
        source = probe_video(cv2_video)
        assert source.frame_count == 12
        decoded = decode_video(source, frame_size=48)
        assert decoded.shape == (12, 48, 48)
        assert decoded.dtype == np.float32
        assert decoded.min() >= 0.0 and decoded.max() <= 1.0

    def test_resolve_video_path(self, cv2_video):
        assert resolve_video_path(cv2_video.parent, "clip") == cv2_video
        with pytest.raises(DecodeError, match="nope"):
            resolve_video_path(cv2_video.parent, "nope")


class TestBuildStack:
    @pytest.fixture
    def frames(self):
        return np.random.default_rng(0).random((20, 16, 16), dtype=np.float32)

    def test_i2_three_identical_copies(self, frames):
        stack = build_stack(frames, InputStackSpec.I2, 5, "v")
        assert stack.data.shape == (3, 16, 16)
        for c in range(3):
            np.testing.assert_array_equal(stack.data[c], frames[5])

    def test_i3_consecutive_in_order(self, frames):
        stack = build_stack(frames, InputStackSpec.I3, 0, "v")
        np.testing.assert_array_equal(stack.data, frames[0:9])

    def test_i4_needs_18_frames(self):
        short = np.zeros((10, 8, 8), dtype=np.float32)
        with pytest.raises(IndexError, match="18"):
            build_stack(short, InputStackSpec.I4, 0)

    def test_i1_single_channel(self, frames):
        stack = build_stack(frames, InputStackSpec.I1, 19, "v")
        assert stack.data.shape == (1, 16, 16)
        np.testing.assert_array_equal(stack.data[0], frames[19])

    def test_out_of_range_start(self, frames):
        with pytest.raises(IndexError):
            build_stack(frames, InputStackSpec.I1, 20)
        with pytest.raises(IndexError):
            build_stack(frames, InputStackSpec.I3, 12)

    def test_temporal_channel_k_bit_equal_to_frame(self, frames):
        for spec in (InputStackSpec.I3, InputStackSpec.I4):
            stack = build_stack(frames, spec, 2, "v")
            for k in range(spec.channel_count):
                np.testing.assert_array_equal(stack.data[k], frames[2 + k])


class TestSampleStacks:
    def source(self, tmp_path, n=100, size=16):
        rng = np.random.default_rng(1)
        path = tmp_path / "v.frames"
        write_frame_cache(path, "v", rng.random((n, size, size), dtype=np.float32))
        return probe_video(path)

    def test_deterministic_for_fixed_seed(self, tmp_path):
        source = self.source(tmp_path)
        plan = SamplingPlan(5, rng_seed=7, mode=SamplingMode.UNIFORM_RANDOM_START)
        a = sample_stacks(source, InputStackSpec.I1, plan, frame_size=16)
        b = sample_stacks(source, InputStackSpec.I1, plan, frame_size=16)
        assert [s.start_frame for s in a] == [s.start_frame for s in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_single_legal_start(self, tmp_path):
        source = self.source(tmp_path, n=18)
        plan = SamplingPlan(1, rng_seed=123)
        stacks = sample_stacks(source, InputStackSpec.I4, plan, frame_size=16)
        assert len(stacks) == 1 and stacks[0].start_frame == 0

    def test_evenly_spaced_formula(self, tmp_path):
        # floor(i * (N - k) / (count - 1)) for N=100, k=9, count=4
        assert evenly_spaced_starts(100, 9, 4) == [0, 30, 60, 91]
        source = self.source(tmp_path, n=100)
        plan = SamplingPlan(4, mode=SamplingMode.EVENLY_SPACED)
        stacks = sample_stacks(source, InputStackSpec.I3, plan, frame_size=16)
        assert [s.start_frame for s in stacks] == [0, 30, 60, 91]

    def test_evenly_spaced_enumeration(self):
        # every start in range, first at 0, last at N-k, spacing within ceil(span/(count-1))
        for n, k, count in [(100, 9, 4), (50, 18, 3), (20, 1, 7), (19, 18, 2), (36, 3, 5)]:
            starts = evenly_spaced_starts(n, k, count)
            assert len(starts) == count
            assert starts[0] == 0 and starts[-1] == n - k
            assert all(0 <= s <= n - k for s in starts)
            gaps = [b - a for a, b in zip(starts, starts[1:])]
            assert all(g >= 0 for g in gaps)
            assert max(gaps) <= -(-(n - k) // (count - 1)) if count > 1 else True

    def test_start_bound_invariant_random_mode(self, tmp_path):
        source = self.source(tmp_path, n=30)
        for spec in InputStackSpec:
            for seed in range(5):
                plan = SamplingPlan(8, rng_seed=seed)
                stacks = sample_stacks(source, spec, plan, frame_size=16)
                assert len(stacks) == 8
                assert all(0 <= s.start_frame <= 30 - spec.channel_count for s in stacks)

    def test_video_too_short(self, tmp_path):
        source = self.source(tmp_path, n=10)
        with pytest.raises(ValidationError, match="needs at least 18"):
            sample_stacks(source, InputStackSpec.I4, SamplingPlan(1), frame_size=16)

    def test_stacks_per_video_positive(self):
        with pytest.raises(ValidationError):
            SamplingPlan(0)
