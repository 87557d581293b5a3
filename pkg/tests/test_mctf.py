import numpy as np
import pytest

from conftest import small_model
from pwave.imageio import read_video, write_video
from pwave.mctf import (
    BLOCK, GOP_SIZE, SEARCH, MotionField, VideoError, decode_gop, decode_video, encode_gop,
    encode_video, inverse_motion_compensate, mctf_forward, mctf_inverse, motion_compensate,
    motion_estimate, pack_motion, temporal_lift, temporal_unlift, unpack_motion,
)


def random_field(shape, rng):
    rows, cols = -(-shape[0] // BLOCK), -(-shape[1] // BLOCK)
    return MotionField(rng.integers(-SEARCH, SEARCH + 1, (rows, cols, 2)))


def brute_force_sad(ref, cur, block=BLOCK, search=SEARCH):
    """Loop reference for block matching with edge-replicated references."""
    h, w = cur.shape
    pad = np.pad(ref.astype(np.int64), search, mode="edge")
    out = np.zeros((-(-h // block), -(-w // block), 2), np.int64)
    order = [(0, 0)] + [(dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)
                        if (dy, dx) != (0, 0)]
    for bi, y in enumerate(range(0, h, block)):
        for bj, x in enumerate(range(0, w, block)):
            c = cur[y:y + block, x:x + block].astype(np.int64)
            best = None
            for dy, dx in order:
                r = pad[search + y + dy:search + y + dy + c.shape[0], search + x + dx:search + x + dx + c.shape[1]]
                cost = np.abs(c - r).sum()
                if best is None or cost < best[0]:
                    best = (cost, dy, dx)
            out[bi, bj] = best[1:]
    return out


def test_motion_estimate_matches_brute_force(rng):
    ref = rng.integers(0, 256, (24, 30))
    cur = np.roll(ref, (2, -3), axis=(0, 1)) + rng.integers(-3, 4, ref.shape)
    np.testing.assert_array_equal(motion_estimate(ref, cur).vectors, brute_force_sad(ref, cur))


def test_motion_estimate_finds_translation(rng):
    ref = rng.integers(0, 256, (40, 48))
    cur = np.roll(ref, (0, 1), axis=(0, 1))
    v = motion_estimate(ref, cur).vectors
    assert np.all(v[1:-1, 1:-1] == [0, -1])  # points at the matching reference pixels


def test_static_content_prefers_zero_vector():
    flat = np.full((16, 16), 9)
    assert not motion_estimate(flat, flat).vectors.any()


def test_compensation_conventions(rng):
    ref = rng.integers(0, 256, (16, 16))
    mf = MotionField(np.tile([[[1, -2]]], (2, 2, 1)))
    mc = motion_compensate(ref, mf)
    assert mc[5, 5] == ref[6, 3]
    imc = inverse_motion_compensate(ref, mf)
    assert imc[5, 5] == ref[4, 7]
    assert mc[15, 0] == ref[15, 0]  # clipped at the border


@pytest.mark.parametrize("update", [True, False])
def test_lift_pair_inverts_for_any_motion(update, rng):
    for _ in range(20):
        a, b = rng.integers(-300, 300, (2, 19, 21))
        mf = random_field(a.shape, rng)
        low, high = temporal_lift(a, b, mf, update)
        ea, eb = temporal_unlift(low, high, mf, update)
        np.testing.assert_array_equal(ea, a)
        np.testing.assert_array_equal(eb, b)


def test_gop_transform_exact_with_arbitrary_motion(rng):
    gop = list(rng.integers(0, 256, (8, 24, 32)))
    sub = mctf_forward(gop, estimator=lambda e, o: random_field(e.shape, rng))
    assert len(sub.frames()) == GOP_SIZE
    assert [len(h) for h in sub.highpass] == [4, 2, 1]
    for a, b in zip(mctf_inverse(sub), gop):
        np.testing.assert_array_equal(a, b)


def test_static_gop_has_zero_highpass(rng):
    frame = rng.integers(0, 256, (32, 32))
    sub = mctf_forward([frame] * GOP_SIZE)
    assert all(not h.any() for level in sub.highpass for h in level)
    np.testing.assert_array_equal(sub.lowpass, frame)


def test_gop_size_checks(rng):
    with pytest.raises(ValueError):
        mctf_forward([np.zeros((8, 8))] * 7)
    with pytest.raises(ValueError):
        mctf_forward([np.zeros((8, 8))] * 7 + [np.zeros((8, 16))])


def test_motion_field_validation():
    with pytest.raises(ValueError):
        MotionField(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        MotionField(np.full((1, 1, 2), SEARCH + 1))


def test_motion_packing_round_trip(rng):
    fields = [random_field((20, 36), rng) for _ in range(7)]
    data = pack_motion(fields)
    assert len(data) == -(-7 * 3 * 5 * 2 * 5 // 8)
    back = unpack_motion(data, 7, (3, 5))
    for a, b in zip(fields, back):
        np.testing.assert_array_equal(a.vectors, b.vectors)
    with pytest.raises(VideoError):
        unpack_motion(data[:-1], 7, (3, 5))


def moving_gop(rng, n=GOP_SIZE, shape=(32, 32)):
    base = rng.integers(0, 256, (shape[0] + n, shape[1] + 2 * n))
    return [base[i:i + shape[0], 2 * i:2 * i + shape[1]].astype(np.uint8) for i in range(n)]


def test_gop_coding_is_deterministic(rng):
    m = small_model()
    gop = moving_gop(rng)
    coded = encode_gop(gop, m, m)
    again = encode_gop(gop, m, m)
    assert coded.motion == again.motion and coded.streams == again.streams
    out = decode_gop(coded.motion, coded.streams, m, m, (32, 32))
    for a, b in zip(out, coded.reconstruction):
        np.testing.assert_array_equal(a, b)


def test_lossless_video_round_trip(rng):
    m = small_model(integer_lifting=True)
    frames = moving_gop(rng, n=11)
    video = encode_video(frames, m, m)
    assert video.frame_count == 11
    out = decode_video(video.bitstream, m, m)
    assert len(out) == 11
    for a, b in zip(out, frames):
        np.testing.assert_array_equal(a, b)


def test_video_stream_errors(rng):
    m = small_model()
    video = encode_video(moving_gop(rng, n=8, shape=(16, 16)), m, m)
    with pytest.raises(VideoError, match="magic"):
        decode_video(b"XXXX" + video.bitstream[4:], m, m)
    with pytest.raises(VideoError):
        decode_video(video.bitstream[:-5], m, m)
    with pytest.raises(VideoError, match="trailing"):
        decode_video(video.bitstream + b"\1", m, m)
    with pytest.raises(VideoError):
        encode_video([], m, m)


def test_video_io_round_trip(tmp_path, rng):
    frames = moving_gop(rng, n=3, shape=(8, 10))
    for name in ("clip.y4m", "frames"):
        write_video(tmp_path / name, frames)
        back = read_video(tmp_path / name)
        assert len(back) == 3
        for a, b in zip(back, frames):
            np.testing.assert_array_equal(a, b)
