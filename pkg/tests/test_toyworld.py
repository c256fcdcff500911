import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xattn import toyworld as tw


def spec(**kw):
    base = dict(shape="circle", color="red", motion="left_to_right", start_position=(0.2, 0.5), size=0.15)
    base.update(kw)
    return tw.SceneSpec(**base)


def area_centroid(frame):
    """Centroid (x, y) in normalised units of the non-background mass."""
    mass = (frame.max(axis=0) + 1.0) / 2.0
    h, w = mass.shape
    ys, xs = np.mgrid[0:h, 0:w]
    total = mass.sum()
    return np.array([((xs + 0.5) * mass).sum() / total / w, ((ys + 0.5) * mass).sum() / total / h])


# ----------------------------------------------------------------- render
def test_static_frames_identical():
    v = tw.render(spec(motion="static"), 6, 32, 32)
    assert all(np.array_equal(v.frames[0], fr) for fr in v.frames)


def test_render_deterministic():
    a, b = tw.render(spec(), 8, 32, 32), tw.render(spec(), 8, 32, 32)
    assert np.array_equal(a.frames, b.frames) and a.token_ids == b.token_ids


def test_left_to_right_centroid_increases():
    v = tw.render(spec(), 8, 32, 32)
    xs = [area_centroid(fr)[0] for fr in v.frames]
    assert all(b > a for a, b in zip(xs, xs[1:]))


@pytest.mark.parametrize("shape", tw.SHAPES)
@pytest.mark.parametrize("motion", tw.MOTIONS)
def test_centroid_tracks_analytic_path_within_a_pixel(shape, motion):
    s = spec(shape=shape, motion=motion, color="white", start_position=(0.3, 0.25), size=0.18)
    v = tw.render(s, 8, 32, 32)
    measured = np.array([area_centroid(fr) for fr in v.frames])
    assert np.abs(measured - s.centroid_path(8)).max() * 32 <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(tw.SHAPES), st.sampled_from(tw.MOTIONS),
       st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 0.3))
def test_object_stays_inside_frame(shape, motion, x, y, size):
    s = spec(shape=shape, motion=motion, start_position=(x, y), size=size, color="white")
    frames = tw.render(s, 8, 32, 32).frames
    assert frames.min() >= -1 and frames.max() <= 1
    c = s.centers(8)
    assert np.all(c - size >= -1e-12) and np.all(c + size <= 1 + 1e-12)
    # same pixel grid on a canvas padded by half a frame each side: no mass may be lost
    covered = ((frames[:, 0] + 1) / 2).sum(axis=(1, 2))
    for i, (cx, cy) in enumerate(c):
        padded = tw.coverage(shape, (cx + 0.5) / 2, (cy + 0.5) / 2, size / 2, 64, 64)
        assert covered[i] == pytest.approx(padded.sum(), rel=1e-5)


def test_caption_template_and_tokens():
    v = tw.render(spec(), 2, 8, 8)
    assert tw.detokenize(v.token_ids) == "red circle moves left to right"
    assert v.token_ids == [2, 6, 9, 12, 16, 13]


@pytest.mark.parametrize("bad", [dict(shape="star"), dict(color="pink"), dict(motion="spin"),
                                 dict(size=0.0), dict(size=0.5), dict(background_color="teal")])
def test_invalid_spec_rejected(bad):
    with pytest.raises(ValueError):
        spec(**bad)


# ---------------------------------------------------------------- dataset
def test_single_item_reproducible():
    a, b = tw.gen_dataset(1, 11, 4, 16, 16), tw.gen_dataset(1, 11, 4, 16, 16)
    assert np.array_equal(a[0].frames, b[0].frames) and a[0].scene_spec == b[0].scene_spec


def test_disjoint_seeds_differ():
    assert tw.gen_specs(20, 1) != tw.gen_specs(20, 2)


def test_dataset_size_rejected():
    with pytest.raises(ValueError):
        tw.gen_specs(0, 0)


@pytest.mark.parametrize("factor, values", [("shape", tw.SHAPES), ("color", tw.COLORS), ("motion", tw.MOTIONS)])
def test_factor_marginals_uniform(factor, values):
    counts = collections.Counter(getattr(s, factor) for s in tw.gen_specs(1000, 0))
    expected = 1000 / len(values)
    chi2 = sum((counts[v] - expected) ** 2 / expected for v in values)
    # 99.9th percentile of chi-square with 2 and 3 degrees of freedom
    assert chi2 < {3: 13.8, 4: 16.3}[len(values)]


def test_manifest_round_trip(tmp_path):
    specs = tw.gen_specs(5, 3)
    path = tmp_path / "data.jsonl"
    tw.write_manifest(path, specs)
    assert tw.read_manifest(path) == specs
    assert len(path.read_text().splitlines()) == 5


# ------------------------------------------------------------- vocabulary
def test_vocab_reserves_pad_and_bos():
    assert tw.VOCAB[tw.PAD_ID] == "<pad>" and tw.VOCAB[tw.BOS_ID] == "<bos>"
    assert 20 <= len(tw.VOCAB) <= 30


def test_unknown_word_named():
    with pytest.raises(tw.VocabularyError, match="burger"):
        tw.tokenize("red burger")


@given(st.lists(st.integers(2, len(tw.VOCAB) - 1), max_size=8))
def test_token_round_trip(ids):
    assert tw.tokenize(tw.detokenize(ids)) == ids


# ----------------------------------------------------------------- latent
def test_latent_identity_at_full_resolution():
    fr = tw.render(spec(), 2, 16, 16).frames
    assert np.array_equal(tw.to_latent(fr, 16, 16), fr)
    np.testing.assert_array_equal(tw.from_latent(fr, 16, 16), fr)


def test_constant_video_constant_latent():
    fr = np.full((2, 3, 8, 8), 0.25, dtype=np.float32)
    np.testing.assert_array_equal(tw.to_latent(fr, 2, 2), 0.25)


def test_checkerboard_round_trip_matches_area_average():
    board = np.indices((8, 8)).sum(axis=0) % 2 * 2.0 - 1.0
    board[:2, :2] = 1.0
    lat = tw.to_latent(board, 4, 4)
    back = tw.from_latent(lat, 8, 8)
    for i in range(8):
        for j in range(8):
            bi, bj = i // 2 * 2, j // 2 * 2
            cell = [board[bi + a, bj + b] for a in range(2) for b in range(2)]
            assert back[i, j] == pytest.approx(sum(cell) / 4)


def test_from_latent_clamps():
    np.testing.assert_array_equal(tw.from_latent(np.array([[3.0, -2.0]]), 1, 2), [[1.0, -1.0]])


def test_latent_size_must_divide():
    with pytest.raises(ValueError):
        tw.to_latent(np.zeros((8, 8)), 3, 3)
