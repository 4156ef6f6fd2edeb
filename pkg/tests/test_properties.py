"""Randomized property tests complementing the oracle-frozen suites."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloudseg import raster
from cloudseg.evaluate import ConfusionCounts, metrics_from_confusion, tukey_summary
from cloudseg.infer import binarize
from cloudseg.postproc import closing, dilate, erode, opening

dtypes = st.sampled_from([np.uint8, np.uint16, np.float32])
small_shape = st.lists(st.integers(1, 6), min_size=1, max_size=4).map(tuple)


@st.composite
def tensors(draw):
    dtype = draw(dtypes)
    shape = draw(small_shape)
    if dtype == np.float32:
        return draw(arrays(dtype, shape,
                           elements=st.floats(-1e6, 1e6, width=32)))
    return draw(arrays(dtype, shape))


@given(tensors())
@settings(max_examples=60, deadline=None)
def test_cseg_round_trip_is_identity(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("cseg") / "t.cseg"
    raster.save_tensor(arr, path)
    back = raster.load_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


@given(
    h=st.integers(16, 80), w=st.integers(16, 80),
    ph=st.integers(8, 40), pw=st.integers(8, 40),
    overlap=st.sampled_from([0.0, 0.25, 0.5, 0.75]),
)
@settings(max_examples=80, deadline=None)
def test_split_covers_every_pixel(h, w, ph, pw, overlap):
    ph, pw = min(ph, h), min(pw, w)
    scene = raster.MultiBandPatch(np.zeros((1, h, w), dtype=np.float32))
    patches, grid = raster.split_scene(scene, (ph, pw), overlap)
    covered = np.zeros((h, w), dtype=bool)
    for r, c in grid.offsets:
        assert 0 <= r <= h - ph and 0 <= c <= w - pw
        covered[r : r + ph, c : c + pw] = True
    assert covered.all()
    assert len(patches) == len(grid.offsets)


masks = arrays(np.uint8, (7, 7), elements=st.integers(0, 1))


@given(masks)
@settings(max_examples=100, deadline=None)
def test_morphology_monotone_and_idempotent(mask):
    assert np.all(erode(mask) <= mask)
    assert np.all(mask <= dilate(mask))
    o = opening(mask)
    assert np.all(o <= mask)
    assert np.array_equal(opening(o), o)
    c = closing(mask)
    assert np.array_equal(closing(c), c)


@given(st.tuples(st.integers(0, 50), st.integers(0, 50),
                 st.integers(0, 50), st.integers(0, 50)))
def test_metrics_bounded_when_defined(counts):
    m = metrics_from_confusion(ConfusionCounts(*counts))
    for v in m.to_dict().values():
        if v is not None:
            assert 0.0 <= v <= 1.0


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40))
def test_tukey_summary_brackets_the_sample(values):
    s = tukey_summary(values)
    assert min(values) <= s.q1 <= s.median <= s.q3 <= max(values)
    assert len(s.outliers) < len(values)  # fences always keep the bulk


@given(
    arrays(np.float32, (5, 5), elements=st.floats(0, 1, width=32)),
    st.floats(0.01, 0.99),
)
def test_binarize_threshold_monotone(prob, tau):
    out = binarize(prob, tau)
    assert set(np.unique(out)) <= {0, 1}
    stricter = binarize(prob, min(0.99, tau + 0.005))
    assert np.all(stricter <= out)
