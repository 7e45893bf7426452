import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from oracles import select_scan
from styleinv import layers as L
from styleinv.params import Bound, ModelParams
from styleinv.phantoms import generate_phantoms, stack_cases
from styleinv.style import (
    EmptyLibraryError,
    STConfig,
    StyleDescriptor,
    StyleLibrary,
    build_st,
    build_style_library,
    decode,
    describe,
    encode,
    finetune_reconstruction,
    fuse_multiscale,
    psnr,
    rank_cases,
    select_style,
    stylize,
    stylize_dataset,
    stylize_tensor,
)
from styleinv.tensor import Tensor, gradcheck, square, tsum
from styleinv.wavelet import haar_pool


def _slices(vendor, n_cases=2, per=4, seed=5):
    return stack_cases(generate_phantoms(n_cases, per, (64, 64), vendor, seed))


@pytest.fixture(scope="module")
def trained():
    """A small reconstruction-trained network shared by the behavioural tests."""
    xa, _ = _slices("A", 4, 4, seed=11)
    xb, _ = _slices("B", 4, 4, seed=12)
    params, _ = finetune_reconstruction(np.concatenate([xa, xb]), STConfig(base_channels=8, iterations=300, lr=2e-3))
    return params


# ---------------------------------------------------------------------------
# encoder / fusion / decoder


def test_encode_two_level_shapes():
    P = Bound(build_st(STConfig()))
    enc = encode(Tensor(np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)), P)
    assert enc.deep.shape == (2, 32, 16, 16)
    assert [b.lh.shape[2:] for b in enc.skips] == [(32, 32), (16, 16)]
    assert [f.shape for f in enc.stage_features] == [(2, 16, 64, 64), (2, 32, 32, 32)]


def test_encode_zero_input_gives_zero_features():
    P = Bound(build_st(STConfig(base_channels=4)))
    enc = encode(Tensor(np.zeros((1, 1, 32, 32), np.float32)), P)
    assert not enc.deep.data.any()
    for b in enc.skips:
        assert not (b.ll.data.any() or b.lh.data.any() or b.hl.data.any() or b.hh.data.any())


def test_raw_wavelet_split_of_constant_image_has_zero_details():
    bands = haar_pool(Tensor(np.full((1, 1, 16, 16), 0.37)))
    for band in (bands.lh, bands.hl, bands.hh):
        assert np.abs(band.data).max() < 1e-15
    assert_allclose(bands.ll.data, 0.74)


def test_encode_rejects_indivisible_input():
    with pytest.raises(ValueError):
        encode(Tensor(np.zeros((1, 1, 30, 30))), Bound(build_st(STConfig(base_channels=2))))


def test_fuse_single_level_is_the_stage_conv():
    params = build_st(STConfig(levels=1, base_channels=4, seed=2))
    P = Bound(params)
    f = Tensor(np.random.default_rng(1).standard_normal((1, 4, 8, 8)))
    expected = L.relu(L.conv2d(f, P.conv("fusion", padding=0)))
    assert_allclose(fuse_multiscale([f], P).data, expected.data)


@pytest.mark.parametrize("levels", [2, 3])
def test_fuse_identity_weights_scale_by_stage_count(levels):
    c = 3
    eye = np.eye(c)[:, :, None, None]
    params = ModelParams("st", {"fusion.weight": np.concatenate([eye] * levels, axis=1), "fusion.bias": np.zeros(c)})
    per_channel = np.array([0.5, 1.25, 2.0])[None, :, None, None]
    feats = [Tensor(np.broadcast_to(per_channel, (1, c, 4 * 2**k, 4 * 2**k)).copy()) for k in range(levels - 1, -1, -1)]
    out = fuse_multiscale(feats, Bound(params))
    assert out.shape == (1, c, 4, 4)
    assert_allclose(out.data, levels * feats[-1].data)


def test_fuse_rejects_irreducible_resolution():
    params = ModelParams("st", {"fusion.weight": np.ones((1, 2, 1, 1)), "fusion.bias": np.zeros(1)})
    with pytest.raises(ValueError):
        fuse_multiscale([Tensor(np.ones((1, 1, 10, 10))), Tensor(np.ones((1, 1, 4, 4)))], Bound(params))


def test_fused_resolution_equals_deepest_for_any_level_count():
    for levels in (1, 2, 3):
        P = Bound(build_st(STConfig(levels=levels, base_channels=2)))
        enc = encode(Tensor(np.random.default_rng(levels).random((1, 1, 32, 32))), P)
        assert enc.deep.shape[2:] == (32 >> levels, 32 >> levels)
        assert decode(enc.deep, enc.skips, P).shape == (1, 1, 32, 32)


# ---------------------------------------------------------------------------
# stylize


def test_stylize_zero_content_and_style_gives_zero():
    out = stylize(np.zeros((32, 32)), np.zeros((32, 32)), build_st(STConfig(base_channels=4)))
    assert out.shape == (32, 32)
    assert not out.any()


def test_stylize_shape_and_range():
    rng = np.random.default_rng(3)
    out = stylize(rng.random((3, 32, 32)), rng.random((32, 32)), build_st(STConfig(base_channels=4)))
    assert out.shape == (3, 32, 32)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_stylize_shape_mismatch():
    P = Bound(build_st(STConfig(base_channels=2)))
    with pytest.raises(ValueError):
        stylize_tensor(Tensor(np.zeros((1, 1, 16, 16))), Tensor(np.zeros((1, 1, 32, 32))), P)
    with pytest.raises(ValueError):
        stylize(np.zeros((3, 16, 16)), np.zeros((2, 16, 16)), build_st(STConfig(base_channels=2)))


def test_self_styling_matches_cross_path_with_same_image():
    # the self-style shortcut must agree with encoding the style separately
    params = build_st(STConfig(base_channels=4, seed=7))
    x = np.random.default_rng(2).random((1, 1, 32, 32))
    t = Tensor(x)
    same = stylize_tensor(t, t, Bound(params)).data
    cross = stylize_tensor(Tensor(x), Tensor(x.copy()), Bound(params)).data
    assert_allclose(same, cross, atol=1e-4)


def test_self_style_reconstruction(trained):
    x, _ = _slices("A", 1, 4, seed=99)
    assert psnr(stylize(x, x, trained), x) > 30.0


def test_statistics_shift_towards_style(trained):
    content, _ = _slices("D", 2, 2, seed=21)
    style, _ = _slices("A", 2, 2, seed=22)
    for c, s in zip(content, style):
        out = stylize(c, s, trained)
        assert abs(out.mean() - s.mean()) < abs(c.mean() - s.mean())
        assert abs(out.std() - s.std()) < abs(c.std() - s.std())


def _edges(img):
    gy, gx = np.gradient(np.asarray(img, np.float64))
    return np.hypot(gx, gy).ravel()


def test_output_edges_follow_content(trained):
    content, _ = _slices("D", 2, 2, seed=31)
    style, _ = _slices("A", 2, 2, seed=32)
    for c, s in zip(content, style):
        e = _edges(stylize(c, s, trained))
        assert np.corrcoef(e, _edges(c))[0, 1] > np.corrcoef(e, _edges(s))[0, 1]


@pytest.mark.parametrize("self_style", [True, False])
def test_stylize_gradcheck_toy(self_style):
    params = build_st(STConfig(base_channels=2, seed=4)).astype(np.float64)
    rng = np.random.default_rng(8)
    # keep outputs inside the clip range so the loss is smooth
    x = 0.4 + 0.2 * rng.random((1, 1, 8, 8))
    s = 0.4 + 0.2 * rng.random((1, 1, 8, 8))
    names = ["enc0.conv0.weight", "enc1.conv1.bias", "fusion.weight", "dec0.in1.gamma", "head.weight"]

    def fn(xt, st_, *tensors):
        P = Bound(params)
        P.tensors.update(dict(zip(names, tensors)))
        out = stylize_tensor(xt, xt if self_style else st_, P)
        return tsum(square(out - xt))

    assert gradcheck(fn, [x, s] + [params[n] for n in names]) < 1e-4


# ---------------------------------------------------------------------------
# fine-tuning


def test_finetune_descends_in_windows():
    x, _ = _slices("A", 2, 4)
    _, losses = finetune_reconstruction(x, STConfig(base_channels=8, iterations=100, lr=2e-3))
    windows = np.asarray(losses).reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_finetune_is_deterministic():
    x, _ = _slices("B", 1, 4)
    cfg = STConfig(base_channels=4, iterations=5, seed=3)
    a, la = finetune_reconstruction(x, cfg)
    b, lb = finetune_reconstruction(x, cfg)
    assert la == lb
    for k in a.names():
        np.testing.assert_array_equal(a[k], b[k])


def test_finetune_errors():
    with pytest.raises(ValueError):
        finetune_reconstruction(np.zeros((0, 16, 16)), STConfig(base_channels=2, iterations=1))
    with pytest.raises(ValueError):
        build_st(STConfig(levels=0))


# ---------------------------------------------------------------------------
# style library and selection


def _library(pairs):
    lib = StyleLibrary()
    for i, (m, s) in enumerate(pairs):
        lib.slices.append(np.full((2, 2), float(i), np.float32))
        lib.descriptors.append(StyleDescriptor(m, s, i))
    return lib


def _image_with(mean, std):
    # half the pixels at mean - std, half at mean + std
    return np.array([[mean - std, mean + std], [mean + std, mean - std]])


def test_select_hand_example():
    lib = _library([(0.3, 0.1), (0.8, 0.4)])
    _, d = select_style(_image_with(0.35, 0.12), lib)
    assert d.source_id == 0


def test_select_finds_itself():
    lib = StyleLibrary()
    rng = np.random.default_rng(4)
    imgs = [rng.random((8, 8)) * (k + 1) / 5 for k in range(5)]
    for im in imgs:
        lib.add(im)
    for k, im in enumerate(imgs):
        sl, d = select_style(im, lib)
        assert d.source_id == k
        np.testing.assert_array_equal(sl, im.astype(np.float32))


def test_select_ties_go_to_lowest_id():
    lib = _library([(0.5, 0.2), (0.1, 0.0), (0.5, 0.2)])
    assert select_style(_image_with(0.5, 0.2), lib)[1].source_id == 0


@given(st.integers(0, 2**31 - 1))
def test_select_matches_scan_oracle(seed):
    rng = np.random.default_rng(seed)
    pairs = [(float(m), float(s)) for m, s in rng.random((50, 2)).round(2)]
    lib = _library(pairs)
    m, s = rng.random(2)
    img = _image_with(m, s)
    t = describe(img)
    expected = select_scan(t.mean, t.std, [(pm, ps, i) for i, (pm, ps) in enumerate(pairs)])
    assert select_style(img, lib)[1].source_id == expected


def test_select_is_permutation_invariant():
    rng = np.random.default_rng(6)
    pairs = [tuple(p) for p in rng.random((20, 2))]
    img = _image_with(0.4, 0.2)
    picked = select_style(img, _library(pairs))[1]
    perm = rng.permutation(20)
    shuffled = select_style(img, _library([pairs[i] for i in perm]))[1]
    assert (shuffled.mean, shuffled.std) == (picked.mean, picked.std)


def test_select_empty_library():
    with pytest.raises(EmptyLibraryError):
        select_style(np.zeros((4, 4)), StyleLibrary())


def test_descriptor_over_whole_slice():
    img = np.zeros((4, 4))
    img[0, 0] = 1.0
    d = describe(img)
    assert d.mean == 1 / 16
    assert_allclose(d.std, np.sqrt(1 / 16 - 1 / 256))
    assert d.std >= 0


def test_rank_cases_matches_sort():
    scores = [0.3, 0.9, 0.5, 0.9, 0.1]
    expected = [i for _, i in sorted((-s, i) for i, s in enumerate(scores))]
    assert rank_cases(scores) == expected == [1, 3, 2, 0, 4]


def _training_cases():
    cases = generate_phantoms(6, 3, (32, 32), "A", 2)
    images = [c.images for c in cases]
    gts = [c.labels for c in cases]
    preds = [g.copy() for g in gts]
    # degrade predictions by increasing amounts so the ranking is known
    for k, p in enumerate(preds):
        p[:, : 4 * k] = 0
    return images, preds, gts


def test_library_top_k_all_contains_every_slice():
    images, preds, gts = _training_cases()
    lib = build_style_library(images, preds, gts, top_k=len(images))
    assert len(lib) == sum(len(i) for i in images)


def test_library_keeps_best_cases_and_consistent_descriptors():
    images, preds, gts = _training_cases()
    lib = build_style_library(images, preds, gts, top_k=2)
    assert len(lib) == 6
    assert [d.name for d in lib.descriptors[:4:3]] == ["case000_s00", "case001_s00"]
    for sl, d in zip(lib.slices, lib.descriptors):
        r = describe(sl)
        assert abs(r.mean - d.mean) < 1e-6 and abs(r.std - d.std) < 1e-6
    assert [d.source_id for d in lib.descriptors] == list(range(6))


def test_library_errors():
    images, preds, gts = _training_cases()
    with pytest.raises(ValueError):
        build_style_library(images, preds, gts, top_k=7)
    with pytest.raises(ValueError):
        build_style_library(images, preds[:-1], gts, top_k=1)


# ---------------------------------------------------------------------------
# stylize_dataset


def test_stylize_dataset_reduces_statistic_spread(trained):
    mixed = np.concatenate([_slices(v, 1, 3, seed=40)[0] for v in "ABCD"])
    style = _slices("A", 1, 1, seed=41)[0][0]
    out = stylize_dataset(mixed, style, trained)
    assert out.shape == mixed.shape
    assert out.mean(axis=(1, 2)).var() < mixed.mean(axis=(1, 2)).var()
    assert out.std(axis=(1, 2)).var() < mixed.std(axis=(1, 2)).var()


def test_stylize_dataset_style_slice_maps_to_itself(trained):
    data, _ = _slices("A", 1, 4, seed=50)
    out = stylize_dataset(data, data[2], trained)
    assert psnr(out[2], data[2]) > 30.0
