from dataclasses import replace

import numpy as np
import pytest

from convdissect import micronet, pda
from convdissect.micronet import Architecture, ConvBlock

TOY = Architecture(in_channels=1, input_hw=16, channels=(1, 1))


def _toy_model(conv1_w=None):
    """K=2 single-channel net; block 1 kernel controllable, block 2 identity."""
    m = micronet.init_model(TOY, 2, seed=0)
    ident = np.zeros((1, 1, 3, 3), np.float32)
    ident[0, 0, 1, 1] = 1.0
    w1 = ident if conv1_w is None else conv1_w
    blocks = (
        ConvBlock(w=w1.astype(np.float32), b=np.zeros(1, np.float32)),
        ConvBlock(w=ident, b=np.zeros(1, np.float32)),
    )
    return replace(m, blocks=blocks)


def _gray_cfg(**kw):
    return pda.OcclusionConfig(replacement="fixed-gray", **kw)


def test_constant_image_with_matching_replacement_is_zero():
    model = micronet.init_model(Architecture(), 4, seed=1)
    image = np.full((3, 64, 64), 0.5, np.float32)
    cfg = _gray_cfg()
    sweep = pda.occlusion_sweep(model, image, cfg)
    for block in range(1, 5):
        maps = pda.maps_from_sweep(sweep, block)
        assert np.array_equal(maps, np.zeros_like(maps))
    assert np.array_equal(sweep.logit_deltas, np.zeros_like(sweep.logit_deltas))


def test_single_window_gives_uniform_map():
    model = micronet.init_model(Architecture(), 4, seed=2)
    rng = np.random.default_rng(0)
    image = rng.random((3, 64, 64), dtype=np.float32)
    cfg = _gray_cfg(window=64, stride=64)
    fm = pda.activation_difference_map(model, image, block=2, map_index=3, cfg=cfg)
    assert len(np.unique(fm.values)) == 1
    baseline = np.full_like(image, 0.5)
    agg_img, _ = micronet.forward_aggregates(model, image[None])
    agg_base, _ = micronet.forward_aggregates(model, baseline[None])
    want = float(agg_img[1][0, 3] - agg_base[1][0, 3])
    assert abs(float(fm.values[0, 0]) - want) < 1e-6


def test_receptive_field_locality_exact_zero():
    # ones kernel, bright 3x3 blob near the origin, max aggregation: occluding
    # tiles that cannot touch the peak unit's receptive field or overtake the
    # max must change nothing, exactly.
    model = _toy_model(conv1_w=np.ones((1, 1, 3, 3), np.float32))
    image = np.zeros((1, 16, 16), np.float32)
    image[0, 1:4, 1:4] = 1.0
    cfg = _gray_cfg(window=4, stride=4, aggregation="spatial-max")
    fm = pda.activation_difference_map(model, image, block=1, map_index=0, cfg=cfg)
    assert np.array_equal(fm.values[8:, :], np.zeros((8, 16), np.float32))
    assert np.array_equal(fm.values[:, 8:], np.zeros((16, 8), np.float32))
    assert fm.values[1, 1] > 0  # occluding the blob lowers the peak


def test_all_maps_counts_and_consistency():
    model = micronet.init_model(Architecture(), 4, seed=3)
    rng = np.random.default_rng(1)
    image = rng.random((3, 64, 64), dtype=np.float32)
    cfg = _gray_cfg()
    maps = pda.all_maps(model, image, block=1, cfg=cfg)
    assert len(maps) == 8
    for m_idx in (0, 5):
        single = pda.activation_difference_map(model, image, 1, m_idx, cfg)
        assert np.array_equal(single.values, maps[m_idx].values)
        assert single.map_index == m_idx


def test_sweep_is_deterministic():
    model = micronet.init_model(Architecture(), 4, seed=4)
    image = np.random.default_rng(2).random((3, 64, 64), dtype=np.float32)
    cfg = pda.OcclusionConfig(channel_means=(0.4, 0.5, 0.6))
    a = pda.occlusion_sweep(model, image, cfg)
    b = pda.occlusion_sweep(model, image, cfg)
    for x, y in zip(a.block_deltas, b.block_deltas):
        assert x.tobytes() == y.tobytes()
    assert a.logit_deltas.tobytes() == b.logit_deltas.tobytes()


def test_pass_count_shared_across_channels_and_blocks(monkeypatch):
    counted = {"images": 0}
    real = micronet.forward_aggregates

    def counting(model, x, how="spatial-mean"):
        counted["images"] += x.shape[0]
        return real(model, x, how)

    monkeypatch.setattr(micronet, "forward_aggregates", counting)
    model = micronet.init_model(Architecture(), 4, seed=5)
    image = np.random.default_rng(3).random((3, 64, 64), dtype=np.float32)
    cfg = _gray_cfg()
    n_windows = len(pda.window_grid(64, cfg.window, cfg.stride))
    sweep = pda.occlusion_sweep(model, image, cfg)
    assert counted["images"] <= n_windows + 1
    assert sweep.forward_passes == n_windows + 1
    # every channel of every block comes from that one sweep
    total_maps = sum(pda.maps_from_sweep(sweep, b).shape[0] for b in range(1, 5))
    assert total_maps == 8 + 16 + 32 + 64


def test_prediction_difference_zero_and_uniform_cases():
    model = micronet.init_model(Architecture(), 3, seed=6)
    constant = np.full((3, 64, 64), 0.5, np.float32)
    fm = pda.prediction_difference(model, constant, class_id=1, cfg=_gray_cfg())
    assert np.array_equal(fm.values, np.zeros_like(fm.values))

    rng = np.random.default_rng(4)
    image = rng.random((3, 64, 64), dtype=np.float32)
    cfg = _gray_cfg(window=64, stride=64)
    fm = pda.prediction_difference(model, image, class_id=2, cfg=cfg)
    _, logits_img = micronet.forward_aggregates(model, image[None])
    _, logits_base = micronet.forward_aggregates(model, np.full_like(image, 0.5)[None])
    want = float(logits_img[0, 2] - logits_base[0, 2])
    assert len(np.unique(fm.values)) == 1
    assert abs(float(fm.values[0, 0]) - want) < 1e-6


def test_prediction_difference_matches_manual_sweep_oracle():
    """Brute-force oracle: replay the occlusion protocol with direct forwards."""
    model = _toy_model()
    rng = np.random.default_rng(5)
    image = rng.random((1, 16, 16), dtype=np.float32)
    cfg = _gray_cfg(window=8, stride=8)
    got = pda.prediction_difference(model, image, class_id=0, cfg=cfg)

    base = micronet.forward(model, image).logits[0]
    acc = np.zeros((16, 16))
    cnt = np.zeros((16, 16))
    for r in (0, 8):
        for c in (0, 8):
            occluded = image.copy()
            occluded[:, r : r + 8, c : c + 8] = 0.5
            delta = base - micronet.forward(model, occluded).logits[0]
            acc[r : r + 8, c : c + 8] += delta
            cnt[r : r + 8, c : c + 8] += 1
    want = acc / cnt
    assert np.allclose(got.values, want, atol=1e-6)


def test_activation_map_matches_manual_sweep_oracle():
    model = _toy_model()
    rng = np.random.default_rng(6)
    image = rng.random((1, 16, 16), dtype=np.float32)
    cfg = _gray_cfg(window=8, stride=4)
    got = pda.activation_difference_map(model, image, block=2, map_index=0, cfg=cfg)

    def agg(img):
        return float(micronet.forward(model, img).block_maps[1][0].mean())

    base = agg(image)
    acc = np.zeros((16, 16))
    cnt = np.zeros((16, 16))
    for r in (0, 4, 8):
        for c in (0, 4, 8):
            occluded = image.copy()
            occluded[:, r : r + 8, c : c + 8] = 0.5
            acc[r : r + 8, c : c + 8] += base - agg(occluded)
            cnt[r : r + 8, c : c + 8] += 1
    assert np.allclose(got.values, acc / cnt, atol=1e-6)


def test_config_validation():
    model = micronet.init_model(TOY, 2, seed=0)
    image = np.zeros((1, 16, 16), np.float32)
    with pytest.raises(ValueError, match="window"):
        pda.occlusion_sweep(model, image, _gray_cfg(window=2, stride=4))
    with pytest.raises(ValueError, match="window"):
        pda.occlusion_sweep(model, image, _gray_cfg(window=32, stride=4))
    with pytest.raises(ValueError, match="means"):
        pda.occlusion_sweep(model, image, pda.OcclusionConfig())
    with pytest.raises(ValueError, match="block"):
        pda.activation_difference_map(model, image, 3, 0, _gray_cfg(window=4))
    with pytest.raises(ValueError, match="map"):
        pda.activation_difference_map(model, image, 1, 1, _gray_cfg(window=4))
    with pytest.raises(ValueError, match="class"):
        pda.prediction_difference(model, image, 2, _gray_cfg(window=4))


def test_binarize_positive_policy():
    fm = np.array([[-1.0, 0.0, 2.0]], np.float32)
    assert pda.binarize(fm).tolist() == [[0, 0, 1]]
    assert pda.binarize(np.full((3, 3), -0.5, np.float32)).sum() == 0


def test_binarize_top_quantile_exact_count_and_ties():
    rng = np.random.default_rng(7)
    values = rng.choice([0.0, 0.5, 1.0, 2.0], size=(64, 64)).astype(np.float32)
    mask = pda.binarize(values, "top-quantile", q=0.25)
    assert int(mask.sum()) == 1024
    flat = values.reshape(-1)
    order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
    want = np.zeros(flat.size, np.uint8)
    want[order[:1024]] = 1
    assert np.array_equal(mask.reshape(-1), want)


def test_binarize_quantile_validation():
    with pytest.raises(ValueError, match="quantile"):
        pda.binarize(np.zeros((2, 2), np.float32), "top-quantile", q=0.0)
    with pytest.raises(ValueError, match="quantile"):
        pda.binarize(np.zeros((2, 2), np.float32), "top-quantile", q=1.5)


def test_export_image_maps_roundtrip(tmp_path):
    from convdissect import tensorio

    model = _toy_model()
    image = np.random.default_rng(8).random((1, 16, 16), dtype=np.float32)
    cfg = _gray_cfg(window=4, stride=4)
    sweep = pda.occlusion_sweep(model, image, cfg)
    gt = np.zeros((16, 16), np.uint8)
    gt[2:6, 2:6] = 1
    out = pda.export_image_maps(tmp_path, "toy", "img-0", sweep, gt=gt)
    td = tensorio.TensorDir(out)
    assert "fm/toy/1/0" in td and "fm/toy/2/0" in td and "gt/img-0" in td
    assert np.array_equal(td.read("fm/toy/1/0"), pda.maps_from_sweep(sweep, 1)[0])
    assert np.array_equal(td.read("gt/img-0"), gt)
