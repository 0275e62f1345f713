import math

import numpy as np
import pytest

from convdissect import shapeworld
from convdissect.shapeworld import CLASSES, IMAGE_HW


def test_same_seed_bit_identical():
    a = shapeworld.gen_dataset(7, 10)
    b = shapeworld.gen_dataset(7, 10)
    for x, y in zip(a, b):
        assert x.sid == y.sid and x.label == y.label
        assert x.image.tobytes() == y.image.tobytes()
        assert x.seg.tobytes() == y.seg.tobytes()
    c = shapeworld.gen_dataset(8, 10)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_dataset_size_and_labels():
    samples = shapeworld.gen_dataset(3, 200)
    assert len(samples) == 1200
    counts = {}
    for s in samples:
        counts[s.label] = counts.get(s.label, 0) + 1
    assert counts == {i: 200 for i in range(6)}


def test_per_class_minimum():
    with pytest.raises(ValueError, match="per_class"):
        shapeworld.gen_dataset(1, 9)


def test_foreground_pixel_bounds():
    for s in shapeworld.gen_dataset(11, 15):
        count = int(s.seg.sum())
        assert shapeworld.MIN_FOREGROUND <= count <= shapeworld.MAX_FOREGROUND


def test_circle_pixel_count_brackets_area():
    for idx in range(30):
        rng = np.random.default_rng([5, 0, idx])
        params = shapeworld.draw_params(rng)
        seg = shapeworld.rasterize("circle", params)
        r = params.size / 2
        count = int(seg.sum())
        assert math.pi * (r - 1) ** 2 <= count <= math.pi * (r + 1) ** 2


def test_seg_matches_rendered_shape_exactly():
    for s in shapeworld.gen_dataset(2, 10)[::7]:
        fg = np.array(
            [
                int(np.unique(s.image[c][s.seg.astype(bool)]))
                for c in range(3)
            ]
        )
        assert fg.min() >= shapeworld.FG_MIN  # solid foreground color covers seg


# independent scalar re-rasterization at double resolution, coverage >= 0.5


def _inside_scalar(name, p, x, y):
    s, cy, cx = p.size, p.cy, p.cx
    half = s / 2
    dx, dy = x - cx, y - cy
    if name == "circle":
        return dx * dx + dy * dy <= half * half
    if name == "square":
        return abs(dx) <= half and abs(dy) <= half
    if name == "triangle":
        ax, ay = cx, cy - half
        bx, by = cx - half, cy + half
        qx, qy = cx + half, cy + half
        d1 = (x - bx) * (ay - by) - (y - by) * (ax - bx)
        d2 = (x - qx) * (by - qy) - (y - qy) * (bx - qx)
        d3 = (x - ax) * (qy - ay) - (y - ay) * (qx - ax)
        return (d1 <= 0 and d2 <= 0 and d3 <= 0) or (d1 >= 0 and d2 >= 0 and d3 >= 0)
    if name == "cross":
        arm = s / 6
        return (abs(dx) <= half and abs(dy) <= arm) or (abs(dy) <= half and abs(dx) <= arm)
    if name == "ring":
        rr = dx * dx + dy * dy
        return (0.55 * half) ** 2 <= rr <= half * half
    if name == "star":
        verts = []
        for k in range(10):
            ang = -math.pi / 2 + k * math.pi / 5
            rad = half if k % 2 == 0 else half / 2
            verts.append((cx + rad * math.cos(ang), cy + rad * math.sin(ang)))
        inside = False
        for i in range(10):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % 10]
            if (y1 > y) != (y2 > y):
                xint = (x2 - x1) * (y - y1) / (y2 - y1) + x1
                if x < xint:
                    inside = not inside
        return inside
    raise AssertionError(name)


def _loop_rasterize(name, p):
    seg = np.zeros((IMAGE_HW, IMAGE_HW), np.uint8)
    for i in range(IMAGE_HW):
        for j in range(IMAGE_HW):
            hits = sum(
                _inside_scalar(name, p, j + ox, i + oy)
                for oy in (0.25, 0.75)
                for ox in (0.25, 0.75)
            )
            seg[i, j] = 1 if hits >= 2 else 0
    return seg


@pytest.mark.parametrize("label", range(6))
def test_rasterization_matches_double_resolution_oracle(label):
    name = CLASSES[label]
    for idx in (0, 1, 2):
        rng = np.random.default_rng([123, label, idx])
        params = shapeworld.draw_params(rng)
        got = shapeworld.rasterize(name, params)
        want = _loop_rasterize(name, params)
        assert np.array_equal(got, want), f"{name} idx {idx}"


def test_make_stream_shapes():
    samples = shapeworld.gen_dataset(1, 20)
    stream = shapeworld.make_stream(samples, 4, [1, 1])
    assert [len(t.classes) for t in stream.tasks] == [4, 1, 1]
    single = shapeworld.make_stream(samples, 6, [])
    assert len(single.tasks) == 1 and len(single.tasks[0].classes) == 6


def test_make_stream_disjoint_random_configs():
    samples = shapeworld.gen_dataset(1, 12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        base = int(rng.integers(1, 5))
        rest = []
        budget = 6 - base
        while budget > 0 and rng.random() < 0.7:
            size = int(rng.integers(1, budget + 1))
            rest.append(size)
            budget -= size
        stream = shapeworld.make_stream(samples, base, rest)
        seen = set()
        for task in stream.tasks:
            assert not (seen & set(task.classes))
            seen.update(task.classes)


def test_make_stream_oversubscription():
    samples = shapeworld.gen_dataset(1, 10)
    with pytest.raises(ValueError, match="classes"):
        shapeworld.make_stream(samples, 4, [2, 1])


def test_stream_split_sizes():
    samples = shapeworld.gen_dataset(1, 20)
    stream = shapeworld.make_stream(samples, 4, [1, 1], train_frac=0.75)
    task = stream.tasks[0]
    assert len(task.train) == 4 * 15 and len(task.test) == 4 * 5
    train_ids = {s.sid for s in task.train}
    assert not train_ids & {s.sid for s in task.test}


def test_sample_set_balanced():
    samples = shapeworld.gen_dataset(1, 20)
    stream = shapeworld.make_stream(samples, 4, [1, 1])
    picked = shapeworld.sample_set(stream.tasks[0], 20)
    assert len(picked) == 20
    labels = [s.label for s in picked]
    assert all(labels.count(lb) == 5 for lb in range(4))


def test_save_load_roundtrip(tmp_path):
    samples = shapeworld.gen_dataset(9, 10)
    shapeworld.save_dataset(samples, tmp_path)
    back = shapeworld.load_dataset(tmp_path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.sid == b.sid and a.label == b.label
        assert a.image.tobytes() == b.image.tobytes()
        assert a.seg.tobytes() == b.seg.tobytes()


def test_channel_means_range():
    samples = shapeworld.gen_dataset(1, 10)
    means = shapeworld.channel_means(samples)
    assert len(means) == 3 and all(0.0 < m < 1.0 for m in means)
