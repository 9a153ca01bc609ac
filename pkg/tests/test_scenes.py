import hashlib
from pathlib import Path

import numpy as np
import pytest

from slotmerge import scenes as sc
from slotmerge.errors import FormatError, SpecError

FIXTURE = Path(__file__).parent / "fixtures" / "scene_seed0_count1.bin"
FIXTURE_SHA256 = "d3079dac78451d9ab16f58c0da5aecdd174f9e84d20cdce06e45e2a688c17ee0"


def disk(cy, cx, r, H, W):
    # loop oracle: pixel centre inside the circle
    out = np.zeros((H, W), dtype=bool)
    for y in range(H):
        for x in range(W):
            out[y, x] = (y + 0.5 - cy) ** 2 + (x + 0.5 - cx) ** 2 <= r * r
    return out


class TestSpec:
    @pytest.mark.parametrize("changes", [
        {"canvas": (0, 8)},
        {"n_objects": (0, 2)},
        {"n_objects": (3, 2)},
        {"size": (5, 40)},
        {"shapes": ("hexagon",)},
        {"palette": ()},
        {"palette": ((1.2, 0.0, 0.0),)},
        {"min_visible": 0},
        {"background": sc.DEFAULT_PALETTE[0]},
    ])
    def test_invalid(self, changes):
        with pytest.raises(SpecError):
            sc.SceneSpec(**changes)

    def test_json_roundtrip(self):
        spec = sc.SceneSpec(canvas=(16, 24), n_objects=(1, 4), size=(3, 9), seed=5)
        assert sc.SceneSpec.from_json(spec.to_json()) == spec

    @pytest.mark.parametrize("text", ["not json", "[1, 2]", '{"sides": 3}', '{"canvas": "x"}'])
    def test_bad_json(self, text):
        with pytest.raises(SpecError):
            sc.SceneSpec.from_json(text)

    def test_unplaceable(self):
        spec = sc.SceneSpec(canvas=(8, 8), n_objects=(4, 4), size=(8, 8), min_visible=40, max_tries=5)
        with pytest.raises(SpecError):
            sc.generate(spec, 1)


class TestRasterize:
    def test_circle_matches_loop_oracle(self):
        np.testing.assert_array_equal(sc.rasterize("circle", 7.3, 9.1, 6.0, (16, 20)), disk(7.3, 9.1, 3.0, 16, 20))

    def test_square_is_a_box(self):
        m = sc.rasterize("square", 4.0, 4.0, 4.0, (8, 8))
        expect = np.zeros((8, 8), dtype=bool)
        expect[2:6, 2:6] = True
        np.testing.assert_array_equal(m, expect)

    def test_triangle_widens_downwards(self):
        m = sc.rasterize("triangle", 8.0, 8.0, 12.0, (16, 16))
        widths = m.sum(axis=1)
        rows = np.flatnonzero(widths)
        assert np.all(np.diff(widths[rows]) >= 0)
        assert widths[rows[-1]] > widths[rows[0]]

    def test_unknown_shape(self):
        with pytest.raises(SpecError):
            sc.rasterize("star", 1, 1, 1, (4, 4))


class TestRender:
    def test_occluding_pair(self):
        spec = sc.SceneSpec(canvas=(12, 12), size=(2, 8))
        back = disk(5.0, 5.0, 4.0, 12, 12)
        front = np.zeros((12, 12), dtype=bool)
        front[4:10, 6:12] = True
        red, blue = sc.DEFAULT_PALETTE[0], sc.DEFAULT_PALETTE[2]
        s = sc.render(spec, [("circle", back, red), ("square", front, blue)])
        # the front object is unbroken, the rear keeps its region minus the overlap
        np.testing.assert_array_equal(s.instance_masks == 2, front)
        np.testing.assert_array_equal(s.instance_masks == 1, back & ~front)
        np.testing.assert_array_equal(s.class_masks[front], sc.CLASS_IDS["square"])
        np.testing.assert_array_equal(s.class_masks[back & ~front], sc.CLASS_IDS["circle"])
        np.testing.assert_array_equal(s.image[front], np.broadcast_to(np.float32(blue), (front.sum(), 3)))
        np.testing.assert_array_equal(s.image[~(front | back)], 0.0)

    def test_fully_hidden_object_drops_out(self):
        spec = sc.SceneSpec(canvas=(8, 8), size=(2, 8))
        small = np.zeros((8, 8), dtype=bool)
        small[2:4, 2:4] = True
        big = np.zeros((8, 8), dtype=bool)
        big[1:6, 1:6] = True
        s = sc.render(spec, [("square", small, sc.DEFAULT_PALETTE[0]), ("circle", big, sc.DEFAULT_PALETTE[1])])
        assert s.n_objects == 1
        np.testing.assert_array_equal(s.instance_masks == 1, big)


class TestGenerate:
    def test_single_object_without_occlusion(self):
        spec = sc.SceneSpec(n_objects=(1, 1), allow_occlusion=False, seed=3)
        data = sc.generate(spec, 20)
        for k in range(20):
            assert set(np.unique(data.instances[k]).tolist()) == {0, 1}

    def test_deterministic(self):
        spec = sc.SceneSpec(seed=11, n_objects=(1, 4))
        a, b = sc.generate(spec, 8), sc.generate(spec, 8)
        assert sc.dumps(a) == sc.dumps(b)
        assert sc.dumps(a) != sc.dumps(sc.generate(sc.SceneSpec(seed=12, n_objects=(1, 4)), 8))

    def test_prefix_stable(self):
        # sample k depends only on (seed, k), so a longer run extends a shorter one
        spec = sc.SceneSpec(seed=2)
        np.testing.assert_array_equal(sc.generate(spec, 3).images, sc.generate(spec, 6).images[:3])

    def test_masks_consistent_with_image(self):
        spec = sc.SceneSpec(seed=4, n_objects=(2, 5), min_visible=1)
        data = sc.generate(spec, 30)
        palette = {tuple(np.float32(c)) for c in spec.palette}
        for k in range(30):
            s = data[k]
            n = s.n_objects
            # labels are compact 1..n
            assert set(np.unique(s.instance_masks).tolist()) - {0} == set(range(1, n + 1))
            bg = s.instance_masks == 0
            np.testing.assert_array_equal(s.class_masks == 0, bg)
            np.testing.assert_array_equal(s.image[bg], 0.0)
            for lab in range(1, n + 1):
                region = s.instance_masks == lab
                colours = np.unique(s.image[region], axis=0)
                assert len(colours) == 1 and tuple(colours[0]) in palette
                assert len(np.unique(s.class_masks[region])) == 1
                assert s.class_masks[region][0] in sc.CLASS_IDS.values()

    def test_min_visible_respected(self):
        spec = sc.SceneSpec(seed=1, n_objects=(3, 3), min_visible=16)
        data = sc.generate(spec, 40)
        for k in range(40):
            counts = np.bincount(data.instances[k].ravel())[1:]
            assert len(counts) == 3 and counts.min() >= 16

    def test_class_is_shape_id(self):
        for shape in sc.SHAPES:
            spec = sc.SceneSpec(shapes=(shape,), n_objects=(1, 2), seed=6)
            data = sc.generate(spec, 5)
            assert set(np.unique(data.classes).tolist()) == {0, sc.CLASS_IDS[shape]}


class TestFormat:
    def test_roundtrip(self, tmp_path):
        data = sc.generate(sc.SceneSpec(seed=7, canvas=(16, 12), size=(3, 8), n_objects=(1, 3)), 5)
        sc.save(data, tmp_path / "d.bin")
        back = sc.load(tmp_path / "d.bin")
        for name in ("images", "instances", "classes"):
            np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
            assert getattr(back, name).dtype == getattr(data, name).dtype

    def test_layout(self):
        data = sc.generate(sc.SceneSpec(seed=0, canvas=(8, 8), size=(2, 4)), 2)
        blob = sc.dumps(data)
        assert blob.startswith(b"SCENES v1 2 8 8\n")
        assert len(blob) == len(b"SCENES v1 2 8 8\n") + 2 * 64 * 16
        # channel-planar float32 image, then uint16 instance and class grids
        body = blob[16:]
        np.testing.assert_array_equal(np.frombuffer(body[:256], "<f4").reshape(8, 8), data.images[0, :, :, 0])
        np.testing.assert_array_equal(np.frombuffer(body[768:896], "<u2").reshape(8, 8), data.instances[0])

    @pytest.mark.parametrize("cut", [1, 100])
    def test_truncated(self, cut):
        blob = sc.dumps(sc.generate(sc.SceneSpec(seed=0), 2))
        with pytest.raises(FormatError):
            sc.loads(blob[:-cut])

    @pytest.mark.parametrize("blob", [b"", b"SCENES v2 1 2 2\n", b"SCENES v1 a 2 2\n", b"no header at all"])
    def test_bad_header(self, blob):
        with pytest.raises(FormatError):
            sc.loads(blob)

    def test_golden_fixture(self):
        blob = FIXTURE.read_bytes()
        assert hashlib.sha256(blob).hexdigest() == FIXTURE_SHA256
        assert sc.dumps(sc.generate(sc.SceneSpec(seed=0), 1)) == blob
