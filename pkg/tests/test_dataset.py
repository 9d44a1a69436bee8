import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import reference_edges
from sketchkp.config import RunConfig
from sketchkp.data import (
    AnnotatedImage,
    AnnotationError,
    CacheMiss,
    KeypointAnnotation,
    SamplingError,
    bbox_mask,
    canny,
    generate_auxiliary_keypoints,
    load_annotations,
    load_saliency,
    norm_to_pixel,
    pixel_to_norm,
    sample_episode,
    split_images,
    synthesize_edgemap,
)
from sketchkp.data.auxiliary import SaliencyMask, auxiliary_arrays


def write_index(tmp_path, images, names=("a", "b"), **header):
    doc = {"keypoint_names": list(names), "base_keypoints": [0], "novel_keypoints": [1], "aux_pairs": [], **header,
           "images": images}
    path = tmp_path / "index.json"
    path.write_text(json.dumps(doc))
    return path


def record(x=192, y=192, v=1, **kw):
    rec = {"path": "img.png", "class": "cat", "bbox": [10, 10, 300, 200], "width": 384, "height": 384,
           "keypoints": [{"x": x, "y": y, "v": v}, {"x": 0, "y": 0, "v": 1}]}
    rec.update(kw)
    return rec


class TestLoadAnnotations:
    def test_center_and_corner(self, tmp_path):
        index = load_annotations(write_index(tmp_path, [record()]))
        kps = index.images[0].keypoints
        assert kps[0].u == (0.0, 0.0)
        assert kps[1].u == (-1.0, -1.0)

    def test_reads_size_from_image_when_undeclared(self, tmp_path):
        Image.new("RGB", (200, 100)).save(tmp_path / "img.png")
        rec = record(x=100, y=50)
        del rec["width"], rec["height"]
        index = load_annotations(write_index(tmp_path, [rec]))
        assert index.images[0].keypoints[0].u == (0.0, 0.0)
        assert (index.images[0].width, index.images[0].height) == (200, 100)

    def test_base_novel_splits(self, tmp_path):
        names = [f"k{i}" for i in range(17)]
        rec = record()
        rec["keypoints"] = [{"x": 1, "y": 1, "v": 1}] * 17
        path = write_index(tmp_path, [rec], names=names, base_keypoints=list(range(11)),
                           novel_keypoints=list(range(11, 17)))
        index = load_annotations(path)
        assert len(index.base_keypoints) == 11 and len(index.novel_keypoints) == 6

    def test_malformed_record_names_image(self, tmp_path):
        rec = record(path="broken_cat.png")
        del rec["bbox"]
        with pytest.raises(AnnotationError, match="broken_cat.png"):
            load_annotations(write_index(tmp_path, [rec]))

    def test_out_of_range_coordinate(self, tmp_path):
        with pytest.raises(AnnotationError, match="outside"):
            load_annotations(write_index(tmp_path, [record(x=500)]))

    def test_wrong_keypoint_count(self, tmp_path):
        rec = record()
        rec["keypoints"] = rec["keypoints"][:1]
        with pytest.raises(AnnotationError, match="expected 2 keypoints"):
            load_annotations(write_index(tmp_path, [rec]))

    def test_degenerate_bbox(self, tmp_path):
        with pytest.raises(AnnotationError, match="non-positive"):
            load_annotations(write_index(tmp_path, [record(bbox=[10, 10, 10, 50])]))

    def test_invalid_visibility(self, tmp_path):
        with pytest.raises(AnnotationError):
            load_annotations(write_index(tmp_path, [record(v=2)]))


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(0, 1), y=st.floats(0, 1),
    w=st.integers(8, 4096), h=st.integers(8, 4096),
)
def test_coordinate_round_trip(x, y, w, h):
    px, py = x * w, y * h
    u = pixel_to_norm(px, py, w, h)
    assert -1 <= u[0] <= 1 and -1 <= u[1] <= 1
    bx, by = norm_to_pixel(u, w, h)
    assert abs(bx - px) / w <= 1e-6 and abs(by - py) / h <= 1e-6


class TestEdgemaps:
    def test_constant_image_has_no_edges(self, tmp_path):
        img = np.full((40, 40, 3), 127, np.uint8)
        out = synthesize_edgemap(img, "canny_builtin", tmp_path, "flat")
        assert out.shape == (40, 40, 3) and not out.any()

    def test_square_edges_hug_outline(self, tmp_path):
        img = np.zeros((64, 64, 3), np.uint8)
        img[20:44, 20:44] = 255
        edges = synthesize_edgemap(img, "canny_builtin", tmp_path, "square")[:, :, 0] > 0
        assert edges.any()
        ref = np.array(reference_edges(img[:, :, 0].astype(float).tolist(), 10.0))
        assert ref.any()
        # every Canny pixel lies within 2 px of a reference strong-gradient pixel
        ys, xs = np.nonzero(ref)
        for y, x in zip(*np.nonzero(edges)):
            assert np.min(np.maximum(abs(ys - y), abs(xs - x))) <= 2

    def test_canny_is_deterministic_and_cached(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        first = synthesize_edgemap(img, "canny_builtin", tmp_path, "rnd")
        assert (tmp_path / "rnd.S.png").exists()
        assert np.array_equal(first, canny(img))
        # second call reads the cache, even if the image argument changes
        again = synthesize_edgemap(np.zeros_like(img), "canny_builtin", tmp_path, "rnd")
        assert np.array_equal(first, again)
        assert not list(tmp_path.glob(".*"))  # no temp files left behind

    def test_external_naming_contract(self, tmp_path):
        arr = np.zeros((8, 8, 3), np.uint8)
        arr[2, 3] = 255
        Image.fromarray(arr).save(tmp_path / "cat_001.S1.png")
        out = synthesize_edgemap(None, "external_S1", tmp_path, "cat_001")
        assert np.array_equal(out, arr)

    def test_external_cache_miss(self, tmp_path):
        with pytest.raises(CacheMiss, match="precomputed"):
            synthesize_edgemap(None, "external_S2", tmp_path, "cat_001")


def make_image(kps, bbox=(0, 0, 100, 100), size=100):
    return AnnotatedImage("x.png", "c", bbox,
                          tuple(KeypointAnnotation(f"k{i}", u, v) for i, (u, v) in enumerate(kps)), size, size)


class TestAuxiliary:
    def full_mask(self, size=100):
        return SaliencyMask(np.ones((size, size), bool), "precomputed_file")

    def test_midpoint_and_quarter(self):
        im = make_image([((-1, -1), 1), ((1, 1), 1)])
        aux = generate_auxiliary_keypoints(im, [(0, 1)], [0.25, 0.5, 0.75], self.full_mask())
        us = {a.t: a.keypoint.u for a in aux}
        assert us[0.5] == (0.0, 0.0)
        assert us[0.25] == (-0.5, -0.5)
        assert us[0.75] == (0.5, 0.5)

    def test_invisible_endpoint_emits_nothing(self):
        im = make_image([((-1, -1), 1), ((1, 1), 0)])
        assert generate_auxiliary_keypoints(im, [(0, 1)], [0.5], self.full_mask()) == []

    def test_saliency_gates_visibility(self):
        mask = np.zeros((100, 100), bool)
        mask[:, :50] = True
        im = make_image([((-0.8, 0.0), 1), ((0.8, 0.0), 1)])
        aux = generate_auxiliary_keypoints(im, [(0, 1)], [0.25, 0.75], SaliencyMask(mask, "precomputed_file"))
        assert [a.keypoint.v for a in aux] == [1, 0]

    def test_at_most_eighteen(self):
        im = make_image([((0.1 * i - 0.5, 0.05 * i), 1) for i in range(6)])
        pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]
        aux = generate_auxiliary_keypoints(im, pairs, [0.25, 0.5, 0.75], self.full_mask())
        assert len(aux) == 18
        coords, vis = auxiliary_arrays(aux, 6, [0.25, 0.5, 0.75])
        assert coords.shape == (18, 2) and vis.sum() == 18

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(0.01, 0.99))
    def test_collinear(self, c, t):
        im = make_image([((c[0], c[1]), 1), ((c[2], c[3]), 1)])
        (a,) = generate_auxiliary_keypoints(im, [(0, 1)], [t], self.full_mask())
        (x1, y1), (x2, y2), (x, y) = (c[0], c[1]), (c[2], c[3]), a.keypoint.u
        assert abs((x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(0.01, 0.99),
           st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(60, 100), st.integers(60, 100)))
    def test_bbox_fallback_visibility(self, c, t, bbox):
        im = make_image([((c[0], c[1]), 1), ((c[2], c[3]), 1)], bbox=tuple(float(b) for b in bbox))
        mask = load_saliency(im, None)
        assert mask.source == "bbox_fallback"
        (a,) = generate_auxiliary_keypoints(im, [(0, 1)], [t], mask)
        x, y = norm_to_pixel(a.keypoint.u, 100, 100)
        col, row = min(int(x), 99), min(int(y), 99)
        inside = bbox[0] <= col + 0.5 <= bbox[2] and bbox[1] <= row + 0.5 <= bbox[3]
        assert a.keypoint.v == int(inside)

    def test_precomputed_mask_preferred(self, small_index, small_config):
        im = small_index.images[0]
        mask = load_saliency(im, small_config.mask_dir)
        assert mask.source == "precomputed_file" and mask.mask.shape == (im.height, im.width)
        assert bbox_mask(im).source == "bbox_fallback"


class TestSampling:
    def test_sizes_paper_setting(self, small_index, small_config):
        cfg = small_config.replace(k_shot=1, m_query=5)
        ep = sample_episode(small_index, cfg, 0, keypoint_ids=list(range(6)))
        assert ep.sizes == (1, 5, 6)
        assert len(ep.aux_spec) == 18

    def test_same_seed_same_episode(self, small_index, small_config):
        a = sample_episode(small_index, small_config, 42)
        b = sample_episode(small_index, small_config, 42)
        assert a == b

    def test_support_query_disjoint_and_edgemaps(self, small_index, small_config):
        for seed in range(30):
            ep = sample_episode(small_index, small_config, seed)
            assert not {s.stem for s in ep.support} & {q.stem for q in ep.query}
            assert all(s.modality.value == "edgemap_S" for s in ep.support)
            assert ep.has_companions
            assert all(q.modality.value == "photo" for q in ep.query)

    def test_insufficient_instances(self, small_index, small_config):
        cfg = small_config.replace(k_shot=1, m_query=8)  # 8 images per class, needs 9
        with pytest.raises(SamplingError, match="hexagon"):
            sample_episode(small_index, cfg, 0, class_label="hexagon")

    def test_photo_support_has_no_companions(self, small_index, small_config):
        ep = sample_episode(small_index, small_config.replace(modality_mode="photo_support"), 1)
        assert ep.support[0].modality.value == "photo" and not ep.has_companions

    def test_missing_s_edgemap_is_an_error(self, small_index, small_config, tmp_path):
        with pytest.raises(SamplingError, match="make-edgemaps"):
            sample_episode(small_index, small_config.replace(cache_dir=str(tmp_path)), 0)

    def test_split(self, small_index, small_config):
        splits = split_images(small_index, small_config)
        assert {im.class_label for im in splits["unseen"]} == {"kite"}
        train = {im.image_path for im in splits["train"]}
        test = {im.image_path for im in splits["test"]}
        assert not train & test
        assert len(train) + len(test) == 16
        assert split_images(small_index, small_config) == splits

    def test_support_pool(self, small_index, small_config):
        splits = split_images(small_index, small_config)
        ep = sample_episode(small_index, small_config, 5, images=splits["test"], support_pool=splits["train"])
        assert ep.support[0].stem in {im.stem for im in splits["train"]}
        assert all(q.stem in {im.stem for im in splits["test"]} for q in ep.query)


def test_config_defaults_match_paper():
    cfg = RunConfig()
    assert (cfg.k_shot, cfg.m_query, cfg.xi) == (1, 5, 14.0)
    assert (cfg.lambda_kp, cfg.lambda_da, cfg.lambda_style) == (0.5, 0.001, 0.001)
    assert cfg.locator_scales == [8, 12, 16] and cfg.t_values == [0.25, 0.5, 0.75]
    assert (cfg.iterations, cfg.learning_rate) == (80000, 1e-4)
    assert RunConfig(modality_mode="multimodal").lambda_style == 1e-8
