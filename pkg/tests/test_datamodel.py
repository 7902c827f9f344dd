import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from apptrans.datamodel import (
    DatasetRecord,
    DomainLabel,
    ManifestParseError,
    PoseAnnotation,
    ValidationError,
    image_to_u8,
    load_manifest,
    pose_distance,
    save_manifest,
    u8_to_image,
    validate_image,
)


def q_yaw(deg):
    half = math.radians(deg) / 2
    return (math.cos(half), 0.0, 0.0, math.sin(half))


def make_records():
    day = DomainLabel("day", 0)
    night = DomainLabel("night", 1)
    pose = PoseAnnotation(q_yaw(10.0), (1.0, 2.0, 0.0))
    return [
        DatasetRecord("a.png", day, pose, True),
        DatasetRecord("b.png", night, None, False),
        DatasetRecord("c.png", day, pose, True),
    ]


class TestManifest:
    def test_three_valid_lines(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest(path, make_records())
        assert len(load_manifest(path)) == 3

    def test_reference_without_pose_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"path": "a.png", "domain": "day", "reference": True}) + "\n")
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = json.dumps({"path": "a.png", "domain": "day", "reference": False})
        path.write_text(good + "\n{broken\n")
        with pytest.raises(ManifestParseError) as exc:
            load_manifest(path)
        assert exc.value.line_no == 2
        assert "line 2" in str(exc.value)

    def test_missing_key_is_parse_error(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"path": "a.png", "reference": False}) + "\n")
        with pytest.raises(ManifestParseError):
            load_manifest(path)

    def test_round_trip_fixed(self, tmp_path):
        path = tmp_path / "m.jsonl"
        records = make_records()
        save_manifest(path, records)
        assert load_manifest(path) == records

    def test_ordering_is_file_order(self, tmp_path):
        path = tmp_path / "m.jsonl"
        records = make_records()
        save_manifest(path, records)
        loaded = load_manifest(path)
        assert [r.image_path for r in loaded] == ["a.png", "b.png", "c.png"]


# hypothesis strategy for valid record lists: domain ids follow
# first-appearance order, reference records always carry a pose
_names = st.sampled_from(["day", "night", "fog", "snow", "dusk"])
_floats = st.floats(min_value=-100, max_value=100, allow_nan=False, width=64)


@st.composite
def record_lists(draw):
    n = draw(st.integers(min_value=1, max_value=8))
    names = draw(st.lists(_names, min_size=n, max_size=n))
    ids: dict[str, int] = {}
    records = []
    for i, name in enumerate(names):
        ids.setdefault(name, len(ids))
        is_ref = draw(st.booleans())
        has_pose = is_ref or draw(st.booleans())
        pose = None
        if has_pose:
            raw = np.array([draw(st.floats(min_value=-1, max_value=1, allow_nan=False, width=64))
                            for _ in range(4)])
            if np.linalg.norm(raw) < 1e-3:
                raw = np.array([1.0, 0.0, 0.0, 0.0])
            q = raw / np.linalg.norm(raw)
            q = q / np.linalg.norm(q)  # second pass tightens norm to < 1e-6 of 1
            pose = PoseAnnotation(tuple(q), tuple(draw(_floats) for _ in range(3)))
        records.append(DatasetRecord(f"img_{i:02d}.png", DomainLabel(name, ids[name]),
                                     pose, is_ref))
    return records


@settings(max_examples=50, deadline=None)
@given(record_lists())
def test_round_trip_property(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("manifests") / "m.jsonl"
    save_manifest(path, records)
    assert load_manifest(path) == records


class TestPoseDistance:
    def test_identity(self):
        a = PoseAnnotation(q_yaw(33.0), (5.0, -1.0, 2.0))
        assert pose_distance(a, a) == (0.0, 0.0)

    def test_ninety_about_z(self):
        # quaternion algebra oracle: relative angle = 2*acos(|<q_a, q_b>|)
        a = PoseAnnotation(q_yaw(0.0), (0.0, 0.0, 0.0))
        b = PoseAnnotation(q_yaw(90.0), (0.0, 0.0, 0.0))
        expected = math.degrees(2 * math.acos(abs(
            np.dot(np.array(a.rotation), np.array(b.rotation)))))
        angle, dist = pose_distance(a, b)
        assert angle == pytest.approx(90.0, abs=1e-9)
        assert angle == pytest.approx(expected, abs=1e-12)
        assert dist == 0.0

    def test_three_four_five(self):
        a = PoseAnnotation(q_yaw(12.0), (0.0, 0.0, 0.0))
        b = PoseAnnotation(q_yaw(12.0), (3.0, 4.0, 0.0))
        angle, dist = pose_distance(a, b)
        assert angle == pytest.approx(0.0, abs=1e-6)
        assert dist == pytest.approx(5.0, abs=1e-12)

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(ValidationError):
            PoseAnnotation((1.0, 1.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetry_property(self, seed):
        rng = np.random.default_rng(seed)
        qs = []
        for _ in range(2):
            q = rng.standard_normal(4)
            q /= np.linalg.norm(q)
            q /= np.linalg.norm(q)
            qs.append(q)
        a = PoseAnnotation(tuple(qs[0]), tuple(rng.uniform(-50, 50, 3)))
        b = PoseAnnotation(tuple(qs[1]), tuple(rng.uniform(-50, 50, 3)))
        assert pose_distance(a, b) == pose_distance(b, a)
        angle, dist = pose_distance(a, b)
        assert 0.0 <= angle <= 180.0
        assert dist >= 0.0


class TestImageContract:
    def test_valid_image_passes(self):
        validate_image(torch.zeros(3, 16, 16), downsample_factor=4)

    def test_out_of_range_rejected(self):
        img = torch.zeros(3, 8, 8)
        img[0, 0, 0] = 1.5
        with pytest.raises(ValidationError):
            validate_image(img)

    def test_non_finite_rejected(self):
        img = torch.zeros(3, 8, 8)
        img[1, 2, 3] = float("nan")
        with pytest.raises(ValidationError):
            validate_image(img)

    def test_divisibility_check(self):
        with pytest.raises(ValidationError):
            validate_image(torch.zeros(3, 10, 16), downsample_factor=4)

    def test_u8_round_trip(self):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        back = image_to_u8(u8_to_image(arr))
        assert np.array_equal(arr, back)


class TestDomainLabel:
    def test_empty_name_rejected(self):
        with pytest.raises(ValidationError):
            DomainLabel("", 0)


class TestEmbeddingType:
    def test_unit_norm_accepted(self):
        from apptrans.datamodel import Embedding
        v = np.random.default_rng(0).standard_normal(16)
        Embedding(v / np.linalg.norm(v))

    def test_off_norm_rejected(self):
        from apptrans.datamodel import Embedding
        with pytest.raises(ValidationError):
            Embedding(np.ones(4))  # norm 2

    def test_non_finite_rejected(self):
        from apptrans.datamodel import Embedding
        bad = np.zeros(4)
        bad[0] = float("nan")
        with pytest.raises(ValidationError):
            Embedding(bad)


class TestHyperParams:
    def test_published_defaults(self):
        from apptrans.datamodel import HyperParams
        hp = HyperParams()
        assert (hp.m_c, hp.tau, hp.n_neg) == (0.1, 0.07, 16)
        assert (hp.beta_rs, hp.beta_rc, hp.beta_cc, hp.beta_ca, hp.beta_nce) == \
            (100.0, 100.0, 10.0, 1.0, 1.0)
        assert (hp.adam_beta1, hp.adam_beta2, hp.lr) == (0.5, 0.999, 2e-4)
        assert (hp.epochs_flat, hp.epochs_decay, hp.batch_size) == (35, 15, 1)
        assert (hp.filter_k, hp.init_std) == (5, 0.001)
        assert (hp.rot_thresh_deg, hp.trans_thresh_m) == (8.0, 7.0)

    def test_invariants(self):
        from apptrans.datamodel import HyperParams
        with pytest.raises(ValidationError):
            HyperParams(tau=0.0)
        with pytest.raises(ValidationError):
            HyperParams(n_neg=0)
        with pytest.raises(ValidationError):
            HyperParams(lr=-1e-4)
