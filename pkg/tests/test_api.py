"""
Tests for the localization HTTP API
"""

import pytest
from fastapi.testclient import TestClient

from app.api.localization import get_inverted_file, get_model
from app.core import config
from app.main import app
from app.services.boosting import save_model
from app.services.matching import rank_frame, ranked_landmarks
from app.services.vocabulary import build_inverted_file

client = TestClient(app)

IDENTITY = {"rotation": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "translation": [0, 0, 0]}
OFFSET = {"rotation": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "translation": [1, 0, 0]}


def _query(frame, cam) -> dict:
    return {
        "frame_id": frame.frame_id,
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "gravity": list(frame.gravity),
        "keypoints": [
            {"u": kp.u, "v": kp.v, "scale": kp.scale, "descriptor": kp.descriptor.hex()}
            for kp in frame.keypoints
        ],
    }


@pytest.fixture
def served(small_model, train_map):
    app.dependency_overrides[get_model] = lambda: small_model
    app.dependency_overrides[get_inverted_file] = lambda: build_inverted_file(
        train_map, small_model.vocab, small_model.class_table)
    yield small_model
    app.dependency_overrides.clear()


class TestHealthEndpoints:
    """Health and info endpoints"""

    def test_health(self):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "healthy"

    def test_api_info(self):
        response = client.get("/api")
        assert response.status_code == 200
        data = response.json()
        assert data["status"] == "ok"
        assert "version" in data

    def test_info(self):
        response = client.get("/info")
        assert response.status_code == 200
        data = response.json()
        assert "capabilities" in data
        assert "endpoints" in data
        assert "boost-inv" in data["matchers"]


class TestMatchEndpoints:
    """Classifier matching and localization"""

    def test_no_model_configured(self, monkeypatch, eval_map):
        monkeypatch.setattr(config, "MODEL_PATH", None)
        frame = eval_map.frames[0]
        response = client.post("/localization/match", json={"frame": _query(frame, eval_map.camera_of(frame))})
        assert response.status_code == 503

    def test_validation(self):
        response = client.post("/localization/match", json={})
        assert response.status_code == 422

    def test_match_agrees_with_service(self, served, eval_map):
        frame = eval_map.frames[0]
        cam = eval_map.camera_of(frame)
        response = client.post("/localization/match", json={"frame": _query(frame, cam), "match": {"top_k": 3}})
        assert response.status_code == 200
        data = response.json()
        assert data["frame_id"] == frame.frame_id
        assert len(data["candidates"]) == len(frame.keypoints)
        expected = rank_frame(frame, served, cam, top_k=3)
        assert data["candidates"][0]["landmarks"] == list(ranked_landmarks(expected[0], served))
        accepted = {c["keypoint_index"] for c in data["candidates"] if c["accepted"]}
        assert {c["keypoint_index"] for c in data["correspondences"]} == accepted

    def test_inverted_file_matcher(self, served, eval_map):
        frame = eval_map.frames[1]
        body = {"frame": _query(frame, eval_map.camera_of(frame)), "matcher": "boost-inv"}
        response = client.post("/localization/match", json=body)
        assert response.status_code == 200
        for c in response.json()["candidates"]:
            assert c["evaluated"] <= served.n_classes
            assert all(m["matcher"] == "boost-inv" for m in response.json()["correspondences"])

    def test_inverted_file_needs_map(self, small_model, eval_map, monkeypatch):
        monkeypatch.setattr(config, "MAP_PATH", None)
        app.dependency_overrides[get_model] = lambda: small_model
        try:
            frame = eval_map.frames[0]
            body = {"frame": _query(frame, eval_map.camera_of(frame)), "matcher": "boost-inv"}
            response = client.post("/localization/match", json=body)
        finally:
            app.dependency_overrides.clear()
        assert response.status_code == 503

    def test_missing_map_file(self, small_model, eval_map, monkeypatch, tmp_path):
        model_path = tmp_path / "model.json"
        save_model(small_model, model_path)
        monkeypatch.setattr(config, "MODEL_PATH", str(model_path))
        monkeypatch.setattr(config, "MAP_PATH", str(tmp_path / "absent.ndjson"))
        app.dependency_overrides[get_model] = lambda: small_model
        try:
            frame = eval_map.frames[0]
            body = {"frame": _query(frame, eval_map.camera_of(frame)), "matcher": "boost-inv"}
            response = client.post("/localization/match", json=body)
        finally:
            app.dependency_overrides.clear()
        assert response.status_code == 503
        assert "not found" in response.json()["detail"]

    def test_bad_descriptor(self, served, eval_map):
        frame = eval_map.frames[0]
        query = _query(frame, eval_map.camera_of(frame))
        query["keypoints"][0]["descriptor"] = "zz"
        response = client.post("/localization/match", json={"frame": query})
        assert response.status_code == 422

    def test_zero_gravity(self, served, eval_map):
        frame = eval_map.frames[0]
        query = _query(frame, eval_map.camera_of(frame))
        query["gravity"] = [0.0, 0.0, 0.0]
        response = client.post("/localization/match", json={"frame": query})
        assert response.status_code == 422

    def test_localize(self, served, train_map):
        frame = train_map.frames[0]
        body = {"frame": _query(frame, train_map.camera_of(frame)), "ransac": {"seed": 0}}
        response = client.post("/localization/localize", json=body)
        assert response.status_code == 200
        data = response.json()
        assert data["frame_id"] == frame.frame_id
        assert len(data["inliers"]) <= len(data["correspondences"])
        if data["success"]:
            assert len(data["pose"]["quaternion"]) == 4


class TestMetricsEndpoints:
    """Metrics over posted records"""

    def test_retrieval(self):
        records = [
            {"true_landmark": 5, "ranked": [5, 7, -1]},
            {"true_landmark": 6, "ranked": [7, 6]},
            {"true_landmark": 8, "ranked": [7, -1, 3]},
            {"true_landmark": -1, "ranked": [-1, 7]},
            {"true_landmark": -1, "ranked": [7]},
        ]
        response = client.post("/metrics/retrieval", json={"records": records, "budgets": [1, 2, 5]})
        assert response.status_code == 200
        data = response.json()
        assert data["tracked"] == 3
        assert data["precision_at_1"] == pytest.approx(1 / 3)
        assert data["mrr"] == pytest.approx(0.5)
        assert data["untracked_rejection"] == pytest.approx(0.5)
        assert [p["miss_rate"] for p in data["miss_rate"]] == pytest.approx([2 / 3, 1 / 3, 1 / 3])

    def test_retrieval_without_tracked_queries(self):
        response = client.post("/metrics/retrieval", json={"records": [{"true_landmark": -1, "ranked": [-1]}]})
        assert response.status_code == 200
        assert response.json()["precision_at_1"] is None

    def test_retrieval_rejects_unsorted_budgets(self):
        records = [{"true_landmark": 5, "ranked": [5, 7]}]
        response = client.post("/metrics/retrieval", json={"records": records, "budgets": [5, 2]})
        assert response.status_code == 422
        assert "strictly increasing" in response.json()["detail"]

    def test_pose_pr(self):
        records = [
            {"frame_id": 0, "estimate": IDENTITY, "truth": IDENTITY, "inliers": 10},
            {"frame_id": 1, "estimate": OFFSET, "truth": IDENTITY, "inliers": 8},
            {"frame_id": 2, "estimate": IDENTITY, "truth": IDENTITY, "inliers": 5},
            {"frame_id": 3, "truth": IDENTITY},
        ]
        response = client.post("/metrics/pose", json={"records": records})
        assert response.status_code == 200
        data = response.json()
        assert data["frames"] == 4
        assert data["auc"] == pytest.approx(0.25 + 0.25 * (0.5 + 2 / 3) / 2)
        assert data["points"][0]["threshold"] == pytest.approx(11.0)

    def test_pose_rejects_non_rotation(self):
        bad = {"rotation": [[2, 0, 0], [0, 1, 0], [0, 0, 1]], "translation": [0, 0, 0]}
        response = client.post("/metrics/pose", json={"records": [{"frame_id": 0, "truth": bad}]})
        assert response.status_code == 422


class TestExportEndpoints:
    """Report downloads"""

    def test_export_csv(self):
        rows = [{"matcher": "boost", "auc": 0.5}, {"matcher": "hamming", "auc": 0.25}]
        response = client.post("/export/csv", json={"sheets": {"pose_auc": rows}})
        assert response.status_code == 200
        assert "text/csv" in response.headers["content-type"]
        assert "pose_auc.csv" in response.headers["content-disposition"]
        assert response.text.splitlines()[0] == "auc,matcher"

    def test_export_excel(self):
        body = {"sheets": {"pose_auc": [{"matcher": "boost", "auc": 0.5}]}, "title": "Demo Report"}
        response = client.post("/export/excel", json=body)
        assert response.status_code == 200
        assert "spreadsheetml" in response.headers["content-type"]
        assert response.content[:2] == b"PK"

    def test_export_validation(self):
        response = client.post("/export/excel", json={})
        assert response.status_code == 422
