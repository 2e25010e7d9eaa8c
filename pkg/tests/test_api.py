import pytest
from fastapi.testclient import TestClient

from app import app
from app.api.dependencies import get_settings
from app.core.config import AppSettings


@pytest.fixture
def client(tmp_path):
    app.dependency_overrides[get_settings] = lambda: AppSettings(DATA_DIR=tmp_path)  # type:ignore
    with TestClient(app) as c:
        yield c
    app.dependency_overrides.clear()


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_root_links_documentation(client):
    body = client.get("/").json()
    assert body["documentation_links"]["swagger_ui"].endswith("/documentation")


def test_evaluate_two_points(client):
    response = client.post(
        "/evaluation/",
        json={"predicted": [[0, 0, 0]], "ground_truth": [[1, 0, 0]]},
    )
    assert response.status_code == 200
    data = response.json()["data"]
    assert data["chamfer"] == 2.0
    assert data["accuracy"] == 1.0
    assert data["fscore"] == {"F@20": 0.0, "F@50": 0.0}


def test_evaluate_rejects_empty_sets(client):
    response = client.post("/evaluation/", json={"predicted": [], "ground_truth": [[1, 0, 0]]})
    assert response.status_code == 422


def test_evaluate_rejects_bad_threshold(client):
    response = client.post(
        "/evaluation/",
        json={"predicted": [[0, 0, 0]], "ground_truth": [[0, 0, 0]], "thresholds_mm": [-5]},
    )
    assert response.status_code == 422
    assert response.json()["error"]["error"] == "InvalidInput"


def test_missing_dataset_is_a_storage_error(client, tmp_path):
    response = client.post("/pipeline/runs", json={"dataset": "nowhere", "out": "runs/a"})
    assert response.status_code == 500
    body = response.json()
    assert body["error"]["error"] == "StorageError"
    assert body["error"]["path"] == str(tmp_path / "nowhere")


def test_run_request_rejects_unknown_config_keys(client):
    response = client.post(
        "/pipeline/runs",
        json={"dataset": "d", "out": "o", "config": {"prior": {"lambda": 1}}},
    )
    assert response.status_code == 422


def test_nbv_stage_needs_a_run_directory(client):
    response = client.post("/pipeline/runs", json={"stage": "nbv", "out": "n"})
    assert response.status_code == 422
    assert response.json()["error"]["error"] == "InvalidInput"


def test_run_stage_needs_a_dataset(client):
    response = client.post("/pipeline/runs", json={"out": "o"})
    assert response.status_code == 422
    assert response.json()["error"]["error"] == "InvalidInput"


def test_nbv_on_a_directory_without_run_outputs(client, tmp_path):
    (tmp_path / "empty").mkdir()
    response = client.post("/pipeline/runs", json={"stage": "nbv", "run_dir": "empty", "out": "n"})
    assert response.status_code == 500
    body = response.json()
    assert body["error"]["error"] == "StorageError"
    assert body["error"]["path"] == str(tmp_path / "empty" / "config.json")
