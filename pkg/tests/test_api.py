import pytest
from fastapi.testclient import TestClient

from main import create_app, router_names


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def test_root_lists_mounted_routers(client):
    body = client.get("/").json()
    assert body["routers"] == router_names()
    assert "experiments" in body["routers"]


def test_complex_summary(client):
    body = client.post("/api/complex/summary", json={"kind": "rp2"}).json()
    assert body["level_sizes"] == {"1": 6, "2": 15, "3": 10}
    listed = client.post("/api/complex/summary", json={"kind": "facets", "n": 5, "facets": [[0, 1], [1, 2]]}).json()
    assert listed["isolated_vertices"] == [3, 4]
    assert client.post("/api/complex/summary", json={"kind": "klein"}).status_code == 400


def test_spectral_routes(client):
    report = client.post("/api/spectral/down-up", json={"complex": {"n": 8, "d": 3}, "i": 3, "j": 1}).json()
    assert report["second_eigenvalue"] == pytest.approx(1 * 5 / (3 * 7), abs=1e-9)
    links = client.post("/api/spectral/links", json={"complex": {"n": 8, "d": 3}, "two_sided": False}).json()
    assert links["gamma"] <= 1e-9


def test_dp_test_route(client):
    body = {"complex": {"n": 10, "d": 5}, "k": 3, "s": 1, "function": "0110100110", "mode": "exact"}
    report = client.post("/api/dp-test/run", json=body).json()
    assert report["estimate"] == 1.0 and report["mode"] == "exact"
    assert client.post("/api/dp-test/run", json={**body, "s": 4}).status_code == 400


def test_witness_route(client):
    body = client.post("/api/ug/witness", json={"kind": "torus"}).json()
    assert body["h1_dimension"] == 2
    assert body["triangle_consistency"] == pytest.approx(1.0)
    assert client.post("/api/ug/witness", json={"n": 6, "d": 3}).json()["h1_dimension"] == 0


def test_planted_adversary_route(client):
    body = {"n": 10, "d": 6, "k": 5, "s": 2, "functions": ["0110100110", "1001011001"], "trials": 2000}
    report = client.post("/api/adversary/planted", json=body).json()
    assert report["fraction_consistent"] == pytest.approx(1.0)
    assert client.post("/api/adversary/planted", json={**body, "k": 4}).status_code == 400


def test_decoder_short_list_route(client):
    body = {"n": 10, "k": 4, "functions": ["0110100110"], "rounds": 3}
    out = client.post("/api/decoder/short-list", json=body).json()
    assert [f for _, f in out["survivors"]] == ["0110100110"]


def test_experiment_routes(client):
    presets = client.get("/api/experiments/presets").json()
    assert {p["name"] for p in presets} >= {"completeness", "decode-end-to-end"}
    ok = client.post("/api/experiments/validate", json={"text": "[run]\npreset = rp2-coboundary\n"})
    assert ok.status_code == 200 and ok.json()["complex"]["kind"] == "rp2"
    bad = client.post("/api/experiments/validate", json={"text": "[tester]\nk = 2\ns = 3\n"})
    assert bad.status_code == 422
    detail = bad.json()["detail"]
    assert detail["line"] == 3 and "tester.k" in detail["key"]
