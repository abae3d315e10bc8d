import pytest
from fastapi.testclient import TestClient

from main import app

TWO_POINT = {"kind": "discrete", "support": [{"value": 2.0, "mass": 0.5}, {"value": 1.0, "mass": 0.5}]}
ONE_POINT = {"kind": "discrete", "support": [{"value": 3.0, "mass": 1.0}]}
LINE = {"kind": "curve", "breakpoints": [{"q": 0.0, "v": 1.0}, {"q": 1.0, "v": 0.0}]}


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def prior(*buyers, family="unknown"):
    return {"family": family, "buyers": list(buyers)}


def test_root_and_health(client):
    assert client.get("/").json()["status"] == "running"
    health = client.get("/api/v1/health")
    assert health.status_code == 200
    assert health.json()["status"] == "healthy"


class TestPriors:
    def test_generate(self, client):
        response = client.post("/api/v1/priors/generate",
                               json={"family": "unit01", "n": 2, "support_size": 5, "seed": 1})
        assert response.status_code == 200
        body = response.json()
        assert body["family"] == "unit01"
        assert len(body["buyers"]) == 2
        assert all(len(b["support"]) <= 5 for b in body["buyers"])

    def test_generate_unknown_family(self, client):
        response = client.post("/api/v1/priors/generate", json={"family": "bogus"})
        assert response.status_code == 422

    def test_lowerbound(self, client):
        response = client.post("/api/v1/priors/lowerbound",
                               json={"kind": "geo_hill", "eps": 0.1, "s": 2, "H": 16})
        assert response.status_code == 200
        assert response.json()["kind"] == "curve"

    def test_lowerbound_needs_eps(self, client):
        response = client.post("/api/v1/priors/lowerbound", json={"kind": "unit_hill"})
        assert response.status_code == 400


class TestRevenue:
    def test_two_buyers(self, client):
        response = client.post("/api/v1/revenue", json={"prior": prior(TWO_POINT, TWO_POINT)})
        assert response.status_code == 200
        body = response.json()
        assert body["revenue"] == pytest.approx(1.5)
        assert len(body["reserves"]) == 2

    def test_rule_prior_on_other_values(self, client):
        response = client.post("/api/v1/revenue",
                               json={"prior": prior(ONE_POINT), "rule_prior": prior(ONE_POINT)})
        assert response.json()["revenue"] == pytest.approx(3.0)

    def test_curve_prior_is_rejected(self, client):
        response = client.post("/api/v1/revenue", json={"prior": prior(LINE)})
        assert response.status_code == 400
        assert "discretize" in response.json()["detail"]


def test_learn(client):
    generated = client.post("/api/v1/priors/generate",
                            json={"family": "unit01", "n": 2, "support_size": 5, "seed": 3}).json()
    response = client.post("/api/v1/learn", json={"prior": generated, "family": "unit01", "eps": 0.3})
    assert response.status_code == 200
    body = response.json()
    assert body["learner"] == "pinpoint"
    assert body["budget"]["total"] > 0
    assert len(body["learned_prior"]["buyers"]) == 2
    assert body["learned_revenue"] <= body["opt_revenue"] + 1e-9
    assert body["params"]["N"] == body["N"]
    assert body["params"]["n"] == 2
    assert [a["buyer"] for a in body["auction"]] == [0, 1]
    assert [a["reserve"] for a in body["auction"]] == body["reserves"]
    assert body["probes"] is None


def test_learn_single_buyer_reports_its_search(client):
    generated = client.post("/api/v1/priors/generate",
                            json={"family": "unit01", "n": 1, "support_size": 5, "seed": 3}).json()
    response = client.post("/api/v1/learn", json={"prior": generated, "family": "unit01", "eps": 0.2})
    assert response.status_code == 200
    body = response.json()
    assert body["learner"] == "grid_unit"
    assert body["probes"] == 20
    assert 0 < body["quantile"] <= 1
    assert body["auction"] == [] and body["learned_prior"] is None


def test_learn_one_to_h_needs_h(client):
    response = client.post("/api/v1/learn", json={"prior": prior(TWO_POINT), "family": "one_to_h", "eps": 0.2})
    assert response.status_code == 400


class TestAnalysis:
    def test_thresholds(self, client):
        response = client.post("/api/v1/analyze/thresholds",
                               json={"prior": prior(TWO_POINT, TWO_POINT), "eps": 0.25})
        assert response.status_code == 200
        body = response.json()
        assert len(body["thetas"]) == 2
        assert body["achieved_ratio"] >= 0.75 - 1e-9

    def test_dskl(self, client):
        other = {"kind": "discrete", "support": [{"value": 2.0, "mass": 0.25}, {"value": 1.0, "mass": 0.75}]}
        body = client.post("/api/v1/analyze/dskl", json={"p": TWO_POINT, "q": other}).json()
        assert body["finite"]
        assert body["dskl"] == pytest.approx(0.274653, abs=1e-6)

    def test_infinite_dskl(self, client):
        body = client.post("/api/v1/analyze/dskl", json={"p": TWO_POINT, "q": ONE_POINT}).json()
        assert body == {"dskl": None, "finite": False}

    def test_sandwich(self, client):
        response = client.post("/api/v1/analyze/sandwich", json={
            "prior": prior(TWO_POINT), "learned": prior(TWO_POINT), "N": 16,
        })
        assert response.status_code == 200
        [report] = response.json()
        assert report["dominates_upper"] and report["dominates_lower"]

    def test_sandwich_buyer_mismatch(self, client):
        response = client.post("/api/v1/analyze/sandwich", json={
            "prior": prior(TWO_POINT, TWO_POINT), "learned": prior(TWO_POINT), "N": 16,
        })
        assert response.status_code == 400

    def test_kl_gap_on_identical_pair(self, client):
        response = client.post("/api/v1/analyze/kl-gap", json={
            "p": prior(TWO_POINT, TWO_POINT), "q": prior(TWO_POINT, TWO_POINT), "K": 100, "alpha": 0.01,
        })
        assert response.status_code == 200
        body = response.json()
        assert (body["fixtures"], body["below_threshold"], body["passed"]) == (1, 1, 1)
        assert body["max_gap"] == pytest.approx(0.0, abs=1e-12)
        assert body["threshold"] == pytest.approx(0.01)

    def test_kl_gap_sweep(self, client):
        body = client.post("/api/v1/analyze/kl-gap",
                           json={"fixtures": 10, "scale": 0.0, "n": 2, "support_size": 4}).json()
        assert body["fixtures"] == 10
        assert body["below_threshold"] == 10
        assert body["pass_rate"] == 1.0

    def test_kl_gap_needs_both_priors(self, client):
        response = client.post("/api/v1/analyze/kl-gap", json={"p": prior(TWO_POINT)})
        assert response.status_code == 422

    def test_kl_scaling(self, client):
        response = client.post("/api/v1/analyze/kl-scaling", json={
            "distribution": TWO_POINT, "thetas": [0.25, 0.5], "Ns": [16, 32],
        })
        assert response.status_code == 200
        body = response.json()
        assert len(body["rows"]) == 4
        assert set(body["ratios"]) == {"0.25", "0.5"}
        assert body["fitted_constant"] == pytest.approx(max(row["C"] for row in body["rows"]))
        assert all(row["dskl"] > 0 for row in body["rows"])

    def test_kl_scaling_discretizes_curves(self, client):
        response = client.post("/api/v1/analyze/kl-scaling",
                               json={"distribution": LINE, "thetas": [0.5], "Ns": [16]})
        assert response.status_code == 200
        assert len(response.json()["rows"]) == 1

    def test_kl_scaling_rejects_bad_theta(self, client):
        response = client.post("/api/v1/analyze/kl-scaling",
                               json={"distribution": TWO_POINT, "thetas": [0.0], "Ns": [16]})
        assert response.status_code == 422


class TestBench:
    def test_single_grid(self, client):
        response = client.post("/api/v1/bench", json={"suite": "single-grid", "eps": 0.2, "trials": 3})
        assert response.status_code == 200
        body = response.json()
        assert len(body["records"]) == 3
        assert "pass" in body["records"][0]
        assert body["summary"]["pass_rate"] == 1.0

    def test_unknown_suite(self, client):
        assert client.post("/api/v1/bench", json={"suite": "nope"}).status_code == 422

    def test_regime_error(self, client):
        response = client.post("/api/v1/bench", json={"suite": "interval", "n": 4, "trials": 1})
        assert response.status_code == 400
