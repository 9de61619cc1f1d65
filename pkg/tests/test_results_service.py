"""
Tests for the lmreg Results Service API endpoints

The in-process tests load services/lmreg-results/app.py against a temporary
SQLite file. The live tests talk to a running service at RESULTS_BASE_URL and
are skipped when it cannot be reached.
"""

import importlib.util
import os

import pytest
import requests
from fastapi.testclient import TestClient

RESULTS_BASE_URL = os.getenv('RESULTS_BASE_URL', 'http://localhost:8092')
APP_PATH = os.path.join(os.path.dirname(__file__), '..', 'services', 'lmreg-results', 'app.py')


def load_app(monkeypatch, tmp_path, **env):
    monkeypatch.setenv('RESULTS_DB_PATH', str(tmp_path / 'results.sqlite'))
    for key, value in env.items():
        monkeypatch.setenv(key, value)
    spec = importlib.util.spec_from_file_location('lmreg_results_app', APP_PATH)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def run_record(**overrides):
    record = {
        "command": "register",
        "out_dir": "runs/reg",
        "seed": 3,
        "config_hash": "f" * 64,
        "variant": "ce",
        "guidance": True,
        "n_pairs": 40,
        "tre_before": 6.5,
        "tre_after": 2.0,
        "elapsed_seconds": 12.5,
    }
    record.update(overrides)
    return record


@pytest.fixture
def client(monkeypatch, tmp_path):
    module = load_app(monkeypatch, tmp_path)
    with TestClient(module.app) as c:
        yield c


class TestHealthAndConfig:
    """Test health and configuration endpoints"""

    def test_health(self, client):
        """Health endpoint should report ok"""
        response = client.get('/health')
        assert response.status_code == 200
        data = response.json()
        assert data['status'] == 'ok'
        assert data['results_enabled'] is True

    def test_config(self, client):
        """Config endpoint should return retention settings"""
        data = client.get('/api/runs/config').json()
        assert data['retention_days'] == 365
        assert data['max_runs'] == 10000


class TestRecording:
    """Test storing and reading back run summaries"""

    def test_record_run(self, client):
        """Posting a summary returns it with an id and timestamp"""
        response = client.post('/api/runs', json=run_record())
        assert response.status_code == 200
        data = response.json()
        assert data['id'] >= 1
        assert data['timestamp']
        assert data['tre_after'] == 2.0

    def test_get_run(self, client):
        """A stored run can be fetched by id"""
        run_id = client.post('/api/runs', json=run_record(metadata={"note": "baseline"})).json()['id']
        data = client.get(f'/api/runs/{run_id}').json()
        assert data['guidance'] is True
        assert data['metadata'] == {"note": "baseline"}

    def test_unknown_run(self, client):
        """Unknown ids are 404"""
        assert client.get('/api/runs/999').status_code == 404

    def test_invalid_run(self, client):
        """Negative errors are rejected"""
        assert client.post('/api/runs', json=run_record(tre_after=-1.0)).status_code == 422

    def test_missing_field(self, client):
        """The config hash is required"""
        record = run_record()
        del record['config_hash']
        assert client.post('/api/runs', json=record).status_code == 422


class TestSummary:
    """Test grouped summaries"""

    def test_groups(self, client):
        """Runs are grouped by variant and guidance"""
        client.post('/api/runs', json=run_record(tre_after=2.0))
        client.post('/api/runs', json=run_record(tre_after=4.0))
        client.post('/api/runs', json=run_record(guidance=False, tre_after=5.0))
        data = client.get('/api/runs/summary').json()
        assert data['total_runs'] == 3
        groups = {(g['variant'], g['guidance']): g for g in data['groups']}
        assert groups[('ce', True)]['runs'] == 2
        assert groups[('ce', True)]['mean_tre_after'] == pytest.approx(3.0)
        assert groups[('ce', False)]['mean_tre_after'] == pytest.approx(5.0)

    def test_unknown_range(self, client):
        """Unknown ranges are rejected"""
        assert client.get('/api/runs/summary?range=decade').status_code == 422


class TestHistory:
    """Test history, export and deletion"""

    def test_pagination_and_filter(self, client):
        """History is newest first and filterable by command"""
        for i in range(3):
            client.post('/api/runs', json=run_record(timestamp=f'2030-01-0{i + 1}T00:00:00'))
        client.post('/api/runs', json=run_record(command='evaluate', timestamp='2030-01-05T00:00:00'))
        data = client.get('/api/runs/history?limit=2&command=register').json()
        assert data['total'] == 3
        assert [r['timestamp'] for r in data['runs']] == ['2030-01-03T00:00:00', '2030-01-02T00:00:00']

    def test_export(self, client):
        """Export returns every run"""
        client.post('/api/runs', json=run_record())
        data = client.get('/api/runs/export').json()
        assert data['total_runs'] == 1
        assert data['runs'][0]['command'] == 'register'

    def test_clear_by_command(self, client):
        """Deleting by command leaves other runs"""
        client.post('/api/runs', json=run_record())
        client.post('/api/runs', json=run_record(command='evaluate'))
        assert client.delete('/api/runs/history?command=register').json()['deleted'] == 1
        assert client.get('/api/runs/history').json()['total'] == 1


class TestDisabled:
    """Test the disabled service"""

    def test_post_is_503(self, monkeypatch, tmp_path):
        """Writes are refused when storage is disabled"""
        module = load_app(monkeypatch, tmp_path, RESULTS_ENABLED='false')
        with TestClient(module.app) as c:
            assert c.post('/api/runs', json=run_record()).status_code == 503
            assert c.get('/health').json()['results_enabled'] is False


def service_available():
    try:
        return requests.get(f'{RESULTS_BASE_URL}/health', timeout=2).status_code == 200
    except requests.RequestException:
        return False


@pytest.mark.integration
class TestLiveService:
    """Test a running results service"""

    @pytest.fixture(autouse=True)
    def _require_service(self):
        if not service_available():
            pytest.skip(f"Results service not reachable at {RESULTS_BASE_URL}")

    def test_health_endpoint_returns_200(self):
        """Health endpoint should return 200 OK"""
        response = requests.get(f'{RESULTS_BASE_URL}/health')
        assert response.status_code == 200
        assert response.json()['status'] == 'ok'

    def test_record_and_fetch(self):
        """A posted run can be read back"""
        response = requests.post(f'{RESULTS_BASE_URL}/api/runs', json=run_record(out_dir='runs/live-test'))
        if response.status_code == 503:
            pytest.skip("Results storage is disabled")
        assert response.status_code == 200
        run_id = response.json()['id']
        fetched = requests.get(f'{RESULTS_BASE_URL}/api/runs/{run_id}').json()
        assert fetched['out_dir'] == 'runs/live-test'
