import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from smokegen.corpus import BinaryMask, Manifest, SmokeSample, save_mask
from smokegen.service import AnnotationStore, create_app


@pytest.fixture()
def served(tmp_path):
    root = tmp_path / "gen"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    records = []
    for i in range(5):
        arr = (rng.random((10, 10)) * 255).astype(np.uint8)
        Image.fromarray(arr, "L").save(root / "images" / f"g{i}.png")
        bits = np.zeros((10, 10), dtype=np.uint8)
        bits[2:7, 2:7] = 1
        save_mask(BinaryMask(bits), root / "masks" / f"g{i}.png")
        records.append(
            SmokeSample(
                f"g{i}",
                f"images/g{i}.png",
                "plume",
                "synthetic",
                "train",
                f"masks/g{i}.png" if i != 4 else None,
            )
        )
    manifest = Manifest(records)
    manifest_path = root / "manifest.jsonl"
    manifest.save(manifest_path)
    annotations = tmp_path / "annotations.jsonl"
    app = create_app(manifest_path, annotations, root=root)
    return TestClient(app), annotations, manifest_path, root


class TestQueue:
    def test_lists_unscored_with_urls(self, served):
        client, _, _, _ = served
        queue = client.get("/api/queue?n=3").json()
        assert len(queue) == 3
        assert queue[0] == {"id": "g0", "image_url": "/images/g0", "mask_url": "/masks/g0"}

    def test_maskless_record_has_null_mask_url(self, served):
        client, _, _, _ = served
        queue = client.get("/api/queue?n=10").json()
        assert queue[-1]["id"] == "g4" and queue[-1]["mask_url"] is None

    def test_scored_items_leave_queue(self, served):
        client, _, _, _ = served
        client.post("/api/score", json={"id": "g0", "color": 5, "visibility": 5, "translucency": 5})
        ids = [q["id"] for q in client.get("/api/queue?n=10").json()]
        assert "g0" not in ids and len(ids) == 4


class TestImages:
    def test_image_bytes_served(self, served):
        client, _, _, root = served
        resp = client.get("/images/g1")
        assert resp.status_code == 200
        assert resp.content == (root / "images" / "g1.png").read_bytes()

    def test_unknown_id_404(self, served):
        client, _, _, _ = served
        assert client.get("/images/nope").status_code == 404
        assert client.get("/masks/g4").status_code == 404


class TestScorePost:
    def test_valid_score_persisted(self, served):
        client, annotations, _, _ = served
        resp = client.post(
            "/api/score", json={"id": "g1", "color": 7, "visibility": 6, "translucency": 5}
        )
        assert resp.status_code == 201
        rows = [json.loads(l) for l in annotations.read_text().splitlines()]
        assert rows[-1]["sample_id"] == "g1"
        assert rows[-1]["scorer"] == "human"
        assert rows[-1]["weighted"] == pytest.approx(0.5 * 7 + 0.3 * 6 + 0.2 * 5)

    def test_out_of_range_rejected_422(self, served):
        client, annotations, _, _ = served
        resp = client.post(
            "/api/score", json={"id": "g1", "color": 11, "visibility": 5, "translucency": 5}
        )
        assert resp.status_code == 422
        assert not annotations.exists() or "g1" not in annotations.read_text()

    def test_unknown_id_404(self, served):
        client, _, _, _ = served
        resp = client.post(
            "/api/score", json={"id": "zz", "color": 5, "visibility": 5, "translucency": 5}
        )
        assert resp.status_code == 404

    def test_repost_overwrites_with_conflict_log(self, served):
        client, annotations, _, _ = served
        body = {"id": "g2", "color": 3, "visibility": 3, "translucency": 3}
        assert client.post("/api/score", json=body).status_code == 201
        body["color"] = 9
        assert client.post("/api/score", json=body).status_code == 201
        lines = [json.loads(l) for l in annotations.read_text().splitlines()]
        assert len([l for l in lines if l["sample_id"] == "g2"]) == 2
        store = client.app.state.store
        assert store.records["g2"].color == 9.0
        assert "g2" in store.conflicts


class TestProgress:
    def test_counts(self, served):
        client, _, _, _ = served
        assert client.get("/api/progress").json() == {"scored": 0, "total": 5}
        for i in range(5):
            client.post(
                "/api/score",
                json={"id": f"g{i}", "color": 5, "visibility": 5, "translucency": 5},
            )
        assert client.get("/api/progress").json() == {"scored": 5, "total": 5}


class TestCrashRecovery:
    def test_acknowledged_posts_survive_restart(self, served):
        client, annotations, manifest_path, root = served
        client.post("/api/score", json={"id": "g3", "color": 8, "visibility": 7, "translucency": 6})
        # simulate a process restart: a fresh app over the same files
        fresh = TestClient(create_app(manifest_path, annotations, root=root))
        assert fresh.get("/api/progress").json()["scored"] == 1
        ids = [q["id"] for q in fresh.get("/api/queue?n=10").json()]
        assert "g3" not in ids

    def test_store_reads_last_record_per_id(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        store = AnnotationStore(path)
        from smokegen.filtering import ScoreRecord

        store.put(ScoreRecord("x", 1, 1, 1, scorer="human"))
        store.put(ScoreRecord("x", 9, 9, 9, scorer="human"))
        reloaded = AnnotationStore(path)
        assert reloaded.records["x"].color == 9


class TestStaticUiMount:
    def test_index_served_when_ui_dir_given(self, tmp_path):
        root = tmp_path / "gen"
        (root / "images").mkdir(parents=True)
        Image.fromarray(np.zeros((4, 4), np.uint8), "L").save(root / "images" / "a.png")
        manifest = Manifest([SmokeSample("a", "images/a.png", "c", "synthetic", "train")])
        manifest_path = root / "manifest.jsonl"
        manifest.save(manifest_path)
        ui = tmp_path / "dist"
        ui.mkdir()
        (ui / "index.html").write_text("<html><body>annotator</body></html>")
        client = TestClient(create_app(manifest_path, tmp_path / "ann.jsonl", root=root, ui_dir=ui))
        resp = client.get("/")
        assert resp.status_code == 200
        assert "annotator" in resp.text
        assert client.get("/api/progress").json()["total"] == 1
