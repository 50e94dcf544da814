import numpy as np
import pytest
from fastapi.testclient import TestClient

from clickforge import annoserve, netcore, raster
from clickforge.annoserve import (ServeConfig, create_app, load_config,
                                  mask_to_rle, rle_to_mask)
from clickforge.raster import DomainSpec, generate_pair

from conftest import image_png, mask_png, png_bytes


@pytest.fixture()
def pair():
    return generate_pair(DomainSpec("source", height=32, width=32, seed=61), 0)


def make_client(tmp_path, mode="local", **kw):
    cfg = ServeConfig(state_dir=str(tmp_path / "state"), mode=mode, seed=0, **kw)
    app = create_app(cfg)
    return TestClient(app), cfg


def create_session(client, pair, mode, with_gt=True):
    img, gt = pair
    files = {"image": ("img.png", image_png(img), "image/png")}
    if with_gt:
        files["gt"] = ("gt.png", mask_png(gt), "image/png")
    resp = client.post("/sessions", files=files, data={"mode": mode})
    return resp


class TestRle:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = (rng.random((13, 9)) > 0.5).astype(np.uint8)
            rle = mask_to_rle(mask)
            assert sum(rle["counts"]) == 13 * 9
            assert np.array_equal(rle_to_mask(rle), mask)

    def test_counts_start_with_zero_run(self):
        mask = np.ones((2, 2), dtype=np.uint8)
        assert mask_to_rle(mask)["counts"] == [0, 4]

    def test_bad_total_rejected(self):
        with pytest.raises(ValueError, match="pixels"):
            rle_to_mask({"counts": [3], "size": [2, 2]})


class TestSessionLifecycle:
    def test_create_and_health(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        resp = create_session(client, pair, "off")
        assert resp.status_code == 201
        body = resp.json()
        assert body["height"] == 32 and body["mode"] == "off"
        health = client.get("/healthz").json()
        assert health["status"] == "ok"
        assert health["checkpoint_version"] == 0

    def test_undecodable_image(self, tmp_path):
        client, _cfg = make_client(tmp_path)
        resp = client.post("/sessions",
                           files={"image": ("x.png", b"junk", "image/png")},
                           data={"mode": "off"})
        assert resp.status_code == 400

    def test_too_small_image(self, tmp_path):
        client, _cfg = make_client(tmp_path)
        tiny = png_bytes(np.zeros((8, 8, 3), dtype=np.uint8), "RGB")
        resp = client.post("/sessions",
                           files={"image": ("x.png", tiny, "image/png")},
                           data={"mode": "off"})
        assert resp.status_code == 422

    def test_gt_dimension_mismatch(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        img, _gt = pair
        bad_gt = png_bytes(np.zeros((16, 16), dtype=np.uint8), "L")
        resp = client.post(
            "/sessions",
            files={"image": ("i.png", image_png(img), "image/png"),
                   "gt": ("g.png", bad_gt, "image/png")},
            data={"mode": "off"})
        assert resp.status_code == 422

    def test_single_adapting_session(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        first = create_session(client, pair, "local")
        assert first.status_code == 201
        second = create_session(client, pair, "local")
        assert second.status_code == 409
        assert "Retry-After" in second.headers
        # read-only sessions are still welcome
        third = create_session(client, pair, "off")
        assert third.status_code == 201


class TestClicks:
    def test_click_flow_with_iou(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "local").json()["session_id"]
        resp = client.post(f"/sessions/{sid}/clicks",
                           json={"row": 16, "col": 16, "polarity": "positive",
                                 "ordinal": 1})
        assert resp.status_code == 200
        body = resp.json()
        assert body["mask"]["size"] == [32, 32]
        assert sum(body["mask"]["counts"]) == 32 * 32
        assert body["iou"] is not None
        assert len(body["steps"]) == 3  # default steps_per_click
        assert {"l_sparse", "l_dense", "l_anchor", "l_total"} <= \
            set(body["steps"][0])

    def test_ordinal_conflicts(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        ok = client.post(f"/sessions/{sid}/clicks",
                         json={"row": 5, "col": 5, "polarity": "positive",
                               "ordinal": 1})
        assert ok.status_code == 200
        repeat = client.post(f"/sessions/{sid}/clicks",
                             json={"row": 6, "col": 6, "polarity": "positive",
                                   "ordinal": 1})
        assert repeat.status_code == 409
        gap = client.post(f"/sessions/{sid}/clicks",
                          json={"row": 6, "col": 6, "polarity": "positive",
                                "ordinal": 5})
        assert gap.status_code == 409

    def test_out_of_bounds_and_polarity(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        bad = client.post(f"/sessions/{sid}/clicks",
                          json={"row": 99, "col": 5, "polarity": "positive",
                                "ordinal": 1})
        assert bad.status_code == 422
        bad2 = client.post(f"/sessions/{sid}/clicks",
                           json={"row": 1, "col": 5, "polarity": "both",
                                 "ordinal": 1})
        assert bad2.status_code == 422

    def test_unknown_session(self, tmp_path):
        client, _cfg = make_client(tmp_path)
        resp = client.post("/sessions/nope/clicks",
                           json={"row": 1, "col": 1, "polarity": "positive",
                                 "ordinal": 1})
        assert resp.status_code == 404

    def test_replayed_off_sessions_identical(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        masks = []
        for _ in range(2):
            sid = create_session(client, pair, "off").json()["session_id"]
            r = client.post(f"/sessions/{sid}/clicks",
                            json={"row": 16, "col": 16, "polarity": "positive",
                                  "ordinal": 1})
            masks.append(r.json()["mask"])
        assert masks[0] == masks[1]

    def test_trained_model_responds_to_first_click(self, tmp_path, mini_ckpt,
                                                   pair):
        ckpt = tmp_path / "mini.cfck"
        netcore.save_checkpoint(mini_ckpt, ckpt)
        client, _cfg = make_client(tmp_path, checkpoint=str(ckpt))
        img, gt = pair
        click = _interior_click(gt)
        sid = create_session(client, pair, "local").json()["session_id"]
        resp = client.post(f"/sessions/{sid}/clicks", json=click)
        counts = resp.json()["mask"]["counts"]
        assert sum(counts[1::2]) > 0  # some foreground predicted


def _interior_click(gt):
    from clickforge.guidance import next_robot_click
    c = next_robot_click(np.zeros_like(gt.data), gt.data, 1)
    return {"row": c.row, "col": c.col, "polarity": c.polarity, "ordinal": 1}


class TestUndo:
    def test_undo_off_mode_restores_zero_click_state(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        initial = client.get(f"/sessions/{sid}").json()["mask"]
        client.post(f"/sessions/{sid}/clicks",
                    json={"row": 16, "col": 16, "polarity": "positive",
                          "ordinal": 1})
        undone = client.post(f"/sessions/{sid}/undo")
        assert undone.status_code == 200
        assert undone.json()["mask"] == initial
        assert undone.json()["n_clicks"] == 0

    def test_undo_restores_adm_parameters(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        app_store = client.app.state.store
        sid = create_session(client, pair, "local").json()["session_id"]
        before = app_store.params.snapshot_bytes("ADM")
        client.post(f"/sessions/{sid}/clicks",
                    json={"row": 16, "col": 16, "polarity": "positive",
                          "ordinal": 1})
        assert app_store.params.snapshot_bytes("ADM") != before
        client.post(f"/sessions/{sid}/undo")
        assert app_store.params.snapshot_bytes("ADM") == before

    def test_undo_empty_log(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        assert client.post(f"/sessions/{sid}/undo").status_code == 409


class TestFinish:
    def test_finish_persists_and_increments_version(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        for expected_version in (1, 2):
            sid = create_session(client, pair, "local").json()["session_id"]
            client.post(f"/sessions/{sid}/clicks",
                        json={"row": 16, "col": 16, "polarity": "positive",
                              "ordinal": 1})
            resp = client.post(f"/sessions/{sid}/finish")
            assert resp.status_code == 200
            body = resp.json()
            assert body["checkpoint_version"] == expected_version
            # exported mask round-trips through the raster format
            loaded = raster.load_mask_file(body["mask_path"])
            assert np.array_equal(loaded.data,
                                  rle_to_mask(body["mask"]))
        versions = client.get("/checkpoints").json()
        assert versions["latest"] == 2

    def test_finished_sessions_are_immutable(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        client.post(f"/sessions/{sid}/clicks",
                    json={"row": 16, "col": 16, "polarity": "positive",
                          "ordinal": 1})
        client.post(f"/sessions/{sid}/finish")
        resp = client.post(f"/sessions/{sid}/clicks",
                           json={"row": 6, "col": 6, "polarity": "positive",
                                 "ordinal": 2})
        assert resp.status_code == 409
        assert client.post(f"/sessions/{sid}/finish").status_code == 409

    def test_zero_click_finish_rejected(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        assert client.post(f"/sessions/{sid}/finish").status_code == 409

    def test_off_mode_finish_keeps_version(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        client.post(f"/sessions/{sid}/clicks",
                    json={"row": 16, "col": 16, "polarity": "positive",
                          "ordinal": 1})
        resp = client.post(f"/sessions/{sid}/finish")
        assert resp.json()["checkpoint_version"] == 0


class TestCrashSafety:
    def test_restart_serves_last_finished_version(self, tmp_path, pair):
        client, cfg = make_client(tmp_path)
        sid = create_session(client, pair, "local").json()["session_id"]
        client.post(f"/sessions/{sid}/clicks",
                    json={"row": 16, "col": 16, "polarity": "positive",
                          "ordinal": 1})
        client.post(f"/sessions/{sid}/finish")
        committed = client.app.state.store.params.snapshot_bytes()

        # an unfinished adapting session mutates live params, then "crashes"
        sid2 = create_session(client, pair, "local").json()["session_id"]
        client.post(f"/sessions/{sid2}/clicks",
                    json={"row": 8, "col": 8, "polarity": "positive",
                          "ordinal": 1})

        fresh = TestClient(create_app(cfg))
        assert fresh.get("/healthz").json()["checkpoint_version"] == 1
        assert fresh.app.state.store.params.snapshot_bytes() == committed

    def test_session_state_survives_queries(self, tmp_path, pair):
        client, _cfg = make_client(tmp_path)
        sid = create_session(client, pair, "off").json()["session_id"]
        client.post(f"/sessions/{sid}/clicks",
                    json={"row": 10, "col": 12, "polarity": "positive",
                          "ordinal": 1})
        state = client.get(f"/sessions/{sid}").json()
        assert state["n_clicks"] == 1
        assert state["clicks"][0] == {"row": 10, "col": 12,
                                      "polarity": "positive", "ordinal": 1}
        assert state["undo_available"] is True
        assert state["finished"] is False


class TestConfig:
    def test_yaml_and_env_overrides(self, tmp_path, monkeypatch):
        path = tmp_path / "serve.yaml"
        path.write_text("mode: global\nport: 9001\nlr_adm: 0.0002\n")
        monkeypatch.setenv("CLICKFORGE_PORT", "9100")
        monkeypatch.setenv("CLICKFORGE_STEPS_PER_CLICK", "5")
        cfg = load_config(str(path))
        assert cfg.mode == "global"
        assert cfg.port == 9100          # env wins over file
        assert cfg.lr_adm == 0.0002
        assert cfg.steps_per_click == 5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "serve.yaml"
        path.write_text("not_a_key: 1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(str(path))
