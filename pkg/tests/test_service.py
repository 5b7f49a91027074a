import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from saliencytune.service import create_app


def _mask_png_bytes(values) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(values, dtype=np.uint8) * 255).save(buf, format="PNG")
    return buf.getvalue()


def _image_png_bytes(image) -> bytes:
    buf = io.BytesIO()
    arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _wait_for_job(client, job_id, deadline=60.0):
    end = time.monotonic() + deadline
    while time.monotonic() < end:
        job = client.get(f"/jobs/{job_id}").json()
        if job["status"] in ("done", "failed"):
            return job
        time.sleep(0.05)
    raise AssertionError(f"job {job_id} did not finish within {deadline}s")


@pytest.fixture(scope="module")
def svc(tmp_path_factory):
    app = create_app(
        tmp_path_factory.mktemp("svc"), synthetic_n=36, pretrain_epochs=1, seed=0
    )
    with TestClient(app) as client:
        yield client, app.state.runtime


@pytest.fixture
def fresh(tmp_path_factory):
    app = create_app(
        tmp_path_factory.mktemp("svc-fresh"), synthetic_n=36, pretrain_epochs=0, seed=0
    )
    with TestClient(app) as client:
        yield client, app.state.runtime


# -- read endpoints ---------------------------------------------------------------


def test_health_reports_active_checkpoint(svc):
    client, _ = svc
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["active_checkpoint"] == "ckpt_0000"


def test_spec_serves_openapi(svc):
    client, _ = svc
    body = client.get("/spec").json()
    assert "/predict" in body["paths"]
    assert "/finetune" in body["paths"]


def test_samples_paginate_the_feedback_pool(svc):
    client, runtime = svc
    first = client.get("/samples", params={"page": 1, "page_size": 10}).json()
    assert first["total"] == len(runtime.pool_ids)
    assert len(first["items"]) == 10
    item = first["items"][0]
    assert set(item) == {"id", "label", "has_mask", "image_png"}
    png = client.get(item["image_png"])
    assert png.status_code == 200
    assert png.content[:8] == b"\x89PNG\r\n\x1a\n"
    beyond = client.get("/samples", params={"page": 99, "page_size": 10}).json()
    assert beyond["items"] == []
    # held-out ids are never offered for annotation
    offered = set()
    page = 1
    while True:
        items = client.get("/samples", params={"page": page, "page_size": 20}).json()["items"]
        if not items:
            break
        offered.update(i["id"] for i in items)
        page += 1
    assert offered == set(runtime.pool_ids)
    assert not offered & {s.id for s in runtime.holdout}


def test_samples_reject_bad_pagination(svc):
    client, _ = svc
    assert client.get("/samples", params={"page": 0}).status_code == 422


def test_files_rejects_path_traversal(svc):
    client, _ = svc
    assert client.get("/files/%2e%2e/service.db").status_code == 404
    assert client.get("/files/ghost.png").status_code == 404


# -- prediction --------------------------------------------------------------------


def test_predict_by_sample_id(svc):
    client, runtime = svc
    sid = runtime.pool_ids[0]
    body = client.post("/predict", json={"sample_id": sid}).json()
    assert body["sample_id"] == sid
    assert body["predicted_class"] in runtime.classes
    assert len(body["probabilities"]) == len(runtime.classes)
    assert abs(sum(body["probabilities"]) - 1.0) < 1e-6
    assert body["checkpoint_id"] == "ckpt_0000"
    saliency = client.get(body["saliency_png"])
    mask = client.get(body["mask_png"])
    assert saliency.status_code == 200 and mask.status_code == 200
    # the served mask is strictly binary at image resolution
    arr = np.asarray(Image.open(io.BytesIO(mask.content)).convert("L"))
    assert arr.shape == runtime.samples[sid].image.shape[:2]
    assert set(np.unique(arr).tolist()) <= {0, 255}


def test_predict_is_deterministic(svc):
    client, runtime = svc
    sid = runtime.pool_ids[1]
    a = client.post("/predict", json={"sample_id": sid}).json()
    b = client.post("/predict", json={"sample_id": sid}).json()
    assert a["probabilities"] == b["probabilities"]


def test_predict_accepts_image_upload(svc):
    client, runtime = svc
    sample = runtime.samples[runtime.pool_ids[2]]
    response = client.post(
        "/predict",
        files={"image": ("img.png", _image_png_bytes(sample.image), "image/png")},
    )
    assert response.status_code == 200
    assert response.json()["predicted_class"] in runtime.classes


def test_predict_error_paths(svc):
    client, _ = svc
    assert client.post("/predict", json={"sample_id": "ghost"}).status_code == 404
    assert client.post("/predict", json={}).status_code == 422
    assert client.post("/predict", content=b"junk").status_code == 422
    bad = client.post("/predict", files={"image": ("x.png", b"junk", "image/png")})
    assert bad.status_code == 422


# -- feedback validation -------------------------------------------------------------


def test_finetune_without_feedback_is_rejected(svc):
    client, _ = svc
    assert client.post("/finetune", json={}).status_code == 422


def test_feedback_error_paths(svc):
    client, runtime = svc
    sid = runtime.pool_ids[0]
    holdout_id = runtime.holdout[0].id
    sample = runtime.samples[sid]
    assert client.post("/feedback", json={"sample_id": "ghost", "corrected_label": "MEL"}).status_code == 404
    assert client.post("/feedback", json={"sample_id": holdout_id, "corrected_label": "MEL"}).status_code == 422
    assert client.post("/feedback", json={"sample_id": sid}).status_code == 422
    assert client.post("/feedback", json={"sample_id": sid, "corrected_label": "ACK"}).status_code == 422
    junk = client.post(
        "/feedback", data={"sample_id": sid},
        files={"corrected_mask": ("m.png", b"junk", "image/png")},
    )
    assert junk.status_code == 422
    gray = np.full((32, 32), 128, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray).save(buf, format="PNG")
    nonbinary = client.post(
        "/feedback", data={"sample_id": sid},
        files={"corrected_mask": ("m.png", buf.getvalue(), "image/png")},
    )
    assert nonbinary.status_code == 422
    small = client.post(
        "/feedback", data={"sample_id": sid},
        files={"corrected_mask": ("m.png", _mask_png_bytes(np.ones((8, 8), np.uint8)), "image/png")},
    )
    assert small.status_code == 422
    assert sample.gt_mask is not None  # sanity: the fixtures above used real shapes


# -- the feedback -> job -> checkpoint loop -------------------------------------------


def test_feedback_to_finetune_loop(svc):
    client, runtime = svc
    chosen = runtime.pool_ids[:4]
    for sid in chosen:
        sample = runtime.samples[sid]
        response = client.post(
            "/feedback",
            data={"sample_id": sid, "corrected_label": sample.label},
            files={"corrected_mask": ("m.png", _mask_png_bytes(sample.gt_mask.values), "image/png")},
        )
        assert response.status_code == 201
        assert "feedback_id" in response.json()

    started = client.post(
        "/finetune", json={"config": {"lambda": 1.0, "epochs": 2, "seed": 0}}
    )
    assert started.status_code == 202
    job_id = started.json()["job_id"]

    job = _wait_for_job(client, job_id)
    assert job["status"] == "done"
    assert job["checkpoint_in"] == "ckpt_0000"
    assert job["checkpoint_out"] == "ckpt_0001"
    before = job["metrics_before"]["avg_jaccard"]
    after = job["metrics_after"]["avg_jaccard"]
    assert after >= before - 0.02  # explanation training must not wreck the holdout

    comparison = job["holdout_comparison"]
    holdout_ids = sorted(s.id for s in runtime.holdout if s.gt_mask is not None)
    assert sorted(comparison["per_sample"]) == holdout_ids
    assert comparison["total"] == len(holdout_ids)
    assert comparison["improved"] == sum(
        1 for v in comparison["per_sample"].values() if v["after"] > v["before"]
    )
    assert comparison["improved_fraction"] == comparison["improved"] / comparison["total"]
    # the aggregate must be the mean of the very numbers the comparison shows
    per_after = [v["after"] for v in comparison["per_sample"].values()]
    assert abs(sum(per_after) / len(per_after) - after) < 1e-9

    checkpoints = client.get("/checkpoints").json()
    assert checkpoints["active"] == "ckpt_0001"
    assert [c["id"] for c in checkpoints["checkpoints"]] == ["ckpt_0000", "ckpt_0001"]

    latest = client.get("/metrics/latest").json()
    assert latest["checkpoint_id"] == "ckpt_0001"
    assert latest["metrics"] == job["metrics_after"]

    predicted = client.post("/predict", json={"sample_id": chosen[0]}).json()
    assert predicted["checkpoint_id"] == "ckpt_0001"

    # the batch was consumed: nothing pending is left to train on
    assert client.post("/finetune", json={}).status_code == 422


def test_predict_can_pin_a_checkpoint(svc):
    # runs after the loop test, so ckpt_0000 and ckpt_0001 both exist
    client, runtime = svc
    sid = runtime.pool_ids[0]
    active = client.post("/predict", json={"sample_id": sid}).json()
    pinned = client.post("/predict", json={"sample_id": sid, "checkpoint_id": "ckpt_0000"}).json()
    assert active["checkpoint_id"] == "ckpt_0001"
    assert pinned["checkpoint_id"] == "ckpt_0000"
    assert pinned["probabilities"] != active["probabilities"]
    assert pinned["mask_png"] != active["mask_png"]  # renders must not overwrite each other
    repeat = client.post("/predict", json={"sample_id": sid, "checkpoint_id": "ckpt_0000"}).json()
    assert repeat["probabilities"] == pinned["probabilities"]
    ghost = client.post("/predict", json={"sample_id": sid, "checkpoint_id": "ckpt_9999"})
    assert ghost.status_code == 404


def test_finetune_with_explicit_feedback_ids(svc):
    client, runtime = svc
    sid = runtime.pool_ids[5]
    fid = client.post(
        "/feedback", json={"sample_id": sid, "corrected_label": runtime.samples[sid].label}
    ).json()["feedback_id"]
    assert client.post("/finetune", json={"feedback_ids": [999888]}).status_code == 404
    assert client.post("/finetune", json={"feedback_ids": "some"}).status_code == 422
    started = client.post(
        "/finetune", json={"feedback_ids": [fid], "config": {"epochs": 1, "lambda": 0.0}}
    )
    assert started.status_code == 202
    job = _wait_for_job(client, started.json()["job_id"])
    assert job["status"] == "done"
    assert job["feedback_ids"] == [fid]
    # a consumed id cannot be reused
    assert client.post("/finetune", json={"feedback_ids": [fid]}).status_code == 422


def test_finetune_rejects_bad_config_override(svc):
    client, _ = svc
    response = client.post("/finetune", json={"config": {"lambda": 7}})
    assert response.status_code == 422


def test_second_job_bounces_while_slot_is_taken(fresh):
    client, runtime = fresh
    sid = runtime.pool_ids[0]
    client.post("/feedback", json={"sample_id": sid, "corrected_label": runtime.samples[sid].label})
    assert runtime._busy.acquire(blocking=False)
    try:
        assert client.post("/finetune", json={}).status_code == 409
        assert client.post("/checkpoints/ckpt_0000/rollback").status_code == 409
    finally:
        runtime._busy.release()


def test_rollback_switches_the_active_checkpoint(fresh):
    client, runtime = fresh
    sid = runtime.pool_ids[0]
    client.post("/feedback", json={"sample_id": sid, "corrected_label": runtime.samples[sid].label})
    started = client.post("/finetune", json={"config": {"epochs": 1, "lambda": 0.0}})
    job = _wait_for_job(client, started.json()["job_id"])
    assert job["status"] == "done"
    assert client.get("/health").json()["active_checkpoint"] == "ckpt_0001"

    assert client.post("/checkpoints/ghost/rollback").status_code == 404
    rolled = client.post("/checkpoints/ckpt_0000/rollback")
    assert rolled.status_code == 200
    assert rolled.json()["active"] == "ckpt_0000"
    predicted = client.post("/predict", json={"sample_id": sid}).json()
    assert predicted["checkpoint_id"] == "ckpt_0000"


def test_failed_job_releases_feedback_and_keeps_pointer(fresh, monkeypatch):
    client, runtime = fresh
    import saliencytune.service as service_module

    def explode(*args, **kwargs):
        raise RuntimeError("synthetic training failure")

    monkeypatch.setattr(service_module, "finetune", explode)
    sid = runtime.pool_ids[0]
    client.post("/feedback", json={"sample_id": sid, "corrected_label": runtime.samples[sid].label})
    started = client.post("/finetune", json={"config": {"epochs": 1}})
    assert started.status_code == 202
    job = _wait_for_job(client, started.json()["job_id"])
    assert job["status"] == "failed"
    assert "synthetic training failure" in job["error"]
    assert client.get("/health").json()["active_checkpoint"] == "ckpt_0000"
    monkeypatch.undo()
    # the batch went back to pending: training can be retried
    retried = client.post("/finetune", json={"config": {"epochs": 1, "lambda": 0.0}})
    assert retried.status_code == 202
    assert _wait_for_job(client, retried.json()["job_id"])["status"] == "done"


def test_two_identical_services_answer_identically(tmp_path):
    app_a = create_app(tmp_path / "a", synthetic_n=36, pretrain_epochs=0, seed=0)
    app_b = create_app(tmp_path / "b", synthetic_n=36, pretrain_epochs=0, seed=0)
    with TestClient(app_a) as a, TestClient(app_b) as b:
        sid = app_a.state.runtime.pool_ids[0]
        pa = a.post("/predict", json={"sample_id": sid}).json()
        pb = b.post("/predict", json={"sample_id": sid}).json()
        assert pa["probabilities"] == pb["probabilities"]
        assert pa["predicted_class"] == pb["predicted_class"]


def test_service_restart_reuses_persisted_state(tmp_path):
    first = create_app(tmp_path / "persist", synthetic_n=36, pretrain_epochs=0, seed=0)
    with TestClient(first) as client:
        sid = first.state.runtime.pool_ids[0]
        original = client.post("/predict", json={"sample_id": sid}).json()
    second = create_app(tmp_path / "persist", synthetic_n=36, pretrain_epochs=0, seed=0)
    with TestClient(second) as client:
        assert second.state.runtime.store.get_meta("active_checkpoint") == "ckpt_0000"
        again = client.post("/predict", json={"sample_id": sid}).json()
        assert again["probabilities"] == original["probabilities"]
