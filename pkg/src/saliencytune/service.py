"""HTTP service around the feedback loop: predict, collect corrections, retrain.

Requests are handled concurrently, but all model-mutating work funnels
through a single job slot: a second fine-tune request while one is queued
or running gets 409. Reads always use the last published checkpoint, so
prediction stays available while a job trains on a copy.

State layout under the data directory: ``service.db`` (records/jobs/
checkpoint index), ``checkpoints/*.pt``, ``masks/*.png`` (uploaded
corrections at image resolution), ``png/`` (rendered saliency, masks and
sample images served under /files).
"""

from __future__ import annotations

import io
import json
import logging
import threading
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse
from PIL import Image

from .backend import ClassifierBackend, build_reference_cnn
from .data import (
    DEFAULT_CLASSES,
    FeedbackRecord,
    ImageSample,
    export_dataset,
    generate_synthetic_dataset,
    load_dataset,
)
from .errors import SaliencyTuneError
from .explainer import ExplanationMask, align_resolution, explain_image, hard_threshold, upsample_saliency
from .metrics import evaluate, per_sample_jaccards
from .store import ServiceStore
from .trainer import TrainingConfig, finetune

log = logging.getLogger(__name__)

ACTIVE_KEY = "active_checkpoint"


class ServiceRuntime:
    """Everything the handlers share: samples, store, model cache, job slot."""

    def __init__(
        self,
        data_dir,
        synthetic_n: int = 120,
        pretrain_epochs: int = 2,
        seed: int = 0,
        holdout_fraction: float = 0.2,
        threshold: float = 0.5,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.store = ServiceStore(self.data_dir / "service.db")
        self.threshold = threshold
        self.seed = seed
        self._backends: dict[str, ClassifierBackend] = {}
        self._busy = threading.Lock()

        dataset_dir = self.data_dir / "dataset"
        if not (dataset_dir / "labels.csv").exists():
            export_dataset(generate_synthetic_dataset(synthetic_n, seed=seed), dataset_dir)
        # the on-disk copy is canonical, so a restart sees identical pixels
        samples = load_dataset(dataset_dir)
        labels = {s.label for s in samples}
        self.classes = (
            list(DEFAULT_CLASSES) if labels <= set(DEFAULT_CLASSES) else sorted(labels)
        )
        self.samples = {s.id: s for s in samples}

        order = np.random.default_rng(seed).permutation(len(samples))
        n_holdout = max(1, int(round(len(samples) * holdout_fraction)))
        holdout_idx = set(order[:n_holdout].tolist())
        self.holdout = [samples[i] for i in sorted(holdout_idx)]
        self.pool_ids = [samples[i].id for i in range(len(samples)) if i not in holdout_idx]

        (self.data_dir / "png" / "samples").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "masks").mkdir(parents=True, exist_ok=True)
        for s in samples:
            target = self.data_dir / "png" / "samples" / f"{s.id}.png"
            if not target.exists():
                Image.fromarray((np.clip(s.image, 0, 1) * 255).round().astype(np.uint8)).save(target)

        if self.store.get_meta(ACTIVE_KEY) is None:
            self._bootstrap_model(pretrain_epochs)

    def _bootstrap_model(self, pretrain_epochs: int) -> None:
        sample = next(iter(self.samples.values()))
        backend = build_reference_cnn(
            num_classes=len(self.classes),
            in_channels=sample.image.shape[2],
            seed=self.seed,
        )
        if pretrain_epochs > 0:
            pool = [self.samples[i] for i in self.pool_ids]
            warmup = TrainingConfig(
                lam=0.0,
                epochs=pretrain_epochs,
                seed=self.seed,
                selection_criterion="val_accuracy",
            )
            label_only = [
                (s, FeedbackRecord(sample_id=s.id, corrected_label=s.label, source="simulated"))
                for s in pool
            ]
            finetune(backend, label_only, self.holdout, warmup, self.classes)
        checkpoint_id = self.store.next_checkpoint_id()
        path = self.data_dir / "checkpoints" / f"{checkpoint_id}.pt"
        backend.save_checkpoint(path)
        self.store.add_checkpoint(checkpoint_id, str(path), parent=None, job_id=None)
        self.store.set_meta(ACTIVE_KEY, checkpoint_id)
        report = evaluate(backend, self.holdout, self.threshold, self.classes)
        self.store.set_meta("metrics_" + checkpoint_id, json.dumps(report.to_json()))

    # -- model access -----------------------------------------------------------

    @property
    def active_checkpoint(self) -> str:
        value = self.store.get_meta(ACTIVE_KEY)
        assert value is not None
        return value

    def backend_for(self, checkpoint_id: str) -> ClassifierBackend:
        if checkpoint_id not in self._backends:
            row = self.store.get_checkpoint(checkpoint_id)
            if row is None:
                raise KeyError(checkpoint_id)
            self._backends[checkpoint_id] = ClassifierBackend.load_checkpoint(row["path"])
        return self._backends[checkpoint_id]

    # -- the fine-tune job -------------------------------------------------------

    def try_start_job(self, feedback_rows: list[dict], config: TrainingConfig) -> Optional[int]:
        """Queue and launch a job, or return None when the slot is taken."""
        if not self._busy.acquire(blocking=False):
            return None
        try:
            checkpoint_in = self.active_checkpoint
            job_id = self.store.create_job(
                checkpoint_in, config.to_json(), [r["id"] for r in feedback_rows]
            )
            self.store.consume_feedback([r["id"] for r in feedback_rows], job_id)
        except BaseException:
            self._busy.release()
            raise
        worker = threading.Thread(
            target=self._run_job,
            args=(job_id, checkpoint_in, feedback_rows, config),
            name=f"finetune-job-{job_id}",
            daemon=True,
        )
        worker.start()
        return job_id

    def _feedback_pair(self, row: dict) -> tuple[ImageSample, FeedbackRecord]:
        sample = self.samples[row["sample_id"]]
        mask = None
        if row["mask_path"]:
            arr = np.asarray(Image.open(row["mask_path"]).convert("L"))
            mask = ExplanationMask((arr > 127).astype(np.uint8), origin="feedback")
        record = FeedbackRecord(
            sample_id=sample.id,
            corrected_label=row["corrected_label"],
            corrected_mask=mask,
            source=row["source"],
            created_at=row["created_at"],
        )
        return sample, record

    def _run_job(self, job_id: int, checkpoint_in: str, feedback_rows: list[dict], config: TrainingConfig) -> None:
        try:
            self.store.advance_job(job_id, "running")
            source = self.store.get_checkpoint(checkpoint_in)
            backend = ClassifierBackend.load_checkpoint(source["path"])
            pairs = [self._feedback_pair(r) for r in feedback_rows]
            before = evaluate(backend, self.holdout, config.threshold, self.classes)
            before_j = per_sample_jaccards(backend, self.holdout, config.threshold)
            checkpoint, _ = finetune(backend, pairs, self.holdout, config, self.classes)
            checkpoint.apply_to(backend)
            after = evaluate(backend, self.holdout, config.threshold, self.classes)
            after_j = per_sample_jaccards(backend, self.holdout, config.threshold)
            improved = sum(1 for sid in before_j if after_j[sid] > before_j[sid])
            comparison = {
                "improved": improved,
                "total": len(before_j),
                "improved_fraction": improved / len(before_j) if before_j else None,
                "per_sample": {
                    sid: {"before": before_j[sid], "after": after_j[sid]}
                    for sid in sorted(before_j)
                },
            }

            checkpoint_id = self.store.next_checkpoint_id()
            path = self.data_dir / "checkpoints" / f"{checkpoint_id}.pt"
            backend.save_checkpoint(path)
            self.store.add_checkpoint(checkpoint_id, str(path), parent=checkpoint_in, job_id=job_id)
            self.store.advance_job(
                job_id,
                "done",
                checkpoint_out=checkpoint_id,
                metrics_before=before.to_json(),
                metrics_after=after.to_json(),
                holdout_comparison=comparison,
            )
            self.store.set_meta(ACTIVE_KEY, checkpoint_id)
        except Exception as exc:  # a failed job must not take the service down
            log.exception("job %d failed", job_id)
            try:
                self.store.advance_job(job_id, "failed", error=str(exc))
            finally:
                self.store.release_feedback(job_id)
        finally:
            self._busy.release()

    def busy(self) -> bool:
        return self._busy.locked()


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    data_dir,
    synthetic_n: int = 120,
    pretrain_epochs: int = 2,
    seed: int = 0,
    holdout_fraction: float = 0.2,
    threshold: float = 0.5,
) -> FastAPI:
    runtime = ServiceRuntime(
        data_dir,
        synthetic_n=synthetic_n,
        pretrain_epochs=pretrain_epochs,
        seed=seed,
        holdout_fraction=holdout_fraction,
        threshold=threshold,
    )
    app = FastAPI(title="saliencytune feedback service", version="1.0")
    app.state.runtime = runtime
    png_root = (runtime.data_dir / "png").resolve()

    def _decode_upload(blob: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(blob)) as im:
                image = im.convert("RGB")
                h, w, _ = runtime.backend_for(runtime.active_checkpoint).input_shape
                if image.size != (w, h):
                    image = image.resize((w, h), Image.BILINEAR)
                return np.asarray(image, dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"malformed image: {exc}") from exc

    @app.get("/health")
    def health():
        return {"status": "ok", "active_checkpoint": runtime.active_checkpoint}

    @app.get("/spec")
    def spec():
        return JSONResponse(app.openapi())

    @app.get("/files/{path:path}")
    def files(path: str):
        target = (png_root / path).resolve()
        if not str(target).startswith(str(png_root)) or not target.is_file():
            raise HTTPException(status_code=404, detail="no such file")
        return FileResponse(target)

    @app.get("/samples")
    def samples(page: int = 1, page_size: int = 20):
        if page < 1 or page_size < 1:
            raise HTTPException(status_code=422, detail="page and page_size start at 1")
        ids = runtime.pool_ids
        start = (page - 1) * page_size
        items = [
            {
                "id": sid,
                "label": runtime.samples[sid].label,
                "has_mask": runtime.samples[sid].gt_mask is not None,
                "image_png": f"/files/samples/{sid}.png",
            }
            for sid in ids[start : start + page_size]
        ]
        return {"total": len(ids), "page": page, "page_size": page_size, "items": items}

    @app.post("/predict")
    async def predict(request: Request):
        content_type = request.headers.get("content-type", "")
        sample_id = None
        image = None
        requested_checkpoint = None
        if content_type.startswith("multipart/"):
            form = await request.form()
            sample_id = form.get("sample_id")
            requested_checkpoint = form.get("checkpoint_id")
            upload = form.get("image")
            if upload is not None:
                image = _decode_upload(await upload.read())
        else:
            try:
                payload = await request.json()
            except Exception:
                raise HTTPException(status_code=422, detail="expected JSON or multipart body")
            sample_id = payload.get("sample_id")
            requested_checkpoint = payload.get("checkpoint_id")

        if image is None:
            if sample_id is None:
                raise HTTPException(status_code=422, detail="give sample_id or an image upload")
            if sample_id not in runtime.samples:
                raise HTTPException(status_code=404, detail=f"unknown sample {sample_id}")
            image = runtime.samples[sample_id].image
            key = sample_id
        else:
            key = sample_id or f"upload_{uuid.uuid4().hex[:8]}"

        # pinning a checkpoint lets the client compare explanations across
        # fine-tunes without touching the active pointer
        checkpoint_id = requested_checkpoint or runtime.active_checkpoint
        try:
            backend = runtime.backend_for(checkpoint_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown checkpoint {checkpoint_id}")
        probs, sal = explain_image(backend, image)
        resolution = image.shape[:2]
        sal_img = (np.clip(upsample_saliency(sal, resolution), 0.0, 1.0) * 255).round().astype(np.uint8)
        mask = align_resolution(hard_threshold(sal, runtime.threshold), resolution)
        out_dir = runtime.data_dir / "png" / "pred"
        out_dir.mkdir(parents=True, exist_ok=True)
        sal_name = f"pred/{key}_{checkpoint_id}_saliency.png"
        mask_name = f"pred/{key}_{checkpoint_id}_mask.png"
        (runtime.data_dir / "png" / sal_name).write_bytes(_png_bytes(sal_img))
        (runtime.data_dir / "png" / mask_name).write_bytes(_png_bytes(mask.values * 255))
        predicted = int(np.argmax(probs))
        return {
            "sample_id": sample_id,
            "predicted_class": runtime.classes[predicted],
            "probabilities": [float(p) for p in probs],
            "classes": runtime.classes,
            "checkpoint_id": checkpoint_id,
            "saliency_png": f"/files/{sal_name}",
            "mask_png": f"/files/{mask_name}",
        }

    @app.post("/feedback", status_code=201)
    async def feedback(request: Request):
        content_type = request.headers.get("content-type", "")
        mask_blob = None
        if content_type.startswith("multipart/"):
            form = await request.form()
            sample_id = form.get("sample_id")
            corrected_label = form.get("corrected_label") or None
            upload = form.get("corrected_mask")
            if upload is not None:
                mask_blob = await upload.read()
        else:
            try:
                payload = await request.json()
            except Exception:
                raise HTTPException(status_code=422, detail="expected JSON or multipart body")
            sample_id = payload.get("sample_id")
            corrected_label = payload.get("corrected_label")

        if not sample_id or sample_id not in runtime.samples:
            raise HTTPException(status_code=404, detail=f"unknown sample {sample_id!r}")
        if sample_id not in set(runtime.pool_ids):
            raise HTTPException(
                status_code=422, detail="sample belongs to the held-out evaluation set"
            )
        if corrected_label is None and mask_blob is None:
            raise HTTPException(status_code=422, detail="give corrected_label, corrected_mask, or both")
        if corrected_label is not None and corrected_label not in runtime.classes:
            raise HTTPException(
                status_code=422,
                detail=f"unknown label {corrected_label!r}; classes are {runtime.classes}",
            )

        mask_path = None
        if mask_blob is not None:
            try:
                with Image.open(io.BytesIO(mask_blob)) as im:
                    arr = np.asarray(im.convert("L"))
            except (OSError, ValueError) as exc:
                raise HTTPException(status_code=422, detail=f"malformed mask: {exc}") from exc
            values = set(np.unique(arr).tolist())
            if not values <= {0, 255}:
                raise HTTPException(
                    status_code=422, detail="mask must be binary (pixel values 0 and 255 only)"
                )
            expected = runtime.samples[sample_id].image.shape[:2]
            if arr.shape != expected:
                raise HTTPException(
                    status_code=422,
                    detail=f"mask resolution {arr.shape} != image resolution {expected}",
                )
            mask_file = runtime.data_dir / "masks" / f"{uuid.uuid4().hex}.png"
            mask_file.write_bytes(_png_bytes(arr))
            mask_path = str(mask_file)

        feedback_id = runtime.store.add_feedback(
            sample_id, corrected_label, mask_path, source="human"
        )
        return {"feedback_id": feedback_id}

    @app.post("/finetune", status_code=202)
    async def start_finetune(request: Request):
        try:
            payload = await request.json()
        except Exception:
            payload = {}
        selector = payload.get("feedback_ids", "all-pending")
        overrides = payload.get("config", {})
        try:
            config = TrainingConfig.from_json({**TrainingConfig().to_json(), **overrides})
        except SaliencyTuneError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

        if selector == "all-pending":
            rows = runtime.store.pending_feedback()
        else:
            if not isinstance(selector, list) or not all(isinstance(i, int) for i in selector):
                raise HTTPException(
                    status_code=422, detail='feedback_ids must be "all-pending" or a list of ids'
                )
            rows = runtime.store.get_feedback(selector)
            if len(rows) != len(set(selector)):
                raise HTTPException(status_code=404, detail="unknown feedback id in batch")
            taken = [r["id"] for r in rows if r["consumed_by_job"] is not None]
            if taken:
                raise HTTPException(
                    status_code=422, detail=f"feedback already consumed by a job: {taken}"
                )
        if not rows:
            raise HTTPException(status_code=422, detail="no pending feedback to train on")

        job_id = runtime.try_start_job(rows, config)
        if job_id is None:
            raise HTTPException(status_code=409, detail="a fine-tune job is already in flight")
        return {"job_id": job_id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: int):
        job = runtime.store.get_job(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return job

    @app.get("/jobs")
    def list_jobs():
        return {"jobs": runtime.store.list_jobs()}

    @app.get("/checkpoints")
    def checkpoints():
        return {
            "active": runtime.active_checkpoint,
            "checkpoints": runtime.store.list_checkpoints(),
        }

    @app.post("/checkpoints/{checkpoint_id}/rollback")
    def rollback(checkpoint_id: str):
        if runtime.store.get_checkpoint(checkpoint_id) is None:
            raise HTTPException(status_code=404, detail=f"unknown checkpoint {checkpoint_id}")
        if runtime.busy():
            raise HTTPException(status_code=409, detail="cannot roll back while a job is in flight")
        runtime.store.set_meta(ACTIVE_KEY, checkpoint_id)
        return {"active": checkpoint_id}

    @app.get("/metrics/latest")
    def metrics_latest():
        jobs = [j for j in runtime.store.list_jobs() if j["status"] == "done"]
        if jobs:
            last = jobs[-1]
            return {
                "checkpoint_id": last["checkpoint_out"],
                "job_id": last["id"],
                "metrics": last["metrics_after"],
            }
        active = runtime.active_checkpoint
        stored = runtime.store.get_meta("metrics_" + active)
        if stored is None:
            backend = runtime.backend_for(active)
            report = evaluate(backend, runtime.holdout, runtime.threshold, runtime.classes)
            return {"checkpoint_id": active, "job_id": None, "metrics": report.to_json()}
        return {"checkpoint_id": active, "job_id": None, "metrics": json.loads(stored)}

    return app
