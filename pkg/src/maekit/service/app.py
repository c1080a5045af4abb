"""FastAPI service wrapping the maekit workflows.

One process serves pretraining, probing, segmentation, reconstruction,
gradient checking, and synthetic data generation. Jobs run synchronously
and write their outputs to the requested directories; responses carry the
paths and summary numbers. Domain errors map to structured JSON bodies:
``{"error": <kind>, "detail": <message>}``.
"""

from __future__ import annotations

from dataclasses import asdict

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, workflows
from ..errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    IndexRangeError,
    MaekitError,
    NumericError,
    UnsupportedConfigError,
)
from ..workflows import _arch_config_values
from ..model import PRESETS
from . import schemas

_ERROR_KINDS = [
    (ConfigError, 400, "config"),
    (DataError, 400, "data"),
    (DimensionError, 400, "dimension"),
    (UnsupportedConfigError, 400, "unsupported"),
    (IndexRangeError, 400, "index"),
    (CheckpointError, 400, "checkpoint"),
    (ContractError, 400, "contract"),
    (NumericError, 500, "numeric"),
]


def create_app() -> FastAPI:
    app = FastAPI(title="maekit", version=__version__)

    @app.exception_handler(MaekitError)
    def _maekit_error(_request: Request, exc: MaekitError) -> JSONResponse:
        for cls, status, kind in _ERROR_KINDS:
            if isinstance(exc, cls):
                return JSONResponse(status_code=status,
                                    content={"error": kind, "detail": str(exc)})
        return JSONResponse(status_code=500,
                            content={"error": "internal", "detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/presets")
    def presets():
        return {name: _arch_config_values(cfg) for name, cfg in PRESETS.items()}

    @app.post("/pretrain", response_model=schemas.PretrainResponse)
    def pretrain(req: schemas.PretrainRequest):
        outcome = workflows.run_pretrain(
            data_dir=req.data_dir, out_dir=req.out_dir, preset=req.preset,
            arch_overrides=req.arch.model_dump() if req.arch else None,
            mask_ratio=req.mask_ratio, epochs=req.epochs,
            batch_size=req.batch_size, base_lr=req.base_lr,
            weight_decay=req.weight_decay, betas=(req.beta1, req.beta2),
            warmup_frac=req.warmup_frac, seed=req.seed,
        )
        return asdict(outcome)

    @app.post("/probe", response_model=schemas.HeadResponse)
    def probe(req: schemas.ProbeRequest):
        outcome = workflows.run_probe(
            ckpt=req.ckpt, data_dir=req.data_dir, num_classes=req.num_classes,
            out_dir=req.out_dir, mode=req.mode, epochs=req.epochs,
            batch_size=req.batch_size, base_lr=req.base_lr, seed=req.seed,
            split_ratios=req.split_ratios, test_data_dir=req.test_data_dir,
        )
        return asdict(outcome)

    @app.post("/segment", response_model=schemas.HeadResponse)
    def segment(req: schemas.SegmentRequest):
        outcome = workflows.run_segment(
            ckpt=req.ckpt, data_dir=req.data_dir, out_dir=req.out_dir,
            mode=req.mode, epochs=req.epochs, batch_size=req.batch_size,
            base_lr=req.base_lr, seed=req.seed, split_ratios=req.split_ratios,
            test_data_dir=req.test_data_dir,
        )
        return asdict(outcome)

    @app.post("/reconstruct", response_model=schemas.ReconstructResponse)
    def reconstruct(req: schemas.ReconstructRequest):
        outcome = workflows.run_reconstruct(
            ckpt=req.ckpt, image_path=req.image, out_dir=req.out_dir,
            mask_ratio=req.mask_ratio, seed=req.seed,
        )
        return asdict(outcome)

    @app.post("/gradcheck", response_model=schemas.GradcheckResponse)
    def gradcheck(req: schemas.GradcheckRequest):
        outcome = workflows.run_gradcheck(include_corrupted=req.include_corrupted)
        return asdict(outcome)

    @app.post("/synthetic", response_model=schemas.SyntheticResponse)
    def synthetic(req: schemas.SyntheticRequest):
        outcome = workflows.run_gen_synthetic(
            kind=req.kind, n=req.n, size=req.size, seed=req.seed,
            out_dir=req.out_dir,
        )
        return asdict(outcome)

    return app


app = create_app()
