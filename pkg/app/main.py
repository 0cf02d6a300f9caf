"""
FastAPI stegonet service
Evaluates, measures and recovers model files that already sit on the server.
"""
from pathlib import Path
from typing import List, Literal

import aiofiles
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from app import __version__
from app.config import get_settings
from app.errors import ConfigError, IntegrityError, StegoNetError
from app.log import log_info
from app.models.graph import ModelGraph
from app.models.schemas import CapacityResult, EvaluateResult, TaskSpec
from app.models.serialization import dumps_model, loads_model
from app.recovery import recover
from app.services import capacity, evaluate_model
from app.sideinfo.keyed import StegoKey

app = FastAPI(
    title="StegoNet API",
    description="Evaluate, measure and recover disguised neural network models",
    version=__version__,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class EvaluateRequest(BaseModel):
    model_path: str
    task: TaskSpec
    split: Literal["train", "test"] = "test"


class CapacityRequest(BaseModel):
    secret_path: str
    stego_path: str


class RecoverRequest(BaseModel):
    stego_path: str
    key: str
    # relative to the configured output directory
    out_path: str


class RecoverResponse(BaseModel):
    out_path: str
    num_params: int
    layers: List[str]


def http_error(e: StegoNetError) -> HTTPException:
    if isinstance(e, ConfigError):
        status = 422
    elif isinstance(e, IntegrityError):
        status = 400
    else:
        status = 500
    return HTTPException(status_code=status, detail=e.to_dict())


async def read_model_file(path: str) -> ModelGraph:
    try:
        async with aiofiles.open(path, "rb") as f:
            blob = await f.read()
    except OSError as e:
        raise ConfigError(f"cannot read model file {path}: {e}")
    return loads_model(blob)


def output_path(name: str) -> Path:
    root = Path(get_settings().output_dir).resolve()
    path = (root / name).resolve()
    if path == root or not path.is_relative_to(root):
        raise ConfigError(f"out_path {name!r} is outside the output directory")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create {path.parent}: {e}")
    return path


async def write_model_file(model: ModelGraph, path: Path):
    try:
        async with aiofiles.open(path, "wb") as f:
            await f.write(dumps_model(model))
    except OSError as e:
        raise ConfigError(f"cannot write model file {path}: {e}")


@app.get("/")
async def root():
    return {
        "message": "StegoNet API",
        "version": __version__,
        "endpoints": {
            "evaluate": "/evaluate (POST)",
            "capacity": "/capacity (POST)",
            "recover": "/recover (POST)",
        }
    }


@app.post("/evaluate", response_model=EvaluateResult)
async def evaluate_endpoint(request: EvaluateRequest):
    """
    Metric of a model file on a task's split.
    """
    try:
        model = await read_model_file(request.model_path)
        return evaluate_model(model, request.task, request.split)
    except StegoNetError as e:
        raise http_error(e)


@app.post("/capacity", response_model=CapacityResult)
async def capacity_endpoint(request: CapacityRequest):
    """
    Expansion rate of a stego model file relative to a secret model file.
    """
    try:
        secret = await read_model_file(request.secret_path)
        stego = await read_model_file(request.stego_path)
        return capacity(secret, stego)
    except StegoNetError as e:
        raise http_error(e)


@app.post("/recover", response_model=RecoverResponse)
async def recover_endpoint(request: RecoverRequest):
    """
    Recover the secret model hidden in a stego model file and write it below
    the configured output directory.
    """
    try:
        out = output_path(request.out_path)
        stego = await read_model_file(request.stego_path)
        secret = recover(stego, StegoKey.parse(request.key))
        await write_model_file(secret, out)
    except StegoNetError as e:
        raise http_error(e)
    log_info(f"recovered {request.stego_path} -> {out}")
    return RecoverResponse(
        out_path=str(out),
        num_params=secret.num_params,
        layers=[spec.kind for spec in secret.layers],
    )


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy"}
