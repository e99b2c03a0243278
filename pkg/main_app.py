# main_app.py
import importlib
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

load_dotenv()
logging.basicConfig(
    level=os.getenv("CONVASR_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger("main_app")

# Agent modules are imported by bare name, as uvicorn does when run from their directory
current_dir = Path(__file__).resolve().parent
for path in (current_dir, current_dir / "agents", current_dir / "orchestrator"):
    if str(path) not in sys.path:
        sys.path.append(str(path))

# (module, mount path, key in "/", title, endpoint descriptions)
SERVICES = [
    ("stt_agent", "/stt", "stt_agent", "STT Agent (Speech-to-Text)",
     ["POST /transcribe_audio - Transcribe WAV or raw PCM audio with the local model"]),
    ("scoring_agent", "/scoring", "scoring_agent", "Scoring Agent (Word Error Rate)",
     ["POST /score - Substitutions, insertions, deletions and WER"]),
    ("orchestrator", "/orchestrator", "orchestrator", "Orchestrator (Main Logic)",
     ["POST /evaluate_voice_query/ - Transcribe audio and score it against an optional reference"]),
]


def _load_subapp(module_name: str) -> FastAPI:
    """Import a sub-application; a broken agent is mounted empty so the others still serve."""
    try:
        subapp = importlib.import_module(module_name).app
        logger.info("%s imported successfully", module_name)
        return subapp
    except Exception as e:
        logger.error("Failed to import %s: %s", module_name, e)
        return FastAPI()


app = FastAPI(
    title="convasr",
    description="Speech recognition and scoring agents on one server",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

for module_name, mount_path, _, _, _ in SERVICES:
    app.mount(mount_path, _load_subapp(module_name))


@app.get("/")
async def root():
    """Service name, version and mount points."""
    return {
        "message": "convasr speech recognition API",
        "version": "1.0.0",
        "endpoints": {key: mount_path for _, mount_path, key, _, _ in SERVICES},
        "health_check": "/health"
    }


@app.get("/health")
async def health_check():
    return {"status": "healthy", "message": "All services are running"}


@app.get("/endpoints")
async def list_endpoints():
    return {
        title: {"base_path": mount_path, "endpoints": endpoints}
        for _, mount_path, _, title, endpoints in SERVICES
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "main_app:app",
        host="0.0.0.0",
        port=8000,
        reload=True,
        reload_includes=["*.py"],
        reload_dirs=["agents", "orchestrator", "convasr"]
    )
