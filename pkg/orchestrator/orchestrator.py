import logging
import os
from typing import Optional

import httpx
from dotenv import load_dotenv
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from pydantic import BaseModel

load_dotenv()

logger = logging.getLogger(__name__)

app = FastAPI()

# Agents are mounted on the same server under different prefixes
BASE_URL = os.getenv("CONVASR_BASE_URL", "http://localhost:8000")
STT_AGENT_URL = f"{BASE_URL}/stt"
SCORING_AGENT_URL = f"{BASE_URL}/scoring"


class VoiceEvaluationResponse(BaseModel):
    transcribed_text: str
    score: float
    finished: bool
    reference_text: Optional[str] = None
    wer: Optional[float] = None
    substitutions: Optional[int] = None
    insertions: Optional[int] = None
    deletions: Optional[int] = None


def make_client() -> httpx.AsyncClient:
    return httpx.AsyncClient(timeout=45.0)


async def transcribe(audio_file: UploadFile, raw_pcm: bool, client: httpx.AsyncClient) -> dict:
    files_for_stt = {"audio_file": (audio_file.filename, await audio_file.read(), audio_file.content_type)}
    response_stt = await client.post(
        f"{STT_AGENT_URL}/transcribe_audio", files=files_for_stt, params={"raw_pcm": str(raw_pcm).lower()}
    )
    response_stt.raise_for_status()
    return response_stt.json()


async def score(reference_text: str, transcribed_text: str, client: httpx.AsyncClient) -> dict:
    payload = {"references": [reference_text], "hypotheses": [transcribed_text]}
    response_scoring = await client.post(f"{SCORING_AGENT_URL}/score", json=payload)
    response_scoring.raise_for_status()
    return response_scoring.json()


@app.post("/evaluate_voice_query/", response_model=VoiceEvaluationResponse)
async def evaluate_voice_query_endpoint(
    audio_file: UploadFile = File(...),
    reference_text: Optional[str] = Form(None),
    raw_pcm: bool = Form(False),
):
    if not audio_file:
        raise HTTPException(status_code=400, detail="No audio file provided.")

    async with make_client() as client:
        try:
            stt_data = await transcribe(audio_file, raw_pcm, client)
            logger.info("Orchestrator: transcript '%s'", stt_data.get("transcribed_text"))
        except httpx.HTTPStatusError as exc_stt:
            detail = exc_stt.response.json().get("detail", exc_stt.response.text)
            raise HTTPException(status_code=exc_stt.response.status_code, detail=f"STT Agent Error: {detail}")
        except httpx.HTTPError as e_stt:
            raise HTTPException(status_code=502, detail=f"STT processing failed: {str(e_stt)}")

        result = VoiceEvaluationResponse(**stt_data)
        if not reference_text or not reference_text.strip():
            return result

        try:
            score_data = await score(reference_text, result.transcribed_text, client)
        except httpx.HTTPStatusError as exc_score:
            detail = exc_score.response.json().get("detail", exc_score.response.text)
            raise HTTPException(status_code=exc_score.response.status_code, detail=f"Scoring Agent Error: {detail}")
        except httpx.HTTPError as e_score:
            raise HTTPException(status_code=502, detail=f"Scoring failed: {str(e_score)}")

    logger.info("Orchestrator: WER %.4f against reference", score_data["wer"])
    return result.model_copy(update={
        "reference_text": reference_text,
        "wer": score_data["wer"],
        "substitutions": score_data["substitutions"],
        "insertions": score_data["insertions"],
        "deletions": score_data["deletions"],
    })
