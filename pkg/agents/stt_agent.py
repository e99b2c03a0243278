# /agents/stt_agent.py
import logging
import os
from typing import Optional

from dotenv import load_dotenv
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from pydantic import BaseModel

from convasr.decode import Recognizer
from convasr.errors import ConvAsrError, InputError

load_dotenv()

logger = logging.getLogger(__name__)

app = FastAPI()

CONVASR_CHECKPOINT = os.getenv("CONVASR_CHECKPOINT")
CONVASR_VOCAB = os.getenv("CONVASR_VOCAB")
CONVASR_BEAM = int(os.getenv("CONVASR_BEAM", "5"))
recognizer: Optional[Recognizer] = None

if not CONVASR_CHECKPOINT or not CONVASR_VOCAB:
    logger.warning("STT Agent: CONVASR_CHECKPOINT or CONVASR_VOCAB not set. STT Agent will not function.")
else:
    try:
        recognizer = Recognizer.from_files(CONVASR_CHECKPOINT, CONVASR_VOCAB, beam=CONVASR_BEAM)
        logger.info("STT Agent: recognizer loaded from %s", CONVASR_CHECKPOINT)
    except ConvAsrError as e:
        logger.error("STT Agent: error loading recognizer: %s", e)
        recognizer = None


class TranscriptionResponse(BaseModel):
    transcribed_text: str
    score: float
    finished: bool


@app.post("/transcribe_audio", response_model=TranscriptionResponse)
async def transcribe_audio_file(
    audio_file: UploadFile = File(...),
    raw_pcm: bool = Query(False, description="headerless 16-bit little-endian PCM at the model's sample rate"),
):
    if recognizer is None:
        raise HTTPException(status_code=503, detail="STT service not available: no model loaded.")

    content_type = audio_file.content_type or ""
    if not (content_type.startswith("audio/") or content_type == "application/octet-stream"):
        raise HTTPException(status_code=400, detail="Invalid file type. Please upload an audio file.")

    try:
        audio_bytes = await audio_file.read()
        logger.info("STT Agent: transcribing approx %d bytes (beam %d)", len(audio_bytes), recognizer.beam)
        text, best = recognizer.transcribe_audio(audio_bytes, raw_pcm=raw_pcm)
        if not best.finished:
            logger.warning("STT Agent: search hit the length limit before end of sentence")
        logger.info("STT Agent: transcript '%s' (score %.3f)", text, best.score)
        return TranscriptionResponse(transcribed_text=text, score=best.score, finished=best.finished)
    except InputError as e:
        raise HTTPException(status_code=400, detail=f"STT Error ({type(e).__name__}): {e}")
    except ConvAsrError as e:
        logger.error("STT Agent: error during transcription: %s - %s", type(e).__name__, e)
        raise HTTPException(status_code=500, detail=f"STT Error ({type(e).__name__}): {e}")
