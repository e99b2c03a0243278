# /agents/scoring_agent.py
import logging
from typing import List

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from convasr.errors import ContractError
from convasr.text import align, corpus_wer

logger = logging.getLogger(__name__)

app = FastAPI()


class ScoreRequest(BaseModel):
    references: List[str]
    hypotheses: List[str]


class UtteranceScore(BaseModel):
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int


class ScoreResponse(BaseModel):
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int
    wer: float
    utterances: List[UtteranceScore]


@app.post("/score", response_model=ScoreResponse)
async def score_transcripts(request: ScoreRequest):
    if len(request.references) != len(request.hypotheses):
        raise HTTPException(
            status_code=400,
            detail=f"Got {len(request.references)} references but {len(request.hypotheses)} hypotheses.",
        )
    pairs = list(zip(request.references, request.hypotheses))
    try:
        total = corpus_wer(pairs)
    except ContractError as e:
        raise HTTPException(status_code=400, detail=f"Scoring Error: {e}")
    logger.info("Scoring Agent: %d utterance(s), %s", len(pairs), total.summary())
    return ScoreResponse(
        substitutions=total.substitutions,
        insertions=total.insertions,
        deletions=total.deletions,
        ref_words=total.ref_words,
        wer=total.rate,
        utterances=[UtteranceScore(**align(ref, hyp).model_dump()) for ref, hyp in pairs],
    )
