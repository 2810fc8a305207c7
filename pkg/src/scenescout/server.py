"""Operator-facing HTTP/WebSocket API over a StationCore.

GET /queue/next returns the oldest pending review item (image as
base64); POST /decision applies the operator's verdict; GET
/mission/status reports queue and training state; WS /events streams
station events as they are persisted.
"""

from __future__ import annotations

import asyncio
import base64
import threading

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, Field

from .features import Box
from .station import INTERESTING, UNINTERESTING, StationCore


class DecisionBox(BaseModel):
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_name: str = Field(alias="class")

    model_config = {"populate_by_name": True}


class DecisionRequest(BaseModel):
    frame_id: str
    decision: str
    boxes: list[DecisionBox] = []


def create_app(core: StationCore, clock=None) -> FastAPI:
    app = FastAPI(title="scenescout station")
    lock = threading.Lock()
    subscribers: list[asyncio.Queue] = []
    loop_holder: dict = {}

    def now() -> float:
        import time

        return clock() if clock else time.monotonic()

    def on_event(event: dict) -> None:
        loop = loop_holder.get("loop")
        if loop is None:
            return
        for q in list(subscribers):
            loop.call_soon_threadsafe(q.put_nowait, event)

    core.add_listener(on_event)

    @app.get("/queue/next")
    def queue_next():
        with lock:
            item = core.next_pending()
            if item is None:
                raise HTTPException(status_code=404, detail="queue is empty")
            return {
                "frame_id": item.frame_id,
                "score": item.score,
                "received_at": item.received_at,
                "image_base64": base64.b64encode(item.image).decode("ascii"),
            }

    @app.post("/decision")
    def post_decision(req: DecisionRequest):
        if req.decision not in (INTERESTING, UNINTERESTING):
            raise HTTPException(status_code=422, detail="unknown decision")
        boxes = []
        for b in req.boxes:
            try:
                boxes.append((Box(b.x_min, b.y_min, b.x_max, b.y_max), b.class_name))
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        with lock:
            item = core.items.get(req.frame_id)
            if item is not None and item.status == req.decision:
                return {"status": "ok", "idempotent": True}  # duplicate POST
            try:
                core.operator_decision(now(), req.frame_id, req.decision, boxes or None)
            except KeyError as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {"status": "ok"}

    @app.get("/mission/status")
    def mission_status():
        with lock:
            return core.status()

    @app.websocket("/events")
    async def events(ws: WebSocket):
        await ws.accept()
        loop_holder["loop"] = asyncio.get_running_loop()
        q: asyncio.Queue = asyncio.Queue()
        subscribers.append(q)
        try:
            while True:
                event = await q.get()
                await ws.send_json(event)
        except WebSocketDisconnect:
            pass
        finally:
            subscribers.remove(q)

    return app
