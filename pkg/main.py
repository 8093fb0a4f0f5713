import importlib
import json
import logging
import os
from pathlib import Path

import dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.env import settings

dotenv.load_dotenv()

# Configure logging
logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
logger = logging.getLogger(__name__)

ROUTERS_FILE = Path(__file__).parent / "routers.json"


def router_names() -> list[str]:
    with ROUTERS_FILE.open(encoding="utf-8") as fh:
        return list(json.load(fh)["routers"])


def create_app() -> FastAPI:
    app = FastAPI(title="hdx-agreement")

    app.add_middleware(
        CORSMiddleware,
        allow_origins=os.getenv("HDX_ALLOWED_ORIGINS", "http://localhost:5173").split(","),
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    for name in router_names():
        module = importlib.import_module(f"app.apis.{name}")
        app.include_router(module.router, prefix="/api")
        logger.info(f"Mounted router {name}")

    @app.get("/")
    async def root():
        logger.info("Root endpoint accessed")
        return {"message": "Agreement testing on simplicial complexes", "routers": router_names()}

    return app


app = create_app()

if __name__ == "__main__":
    import uvicorn
    port = int(os.getenv("PORT", 8000))
    uvicorn.run(app, host="0.0.0.0", port=port)
