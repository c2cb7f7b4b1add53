"""
Context-Boost Localizer
=======================
HTTP surface of the localization toolkit:
- Landmark classification of query keypoints (full or inverted-file)
- PnP + RANSAC localization of query frames
- Retrieval and pose metrics
- CSV/Excel report export

The served model and map come from LOCALIZER_MODEL_PATH / LOCALIZER_MAP_PATH.
"""

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api.localization import router as localization_router
from app.core.config import APP_DESCRIPTION, APP_NAME, APP_VERSION, MATCHERS, MODEL_PATH
from app.core.logging import setup_logging

setup_logging()

# ============================================================
# APP INITIALIZATION
# ============================================================

app = FastAPI(
    title=APP_NAME,
    description=APP_DESCRIPTION,
    version=APP_VERSION,
    docs_url="/docs",
    redoc_url="/redoc",
    openapi_tags=[
        {
            "name": "Localization",
            "description": "Match, localize, score and export"
        }
    ]
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(localization_router)


# ============================================================
# API ENDPOINTS
# ============================================================

@app.get("/health", tags=["Health"])
def health():
    """Health check endpoint"""
    return {"status": "healthy"}


@app.get("/api", tags=["Health"])
def api_info():
    """API health check and info"""
    return {
        "status": "ok",
        "name": APP_NAME,
        "version": APP_VERSION,
        "docs": "/docs",
        "model_configured": bool(MODEL_PATH),
    }


@app.get("/info", tags=["Health"])
def info():
    """API information and capabilities"""
    return {
        "name": APP_NAME,
        "version": APP_VERSION,
        "description": APP_DESCRIPTION,
        "capabilities": {
            "match": "Rank landmark candidates for query keypoints",
            "localize": "Camera pose from accepted matches with P3P + RANSAC",
            "retrieval_metrics": "Precision@1, MRR and miss rate vs false positives per query",
            "pose_metrics": "Pose precision-recall curve and AUC",
            "export": "Export report rows to CSV and Excel",
        },
        "matchers": MATCHERS,
        "endpoints": {
            "match": "POST /localization/match",
            "localize": "POST /localization/localize",
            "retrieval_metrics": "POST /metrics/retrieval",
            "pose_metrics": "POST /metrics/pose",
            "export_csv": "POST /export/csv",
            "export_excel": "POST /export/excel",
        }
    }
