"""
Export Service
==============
Report rows for correspondences, poses, the training log and every metric,
written as CSV, plus an Excel workbook with one styled sheet per report.
"""

import csv
import io
from dataclasses import asdict
from datetime import datetime
from pathlib import Path

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from app.services.boosting import TrainingLogRow
from app.services.matching import Correspondence2D3D
from app.services.metrics import MissRatePoint, PoseRecord, PRCurve, RetrievalRecord, RuntimeRow
from app.services.pose import pose_quaternion

CORRESPONDENCE_FIELDS = ["frame_id", "keypoint_idx", "landmark_id", "score", "matcher"]
POSE_FIELDS = [
    "frame_id", "success", "tx", "ty", "tz", "qw", "qx", "qy", "qz",
    "inliers", "total", "inlier_ratio", "match_ms", "ransac_ms",
]
TRAINING_LOG_FIELDS = [
    "round", "J", "heldout_precision_at_1", "sharing_set_size", "chosen_feature_kind", "stump_cost",
]
RETRIEVAL_FIELDS = ["matcher", "frame_id", "keypoint_idx", "true_landmark", "rank", "ranked"]


# ============================================================
# ROWS
# ============================================================

def correspondence_rows(matches: list[Correspondence2D3D]) -> list[dict]:
    return [
        {
            "frame_id": m.frame_id,
            "keypoint_idx": m.keypoint_index,
            "landmark_id": m.landmark_id,
            "score": m.score,
            "matcher": m.matcher,
        }
        for m in sorted(matches, key=lambda m: (m.matcher, m.frame_id, m.keypoint_index))
    ]


def pose_rows(records: list[PoseRecord]) -> list[dict]:
    """One row per frame; pose columns stay empty when localization failed."""
    rows = []
    for r in sorted(records, key=lambda r: r.frame_id):
        row = {"frame_id": r.frame_id, "success": int(r.estimate is not None)}
        if r.estimate is not None:
            tx, ty, tz = (float(x) for x in r.estimate.translation)
            qw, qx, qy, qz = pose_quaternion(r.estimate)
            row.update(tx=tx, ty=ty, tz=tz, qw=qw, qx=qx, qy=qy, qz=qz)
        else:
            row.update({k: "" for k in ("tx", "ty", "tz", "qw", "qx", "qy", "qz")})
        row.update(
            inliers=r.inliers,
            total=r.correspondences,
            inlier_ratio=r.inlier_ratio,
            match_ms=r.match_ms,
            ransac_ms=r.ransac_ms,
        )
        rows.append(row)
    return rows


def training_log_rows(log: list[TrainingLogRow]) -> list[dict]:
    rows = []
    for entry in log:
        row = asdict(entry)
        if row["heldout_precision_at_1"] is None:
            row["heldout_precision_at_1"] = ""
        rows.append(row)
    return rows


def retrieval_rows(records: list[RetrievalRecord]) -> list[dict]:
    """Per-query ranks; ``ranked`` is the space-separated candidate list (-1 = background)."""
    return [
        {
            "matcher": r.matcher,
            "frame_id": r.frame_id,
            "keypoint_idx": r.keypoint_index,
            "true_landmark": r.true_landmark,
            "rank": r.rank or 0,
            "ranked": " ".join(str(c) for c in r.ranked),
        }
        for r in records
    ]


def miss_rate_rows(curves: dict[str, list[MissRatePoint]]) -> list[dict]:
    return [
        {"matcher": matcher, "budget": p.budget, "fppq": p.fppq, "miss_rate": p.miss_rate}
        for matcher, curve in curves.items()
        for p in curve
    ]


def pr_rows(curves: dict[str, PRCurve]) -> list[dict]:
    return [
        {"matcher": matcher, "threshold": p.threshold, "precision": p.precision, "recall": p.recall}
        for matcher, curve in curves.items()
        for p in curve.points
    ]


def runtime_rows(rows: list[RuntimeRow]) -> list[dict]:
    return [asdict(r) for r in rows]


# ============================================================
# CSV
# ============================================================

def export_to_csv(rows: list[dict], fieldnames: list[str] | None = None) -> str:
    """
    Render rows as CSV text.

    Args:
        rows: Row dictionaries
        fieldnames: Column order; sorted union of the row keys when omitted

    Returns:
        CSV string with ``\\n`` line endings, empty when there is nothing to write
    """
    if not rows and not fieldnames:
        return ""
    if fieldnames is None:
        keys = set()
        for row in rows:
            keys.update(row.keys())
        fieldnames = sorted(keys)

    output = io.StringIO()
    writer = csv.DictWriter(output, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return output.getvalue()


def write_csv(path: str | Path, rows: list[dict], fieldnames: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(export_to_csv(rows, fieldnames), encoding="utf-8")
    return path


# ============================================================
# EXCEL
# ============================================================

def export_to_excel(sheets: dict[str, list[dict]], title: str = "Localization Report") -> bytes:
    """
    Excel workbook with one formatted sheet per report.

    Args:
        sheets: Sheet name to rows; names longer than 31 characters are cut
        title: Title written above every table

    Returns:
        Excel file bytes
    """
    wb = Workbook()
    wb.remove(wb.active)

    header_font = Font(bold=True, color="FFFFFF")
    header_fill = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
    header_alignment = Alignment(horizontal="center", vertical="center")
    thin_border = Border(
        left=Side(style="thin"),
        right=Side(style="thin"),
        top=Side(style="thin"),
        bottom=Side(style="thin"),
    )

    if not sheets:
        ws = wb.create_sheet(title="Report")
        ws["A1"] = "No reports to export"

    for name, rows in sheets.items():
        ws = wb.create_sheet(title=name[:31])
        if not rows:
            ws["A1"] = f"{name}: no rows"
            continue
        headers = list(rows[0].keys())

        ws["A1"] = f"{title} - {name}"
        ws["A1"].font = Font(bold=True, size=16)
        ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=max(len(headers), 1))
        ws["A2"] = f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}"
        ws["A2"].font = Font(italic=True, color="666666")

        header_row = 4
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=header_row, column=col, value=header.replace("_", " ").title())
            cell.font = header_font
            cell.fill = header_fill
            cell.alignment = header_alignment
            cell.border = thin_border

        for row_idx, row in enumerate(rows, header_row + 1):
            for col_idx, header in enumerate(headers, 1):
                value = row.get(header, "")
                cell = ws.cell(row=row_idx, column=col_idx, value=value)
                cell.border = thin_border
                if isinstance(value, float):
                    cell.number_format = "0.0000"
                    cell.alignment = Alignment(horizontal="right")

        for col in range(1, len(headers) + 1):
            longest = max(
                (len(str(ws.cell(row=r, column=col).value or "")) for r in range(header_row, header_row + len(rows) + 1)),
                default=0,
            )
            ws.column_dimensions[get_column_letter(col)].width = min(longest + 2, 30)

    output = io.BytesIO()
    wb.save(output)
    output.seek(0)
    return output.getvalue()
