"""Per-step metrics rows, CSV/JSON export and history persistence."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

TASKS = ("dino", "part", "attribute")
EAD_PAIRS = (("dino", "part"), ("dino", "attribute"), ("part", "attribute"))
LOSS_COLUMNS = ("dino", "part", "attribute", "balancing", "total")


@dataclass
class MetricsRow:
    step: int
    dino: float
    part: float
    attribute: float
    balancing: float
    total: float
    cv2_importance: list[float]  # one per stage
    gcr: float = math.nan
    ead: dict[str, float] = field(default_factory=dict)  # "a|b" -> value
    wall_time: float = 0.0


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else format(float(x), ".17g")


def csv_header(num_stages: int) -> list[str]:
    return (
        ["step", *LOSS_COLUMNS]
        + [f"cv2_importance_s{i}" for i in range(num_stages)]
        + ["gcr"]
        + [f"ead_{a}_{b}" for a, b in EAD_PAIRS]
    )


def row_values(row: MetricsRow) -> list[float]:
    return (
        [row.step, *(getattr(row, c) for c in LOSS_COLUMNS)]
        + list(row.cv2_importance)
        + [row.gcr]
        + [row.ead.get(f"{a}|{b}", math.nan) for a, b in EAD_PAIRS]
    )


def export_metrics(history: list[MetricsRow], out_dir) -> tuple[Path, Path]:
    """Write metrics.csv (wall time excluded so runs compare byte-for-byte) and summary.json."""
    if not history:
        raise ValueError("empty metrics history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = [r.step for r in history]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("metrics steps must increase strictly")
    header = csv_header(len(history[0].cv2_importance))
    lines = [",".join(header)]
    for r in history:
        vals = row_values(r)
        lines.append(",".join([str(int(vals[0]))] + [_fmt(v) for v in vals[1:]]))
    csv_path = out_dir / "metrics.csv"
    csv_path.write_text("\n".join(lines) + "\n")

    summary = {}
    for j, name in enumerate(header[1:], start=1):
        col = [row_values(r)[j] for r in history]
        finite = [v for v in col if not math.isnan(v)]
        summary[name] = {
            "final": None if math.isnan(col[-1]) else col[-1],
            "min": min(finite) if finite else None,
            "max": max(finite) if finite else None,
        }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps({"rows": len(history), "columns": summary}, indent=1, sort_keys=False) + "\n")
    return csv_path, summary_path


def row_to_record(r: MetricsRow, with_time: bool = True) -> dict:
    d = asdict(r)
    d["gcr"] = None if math.isnan(r.gcr) else r.gcr
    if not with_time:
        del d["wall_time"]
    return d


def row_from_record(d: dict) -> MetricsRow:
    return MetricsRow(**{**d, "gcr": math.nan if d["gcr"] is None else d["gcr"]})


def save_history(history: list[MetricsRow], path) -> None:
    Path(path).write_text(json.dumps([row_to_record(r) for r in history]) + "\n")


def load_history(path) -> list[MetricsRow]:
    return [row_from_record(d) for d in json.loads(Path(path).read_text())]
