"""
Report Service
Writes and reads the ssreport/1 text report and its CSV tables

Report layout:
    # ssreport/1
    key=value header lines (seed, tau_test, target_tpr, id_accuracy)
    detector.<score>.lambda / detector.<score>.target_tpr records
    [results] and [timing] sections holding CSV tables; timing rows are
    wall-clock measurements and are not reproducible
"""
import io
import logging
from pathlib import Path
from typing import Dict, List

import pandas as pd

from app.core.config import settings
from app.core.errors import MalformedHeaderError
from app.schemas.detector import CalibratedDetector
from app.schemas.report import DetectionReport, OodResult, ScoreHistogram, SweepRow, TimingStats

logger = logging.getLogger(__name__)

REPORT_FILE = "report.txt"
RESULTS_CSV = "results.csv"
TIMING_CSV = "timing.csv"
SWEEP_CSV = "sweep.csv"
HISTOGRAM_CSV = "histograms.csv"

RESULT_COLUMNS = ["score", "dataset", "auroc", "fpr_at_95"]
TIMING_COLUMNS = ["score", "pool_size", "mean_us", "std_us", "median_us", "samples", "repeats"]

_HEADER_KEYS = ("seed", "tau_test", "target_tpr", "id_accuracy")


def _csv_text(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")


def results_frame(results: List[OodResult]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in results], columns=RESULT_COLUMNS)


def timing_frame(timing: List[TimingStats]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in timing], columns=TIMING_COLUMNS)


def sweep_frame(rows: List[SweepRow]) -> pd.DataFrame:
    """One row per grid temperature with the mean AUROC and one column per OOD set"""
    records = []
    for row in rows:
        record = {"tau": row.tau, "auroc": row.auroc}
        record.update({f"auroc_{name}": value for name, value in row.per_dataset.items()})
        records.append(record)
    return pd.DataFrame(records)


def histogram_frame(histograms: List[ScoreHistogram]) -> pd.DataFrame:
    """Long format: one row per (score, dataset, bin)"""
    records = []
    for hist in histograms:
        for index, (id_count, ood_count) in enumerate(zip(hist.id_counts, hist.ood_counts)):
            records.append({
                "score": hist.score,
                "dataset": hist.dataset,
                "bin": index,
                "left": hist.edges[index],
                "right": hist.edges[index + 1],
                "id_count": id_count,
                "ood_count": ood_count,
            })
    return pd.DataFrame(records, columns=["score", "dataset", "bin", "left", "right", "id_count", "ood_count"])


def render_report(report: DetectionReport) -> str:
    lines = [f"# {report.schema_tag}"]
    lines += [f"{key}={getattr(report, key)!r}" for key in _HEADER_KEYS]
    text = "\n".join(lines) + "\n"
    text += "".join(detector.to_record() for detector in report.detectors)
    text += "[results]\n" + _csv_text(results_frame(report.results))
    if report.timing:
        text += "[timing]\n" + _csv_text(timing_frame(report.timing))
    return text


def write_report(report: DetectionReport, directory) -> Dict[str, Path]:
    """Write report.txt plus the CSV tables that have rows; returns the written paths"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = {}

    path = directory / REPORT_FILE
    path.write_text(render_report(report), encoding="utf-8")
    written["report"] = path

    path = directory / RESULTS_CSV
    path.write_text(_csv_text(results_frame(report.results)), encoding="utf-8")
    written["results"] = path

    if report.histograms:
        path = directory / HISTOGRAM_CSV
        path.write_text(_csv_text(histogram_frame(report.histograms)), encoding="utf-8")
        written["histograms"] = path

    if report.sweep:
        written["sweep"] = write_sweep(report.sweep, directory)
    if report.timing:
        written["timing"] = write_timing(report.timing, directory)

    logger.info(f"Report written to {directory}")
    return written


def write_sweep(rows: List[SweepRow], directory, chosen_tau: float | None = None) -> Path:
    """sweep.csv; the corruption-selected temperature, when given, is a trailing comment line"""
    path = Path(directory) / SWEEP_CSV
    path.parent.mkdir(parents=True, exist_ok=True)
    text = _csv_text(sweep_frame(rows))
    if chosen_tau is not None:
        text += f"# chosen_tau={chosen_tau!r}\n"
    path.write_text(text, encoding="utf-8")
    return path


def write_timing(timing: List[TimingStats], directory) -> Path:
    path = Path(directory) / TIMING_CSV
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(timing_frame(timing)), encoding="utf-8")
    return path


def write_loss_trace(trace: List[float], path, label: str = "loss") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"epoch": range(1, len(trace) + 1), label: trace})
    path.write_text(_csv_text(frame), encoding="utf-8")
    return path


def _split_sections(text: str) -> tuple[List[str], Dict[str, str]]:
    header: List[str] = []
    sections: Dict[str, List[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            header.append(line)
        else:
            sections[current].append(line)
    return header, {name: "\n".join(body) + "\n" for name, body in sections.items()}


def read_report(path) -> DetectionReport:
    """Parse a report.txt written by write_report"""
    path = Path(path)
    header, sections = _split_sections(path.read_text(encoding="utf-8"))
    if not header or not header[0].startswith("# "):
        raise MalformedHeaderError(f"{path}: missing schema line")
    schema_tag = header[0][2:].strip()
    if schema_tag != settings.REPORT_SCHEMA:
        raise MalformedHeaderError(f"{path}: unsupported report schema {schema_tag!r}")

    try:
        return _parse_report(path, schema_tag, header[1:], sections)
    except (ValueError, KeyError) as error:
        raise MalformedHeaderError(f"{path}: unreadable report ({error!r})") from error


def _parse_report(path: Path, schema_tag: str, header: List[str], sections: Dict[str, str]) -> DetectionReport:
    values: Dict[str, str] = {}
    detectors: Dict[str, Dict[str, float]] = {}
    for line in header:
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedHeaderError(f"{path}: malformed line {line!r}")
        if key.startswith("detector."):
            _, kind, field = key.split(".", 2)
            detectors.setdefault(kind, {})[field] = float(value)
        else:
            values[key] = value

    results = []
    if "results" in sections:
        frame = pd.read_csv(io.StringIO(sections["results"]), float_precision="round_trip", dtype={"score": str, "dataset": str})
        results = [OodResult(**record) for record in frame.to_dict(orient="records")]
    timing = []
    if "timing" in sections:
        frame = pd.read_csv(io.StringIO(sections["timing"]), float_precision="round_trip", dtype={"score": str})
        timing = [TimingStats(**record) for record in frame.to_dict(orient="records")]

    return DetectionReport(
        schema_tag=schema_tag,
        seed=int(values["seed"]),
        tau_test=float(values["tau_test"]),
        target_tpr=float(values["target_tpr"]),
        id_accuracy=float(values["id_accuracy"]),
        results=results,
        detectors=[
            CalibratedDetector(score_kind=kind, threshold=fields["lambda"], target_tpr=fields["target_tpr"])
            for kind, fields in detectors.items()
        ],
        timing=timing,
    )
