"""Action-unit annotation statistics: binary counts and intensity histograms."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, TextIO, Union

import pandas as pd
from tabulate import tabulate

from src.errors import ParseError

ANNOTATION_COLUMNS = ["video_id", "frame", "au", "intensity"]
INTENSITY_LEVELS = tuple(range(6))


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    frame_index: int
    au: str
    intensity: int

    def __post_init__(self) -> None:
        if not 0 <= self.intensity <= 5:
            raise ValueError(f"intensity must be in 0..5, got {self.intensity}")
        if self.frame_index < 0:
            raise ValueError(f"frame index must be >= 0, got {self.frame_index}")


Records = Union[Sequence[AnnotationRecord], pd.DataFrame]


def _bad_rows(mask: pd.Series) -> Optional[int]:
    """1-based file line of the first flagged row (header is line 1)."""
    if not mask.any():
        return None
    return int(mask.to_numpy().nonzero()[0][0]) + 2


def read_annotations(source: Union[str, Path, TextIO]) -> pd.DataFrame:
    """Validated annotation table with columns ``video_id,frame,au,intensity``."""
    try:
        df = pd.read_csv(source, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise ParseError("missing header row", line=1) from e
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise ParseError(f"malformed row: {e}", line=int(found.group(1)) if found else None) from e

    missing = [c for c in ANNOTATION_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", line=1)
    df = df[ANNOTATION_COLUMNS].copy()
    if df.empty:
        return df.astype({"frame": "int64", "intensity": "int64"})

    blank = df.isna().any(axis=1) | (df["video_id"].str.strip() == "") | (df["au"].str.strip() == "")
    line = _bad_rows(blank)
    if line is not None:
        raise ParseError("empty field", line=line)

    frame_text = df["frame"].str.strip()
    line = _bad_rows(~frame_text.str.fullmatch(r"[0-9]+"))
    if line is not None:
        raise ParseError(f"frame must be a non-negative integer, got {df['frame'].iloc[line - 2]!r}", line=line)

    intensity_text = df["intensity"].str.strip()
    line = _bad_rows(~intensity_text.str.fullmatch(r"[0-5]"))
    if line is not None:
        raise ParseError(f"intensity must be an integer in 0..5, got {df['intensity'].iloc[line - 2]!r}", line=line)

    df["video_id"] = df["video_id"].str.strip()
    df["au"] = df["au"].str.strip()
    df["frame"] = frame_text.astype("int64")
    df["intensity"] = intensity_text.astype("int64")
    return df.reset_index(drop=True)


def parse_annotations(source: Union[str, Path, TextIO]) -> List[AnnotationRecord]:
    df = read_annotations(source)
    return [
        AnnotationRecord(video_id=v, frame_index=int(f), au=a, intensity=int(i))
        for v, f, a, i in df.itertuples(index=False, name=None)
    ]


def as_frame(records: Records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    return pd.DataFrame(
        [(r.video_id, r.frame_index, r.au, r.intensity) for r in records],
        columns=ANNOTATION_COLUMNS,
    ).astype({"frame": "int64", "intensity": "int64"})


def _scoped(records: Records, video: Optional[str]) -> pd.DataFrame:
    df = as_frame(records)
    return df if video is None else df[df["video_id"] == video]


def binary_counts(records: Records, video: Optional[str] = None) -> Dict[str, int]:
    """Per AU, the number of rows with intensity > 0 (sorted by AU name)."""
    df = _scoped(records, video)
    counts = (df["intensity"] > 0).groupby(df["au"]).sum()
    return {str(au): int(n) for au, n in sorted(counts.items())}


def intensity_histogram(records: Records, au: str, video: Optional[str] = None) -> Dict[int, int]:
    df = _scoped(records, video)
    values = df.loc[df["au"] == au, "intensity"].value_counts()
    return {level: int(values.get(level, 0)) for level in INTENSITY_LEVELS}


def positive_only(histogram: Dict[int, int]) -> Dict[int, int]:
    """The histogram restricted to levels 1..5."""
    return {level: n for level, n in histogram.items() if level > 0}


def per_video_histograms(records: Records, au: str) -> Dict[str, Dict[int, int]]:
    df = as_frame(records)
    return {str(v): intensity_histogram(group, au) for v, group in df.groupby("video_id", sort=True)}


def _frame_maxima(records: Records, video: Optional[str]) -> pd.Series:
    df = _scoped(records, video)
    return df.groupby(["video_id", "frame"])["intensity"].max()


def neutral_frame_count(records: Records, video: Optional[str] = None) -> int:
    """Frames in which no action unit is set."""
    return int((_frame_maxima(records, video) == 0).sum())


def au_set_frame_count(records: Records, video: Optional[str] = None) -> int:
    return int((_frame_maxima(records, video) > 0).sum())


@dataclass
class StatsReport:
    video: Optional[str]
    binary: Dict[str, int] = field(default_factory=dict)
    histograms: Dict[str, Dict[int, int]] = field(default_factory=dict)
    positive_histograms: Dict[str, Dict[int, int]] = field(default_factory=dict)
    total_frames: int = 0
    neutral_frames: int = 0
    au_set_frames: int = 0

    @property
    def scope(self) -> str:
        return "all videos" if self.video is None else f"video {self.video}"


def build_report(records: Records, aus: Optional[Iterable[str]] = None, video: Optional[str] = None) -> StatsReport:
    df = _scoped(records, video)
    binary = binary_counts(df)
    wanted = sorted(binary) if aus is None else sorted(set(aus))
    maxima = _frame_maxima(df, None)
    histograms = {au: intensity_histogram(df, au) for au in wanted if au in binary}
    return StatsReport(
        video=video,
        binary={au: binary[au] for au in histograms},
        histograms=histograms,
        positive_histograms={au: positive_only(h) for au, h in histograms.items()},
        total_frames=int(maxima.size),
        neutral_frames=int((maxima == 0).sum()),
        au_set_frames=int((maxima > 0).sum()),
    )


REPORT_HEADERS = ["au", "frames_set", *[f"i{level}" for level in INTENSITY_LEVELS]]
POSITIVE_HEADERS = ["au", *[f"p{level}" for level in INTENSITY_LEVELS if level > 0]]


def _shares(positive: Optional[Dict[int, int]]) -> List[str]:
    total = sum(positive.values()) if positive else 0
    if not total:
        return ["-"] * (len(POSITIVE_HEADERS) - 1)
    return [f"{100.0 * n / total:.1f}%" for n in positive.values()]


def render_report(
    report: StatsReport,
    fmt: Literal["text", "csv"] = "text",
    aus: Optional[Iterable[str]] = None,
) -> str:
    """Deterministic table, one row per AU in ASCII order.

    AUs named in ``aus`` but absent from the report render as ``-``. The text
    format adds a second table: each positive level as a share of the AU-set
    rows.
    """
    names = sorted(set(report.binary) | set(aus or []))
    rows = []
    for au in names:
        if au in report.binary:
            hist = report.histograms[au]
            rows.append([au, report.binary[au], *[hist[level] for level in INTENSITY_LEVELS]])
        else:
            rows.append([au, *["-"] * (len(REPORT_HEADERS) - 1)])
    if fmt == "csv":
        buf = io.StringIO()
        pd.DataFrame(rows, columns=REPORT_HEADERS).to_csv(buf, index=False, lineterminator="\n")
        return buf.getvalue()
    counts = tabulate(rows, headers=REPORT_HEADERS, tablefmt="github", disable_numparse=True)
    shares = tabulate(
        [[au, *_shares(report.positive_histograms.get(au))] for au in names],
        headers=POSITIVE_HEADERS,
        tablefmt="github",
        disable_numparse=True,
    )
    return f"{counts}\n\npositive intensities\n{shares}\n"


def write_annotations(records: Records, path: Union[str, Path]) -> None:
    as_frame(records)[ANNOTATION_COLUMNS].to_csv(path, index=False, lineterminator="\n")
