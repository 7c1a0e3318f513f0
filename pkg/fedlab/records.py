"""
Per-round records and the sinks they stream into.
"""

import csv
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import IO, Iterable, List, Optional, Tuple

from fedlab.errors import InvalidInputError

logger = logging.getLogger(__name__)

__all__ = [
    "RoundRecord",
    "CSV_COLUMNS",
    "ListSink",
    "CsvRoundSink",
    "write_json_atomic",
]

#: rounds.csv columns; wall-clock timing is kept out so reruns match byte for byte
CSV_COLUMNS = (
    "round",
    "sampled",
    "malicious_sampled",
    "malicious_majority",
    "mta",
    "asr",
    "excluded",
    "benign_cluster",
    "suspect_cluster",
    "aggregated",
    "distilled",
    "error",
)


def _ids(ids: Iterable[int]) -> str:
    return " ".join(str(int(i)) for i in ids)


@dataclass(frozen=True)
class RoundRecord:
    """Outcome of one federation round

    Parameters
    ----------
    round : int
        1-based round index t

    sampled : tuple of int

    malicious_sampled : int
        ground-truth count of malicious clients in the sample

    malicious_majority : bool
        malicious clients were at least half the sample

    mta : float

    asr : float
        None when the run carries no attack

    excluded : tuple of int
        sampled clients whose update did not enter the aggregate

    benign_cluster, suspect_cluster : tuple of int
        empty for defenses that do not cluster

    aggregated : tuple of int

    distilled : bool

    timing_ms : float

    error : str, default None
        set on aborted rounds, which keep the previous global model

    """

    round: int
    sampled: Tuple[int, ...]
    malicious_sampled: int
    malicious_majority: bool
    mta: float
    asr: Optional[float]
    excluded: Tuple[int, ...] = ()
    benign_cluster: Tuple[int, ...] = ()
    suspect_cluster: Tuple[int, ...] = ()
    aggregated: Tuple[int, ...] = ()
    distilled: bool = False
    timing_ms: float = 0.0
    error: Optional[str] = None

    def __post_init__(self):
        if self.malicious_sampled > len(self.sampled):
            raise InvalidInputError("more malicious clients than sampled clients")
        if not 0.0 <= self.mta <= 1.0:
            raise InvalidInputError("mta outside [0, 1]")
        if self.asr is not None and not 0.0 <= self.asr <= 1.0:
            raise InvalidInputError("asr outside [0, 1]")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("sampled", "excluded", "benign_cluster", "suspect_cluster", "aggregated"):
            data[key] = list(data[key])
        return data

    def csv_row(self) -> dict:
        return {
            "round": self.round,
            "sampled": _ids(self.sampled),
            "malicious_sampled": self.malicious_sampled,
            "malicious_majority": int(self.malicious_majority),
            "mta": repr(float(self.mta)),
            "asr": "" if self.asr is None else repr(float(self.asr)),
            "excluded": _ids(self.excluded),
            "benign_cluster": _ids(self.benign_cluster),
            "suspect_cluster": _ids(self.suspect_cluster),
            "aggregated": _ids(self.aggregated),
            "distilled": int(self.distilled),
            "error": self.error or "",
        }


class ListSink:
    """Keeps records in memory"""

    def __init__(self):
        self.records: List[RoundRecord] = []

    def write(self, record: RoundRecord) -> None:
        self.records.append(record)

    def close(self) -> None:
        pass


class CsvRoundSink:
    """Appends one CSV row per record and flushes it to disk immediately

    A crash leaves only complete rows behind.
    """

    def __init__(self, filename: str):
        if type(filename) is not str:
            raise TypeError
        self._filename = filename
        self._file: IO = open(filename, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=CSV_COLUMNS, lineterminator="\n")
        self._writer.writeheader()
        self._sync()

    @property
    def filename(self):
        return self._filename

    def _sync(self) -> None:
        self._file.flush()
        os.fsync(self._file.fileno())

    def write(self, record: RoundRecord) -> None:
        self._writer.writerow(record.csv_row())
        self._sync()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_json_atomic(filename: str, data) -> None:
    """Write JSON through a temporary file so readers never see a partial file"""
    directory = os.path.dirname(os.path.abspath(filename))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, filename)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
