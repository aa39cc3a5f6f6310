"""Dataset files, run configuration documents, and CSV emission.

Dataset files are delimited text with a header row and the columns
``subject_id, time_years, log10_vl, censored, detection_limit_log10``.
Every numeric field written by this module uses 17 significant digits, so
reading an emitted file reproduces the in-memory values exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .baseline import Log1PlusConfig
from .errors import ConfigurationError, DataError, SegNLMEError
from .model import ModelSpec, ObservationRecord, SubjectData, Theta
from .samplers import GibbsConfig
from .simulate import BenchConfig, SimScenario
from .stem import StemConfig

log = logging.getLogger(__name__)

DATASET_COLUMNS = ("subject_id", "time_years", "log10_vl", "censored", "detection_limit_log10")
TRUTH_COLUMNS = ("subject_id", "tau_latent", "change_point_years")


def fmt(x) -> str:
    """17-significant-digit text form of a number (empty for ``None``)."""
    if x is None:
        return ""
    if isinstance(x, (bool, int)) and not isinstance(x, float):
        return str(int(x))
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class IngestReport:
    """What :func:`ingest` changed or discarded."""

    n_rows: int = 0
    n_subjects: int = 0
    dropped_subjects: list = field(default_factory=list)
    repaired_rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_float(text: str, name: str, line: int) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"field {name!r} is not a number: {text!r}", line) from None
    return v


def _parse_flag(text: str, line: int) -> bool:
    t = (text or "").strip().lower()
    if t in ("0", "false"):
        return False
    if t in ("1", "true"):
        return True
    raise DataError(f"field 'censored' must be 0 or 1, got {text!r}", line)


def ingest(path) -> tuple[list[SubjectData], IngestReport]:
    """Read a dataset file into subjects sorted by id, records sorted by time.

    Censored rows whose ``log10_vl`` differs from (or lacks) the detection
    limit are repaired to the limit with a warning.  Subjects with fewer
    than two records are dropped and listed in the report.

    Raises
    ------
    DataError
        Missing columns, malformed fields (with the line number), or a
        duplicate ``(subject_id, time_years)`` pair.
    """
    path = Path(path)
    report = IngestReport()
    rows: dict[str, list] = {}
    seen: dict[tuple, int] = {}
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in DATASET_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise DataError(f"missing columns: {', '.join(missing)}", 1)
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in DATASET_COLUMNS):
                raise DataError("wrong number of fields", line)
            sid = row["subject_id"].strip()
            if not sid:
                raise DataError("empty subject_id", line)
            t = _parse_float(row["time_years"], "time_years", line)
            if not (math.isfinite(t) and t >= 0):
                raise DataError(f"time_years must be finite and >= 0, got {t}", line)
            cens = _parse_flag(row["censored"], line)
            dlim = _parse_float(row["detection_limit_log10"], "detection_limit_log10", line)
            if not math.isfinite(dlim):
                raise DataError("detection_limit_log10 must be finite", line)
            raw = row["log10_vl"].strip()
            if cens:
                v = _parse_float(raw, "log10_vl", line) if raw else None
                if v != dlim:
                    msg = (f"line {line}: censored value {raw or '<empty>'} "
                           f"repaired to detection limit {fmt(dlim)}")
                    log.warning(msg)
                    report.repaired_rows.append(line)
                    report.warnings.append(msg)
                v = dlim
            else:
                v = _parse_float(raw, "log10_vl", line)
                if not math.isfinite(v):
                    raise DataError("log10_vl must be finite", line)
            key = (sid, t)
            if key in seen:
                raise DataError(
                    f"duplicate record for subject {sid!r} at time {fmt(t)} "
                    f"(first seen on line {seen[key]})", line)
            seen[key] = line
            rows.setdefault(sid, []).append(ObservationRecord(t, v, cens, dlim))
            report.n_rows += 1
    subjects = []
    for sid in sorted(rows):
        recs = sorted(rows[sid], key=lambda r: r.time)
        if len(recs) < 2:
            msg = f"subject {sid!r} dropped: fewer than 2 records"
            log.warning(msg)
            report.dropped_subjects.append(sid)
            report.warnings.append(msg)
            continue
        subjects.append(SubjectData(sid, tuple(recs)))
    report.n_subjects = len(subjects)
    return subjects, report


def write_dataset(path, subjects: Iterable[SubjectData]) -> None:
    """Write subjects in the dataset-file layout."""
    rows = ([s.id, fmt(r.time), fmt(r.value), int(r.censored), fmt(r.detection_limit)]
            for s in subjects for r in s.records)
    write_csv(path, DATASET_COLUMNS, rows)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def theta_to_json(theta: Theta) -> dict:
    return theta.to_dict()


def theta_from_json(d: Mapping) -> Theta:
    try:
        return Theta.from_dict(d)
    except (KeyError, TypeError, SegNLMEError) as exc:
        raise ConfigurationError(f"invalid parameter document: {exc}") from None


# ---------------------------------------------------------------------------
# run configuration


def _build(cls, doc, section: str, base=None):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if doc is None:
        return base if base is not None else cls()
    if not isinstance(doc, Mapping):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    if cls is SimScenario and kwargs.get("theta_true") is not None:
        kwargs["theta_true"] = theta_from_json(doc["theta_true"])
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {section!r} section: {exc}") from None


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-12``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


_SECTIONS = ("model", "stem", "baseline_stem", "gibbs", "log1plus", "scenario",
             "censor_rates", "output_dir", "seed", "curve_points", "density_samples")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs.

    Sections left out of the document keep the owning module's defaults;
    ``stem``/``baseline_stem``/``log1plus`` left out of a benchmark run take
    the :class:`BenchConfig` defaults instead.
    """

    model: ModelSpec = field(default_factory=ModelSpec)
    stem: StemConfig | None = None
    baseline_stem: StemConfig | None = None
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)
    log1plus: Log1PlusConfig | None = None
    scenario: SimScenario = field(default_factory=SimScenario)
    censor_rates: tuple = (0.0, 0.3, 0.5)
    output_dir: str | None = None
    seed: int = 0
    curve_points: int = 61
    density_samples: int = 2000

    def __post_init__(self):
        for r in self.censor_rates:
            if not 0 <= float(r) < 1:
                raise ConfigurationError("censor_rates must lie in [0, 1)")
        if self.curve_points < 2 or self.density_samples < 1:
            raise ConfigurationError("curve_points must be >= 2 and density_samples >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "RunConfig":
        doc = dict(doc or {})
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
        kw: dict[str, Any] = {}
        if "model" in doc:
            kw["model"] = _build(ModelSpec, doc["model"], "model")
        for name, klass in (("stem", StemConfig), ("baseline_stem", StemConfig),
                            ("log1plus", Log1PlusConfig)):
            if doc.get(name) is not None:
                kw[name] = _build(klass, doc[name], name)
        if "gibbs" in doc:
            kw["gibbs"] = _build(GibbsConfig, doc["gibbs"], "gibbs")
        if "scenario" in doc:
            kw["scenario"] = _build(SimScenario, doc["scenario"], "scenario")
        for name in ("output_dir", "seed", "curve_points", "density_samples"):
            if name in doc:
                kw[name] = doc[name]
        if "censor_rates" in doc:
            kw["censor_rates"] = tuple(float(r) for r in doc["censor_rates"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a YAML or JSON document (JSON is valid YAML)."""
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        try:
            doc = yaml.load(text, Loader=_Loader)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
        if doc is not None and not isinstance(doc, Mapping):
            raise ConfigurationError("config document must be a mapping")
        return cls.from_dict(doc)

    def fit_stem(self) -> StemConfig:
        return self.stem if self.stem is not None else StemConfig()

    def fit_baseline_stem(self) -> StemConfig:
        return self.baseline_stem if self.baseline_stem is not None else self.fit_stem()

    def fit_log1plus(self) -> Log1PlusConfig:
        return self.log1plus if self.log1plus is not None else Log1PlusConfig()

    def bench_config(self) -> BenchConfig:
        d = BenchConfig(spec=self.model, gibbs=self.gibbs)
        return dataclasses.replace(
            d,
            stem=self.stem if self.stem is not None else d.stem,
            baseline_stem=self.baseline_stem if self.baseline_stem is not None else d.baseline_stem,
            log1plus=self.log1plus if self.log1plus is not None else d.log1plus,
        )

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "gibbs": dataclasses.asdict(self.gibbs),
            "scenario": self.scenario.to_dict(),
            "censor_rates": list(self.censor_rates),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "curve_points": self.curve_points,
            "density_samples": self.density_samples,
        }
        for name in ("stem", "baseline_stem", "log1plus"):
            v = getattr(self, name)
            d[name] = None if v is None else dataclasses.asdict(v)
        return d
