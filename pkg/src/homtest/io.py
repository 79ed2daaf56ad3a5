"""Histogram files, run manifests and reports. Every write is atomic."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import CertificationReport, DipFit, VisibilityEstimate
from .detection import CoincidenceHistogram

HEADER = ("tau_ps", "repeat", "coincidences", "trials")
OUT_ENV = "HOMTEST_OUT"


class FormatError(ValueError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV) or "homtest-out")


# ---------------------------------------------------------------------------
# Manifest


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so reruns are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    tool_version: str = __version__
    created_utc: str = field(default_factory=_timestamp)
    parameters: dict = field(default_factory=dict)
    inputs: list[dict] = field(default_factory=list)
    outputs: list[dict] = field(default_factory=list)

    @property
    def run_id(self) -> str:
        """Hash of everything that determines the outputs (not paths or times)."""
        ident = {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                 "tool_version": self.tool_version, "parameters": self.parameters,
                 "inputs": sorted(i["sha256"] for i in self.inputs)}
        return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()

    def add_input(self, path: str | Path):
        self.inputs.append({"path": str(path), "sha256": sha256_file(path)})

    def add_output(self, path: str | Path):
        self.outputs.append({"path": Path(path).name, "sha256": sha256_file(path)})

    def to_json(self) -> str:
        return json.dumps({"run_id": self.run_id, **asdict(self)}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        data.pop("run_id", None)
        return cls(**data)


def write_manifest(manifest: RunManifest, out_dir: str | Path) -> Path:
    return atomic_write_text(Path(out_dir) / "manifest.json", manifest.to_json())


def read_manifest(path: str | Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        return RunManifest.from_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", path) from exc


def verify_outputs(manifest: RunManifest, directory: str | Path) -> list[str]:
    """Names of manifest outputs whose content no longer matches the recorded hash."""
    bad = []
    for out in manifest.outputs:
        p = Path(directory) / out["path"]
        if not p.exists() or sha256_file(p) != out["sha256"]:
            bad.append(out["path"])
    return bad


# ---------------------------------------------------------------------------
# Histogram files


def histogram_filename(group: str) -> str:
    return f"hist_{group}.csv"


def format_histogram(h: CoincidenceHistogram, manifest_id: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# manifest: {manifest_id or h.run_id}\n")
    buf.write(f"# group: {h.group}\n")
    buf.write(f"# tau_ref_ps: {h.tau_ref_ps!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for k, tau in enumerate(h.tau_ps):
        for r in range(h.n_repeats):
            w.writerow((repr(float(tau)), r, int(h.counts[k, r]), int(h.trials[k, r])))
    return buf.getvalue()


def write_histogram(h: CoincidenceHistogram, path: str | Path, manifest_id: str = "") -> Path:
    return atomic_write_text(path, format_histogram(h, manifest_id))


def parse_histogram(text: str, source: str | Path = "<histogram>", group: str | None = None) -> CoincidenceHistogram:
    meta: dict[str, str] = {}
    rows: list[tuple[int, list[str]]] = []
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, sep, val = s[1:].partition(":")
            if sep:
                meta[key.strip()] = val.strip()
            continue
        cells = [c.strip() for c in next(csv.reader([s]))]
        if not header_seen:
            if tuple(cells) != HEADER:
                raise FormatError(f"expected header {','.join(HEADER)}, got {s!r}", source, lineno)
            header_seen = True
            continue
        if len(cells) != 4:
            raise FormatError(f"expected 4 columns, got {len(cells)}", source, lineno)
        rows.append((lineno, cells))
    if not header_seen:
        raise FormatError("missing header row", source)
    if not rows:
        raise FormatError("no data rows", source)

    taus: list[float] = []
    cells_by: dict[tuple[int, int], tuple[int, int]] = {}
    for lineno, (tau_s, rep_s, c_s, n_s) in rows:
        try:
            tau, rep, c, n = float(tau_s), int(rep_s), int(c_s), int(n_s)
        except ValueError as exc:
            raise FormatError(str(exc), source, lineno) from exc
        if not math.isfinite(tau) or rep < 0 or c < 0 or n <= 0 or c > n:
            raise FormatError("need finite tau, repeat >= 0, 0 <= coincidences <= trials, trials > 0",
                              source, lineno)
        if tau not in taus:
            taus.append(tau)
        key = (taus.index(tau), rep)
        if key in cells_by:
            raise FormatError(f"duplicate entry for tau={tau}, repeat={rep}", source, lineno)
        cells_by[key] = (c, n)
    n_rep = 1 + max(r for _, r in cells_by)
    counts = np.zeros((len(taus), n_rep), dtype=np.int64)
    trials = np.zeros_like(counts)
    for (k, r), (c, n) in cells_by.items():
        counts[k, r], trials[k, r] = c, n
    if len(cells_by) != counts.size:
        raise FormatError("every delay needs the same set of repeats 0..n-1", source)
    name = group or meta.get("group") or Path(str(source)).stem.removeprefix("hist_")
    try:
        tau_ref = float(meta.get("tau_ref_ps", "-26.0"))
        return CoincidenceHistogram(group=name, tau_ps=np.array(taus), counts=counts, trials=trials,
                                    tau_ref_ps=tau_ref, run_id=meta.get("manifest", ""))
    except ValueError as exc:
        raise FormatError(str(exc), source) from exc


def read_histogram(path: str | Path) -> CoincidenceHistogram:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path) from exc
    return parse_histogram(text, path)


# ---------------------------------------------------------------------------
# Reports


def _num(x, digits=4):
    if x is None:
        return "-"
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return f"{x:.{digits}g}"


def report_document(report: CertificationReport, manifest: RunManifest | None = None,
                    discrepancies: list[str] | None = None) -> dict:
    doc = report.as_dict()
    doc["open_discrepancies"] = list(discrepancies or [])
    if manifest is not None:
        doc["manifest"] = {"run_id": manifest.run_id, "seed": manifest.seed, "config_hash": manifest.config_hash,
                           "tool_version": manifest.tool_version}
    return doc


def render_text(doc: dict) -> str:
    """Human-readable rendering of a report document; carries the same content."""
    out = io.StringIO()
    if "manifest" in doc:
        m = doc["manifest"]
        out.write(f"run {m['run_id'][:16]}  seed {m['seed']}  config {m['config_hash'][:16]}  "
                  f"version {m['tool_version']}\n\n")
    out.write(f"{'group':<12} {'V':>7} {'std(V)':>7} {'t0[ps]':>7} {'std(t0)':>7} {'sigma[ps]':>9} "
              f"{'std(sigma)':>10}\n")
    for row in doc["table"]:
        if "error" in row:
            out.write(f"{row['group']:<12} fit failed: {row['error']}\n")
            continue
        flag = "  indeterminate" if row.get("indeterminate") else ""
        out.write(f"{row['group']:<12} {row['V']:7.3f} {row['std_V']:7.3f} {row['t0']:7.3f} {row['std_t0']:7.3f} "
                  f"{row['sigma']:9.3f} {row['std_sigma']:10.3f}{flag}\n")
    out.write("\n")
    lr = doc.get("likelihood_ratio")
    if lr:
        out.write(f"likelihood ratio: LR = {_num(lr['statistic'])}, df = {lr['df']}, p = {_num(lr['p_value'], 3)}\n")
    an = doc.get("anova_t0")
    if an:
        deg = " (degenerate)" if an["degenerate"] else ""
        out.write(f"ANOVA on t0: F = {_num(an['F'])}, df = ({an['df_between']}, {an['df_within']}), "
                  f"p = {_num(an['p_value'], 3)}{deg}\n")
    pw = doc.get("power") or {}
    if pw.get("power") is not None:
        out.write(f"power: a visibility difference of {pw['delta_v']} is detected with probability "
                  f"{pw['power']:.2f}; 80% detection needs {pw['detectable_delta_v_at_0.8']:.3f}\n")
    out.write(f"alpha = {doc['alpha']}\n")
    out.write(f"verdict: indistinguishability {doc['verdict']}\n")
    for note in doc.get("notes", []):
        out.write(f"note: {note}\n")
    for note in doc.get("open_discrepancies", []):
        out.write(f"open discrepancy: {note}\n")
    return out.getvalue()


def render_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def fit_document(group: str, fit: DipFit, vis: VisibilityEstimate) -> dict:
    return {"group": group, "fit": fit.as_dict(), "visibility": {"V": vis.V, "std": vis.std,
                                                                 "indeterminate": vis.indeterminate}}
