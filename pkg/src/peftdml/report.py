"""Byte-stable artifact files: metrics JSON, CSV tables, the summary, and hash verification."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from pathlib import Path

from .errors import ManifestError

CURVE_HEADER = ("step", "det_cls", "det_iou", "det_orient", "metric", "consistency", "total")
WEATHER_HEADER = ("condition", "ap")
SWEEP_HEADER = ("rank", "trainable_fraction", "composite")
REPORT_MANIFEST = "report_manifest.json"
SUMMARY = "summary.txt"

_STAMP = re.compile(r"^# config_hash=(\S+) seed=(-?\d+)$")


def stamp(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ManifestError(f"cannot write {path}: {exc}") from exc


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path: str | Path, header, rows, config_hash: str, seed: int) -> None:
    buf = io.StringIO()
    buf.write(stamp(config_hash, seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write(Path(path), buf.getvalue())


def read_csv(path: str | Path) -> tuple[str, int, list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    m = _STAMP.match(lines[0]) if lines else None
    if m is None:
        raise ManifestError(f"{path}: missing config stamp")
    rows = list(csv.reader(lines[1:]))
    return m.group(1), int(m.group(2)), rows[0], rows[1:]


def write_json(path: str | Path, payload: dict) -> None:
    _write(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def curve_rows(curve: list[dict]) -> list[list]:
    return [[rec[k] for k in CURVE_HEADER] for rec in curve]


def summary_table(metrics: dict[str, dict]) -> list[str]:
    """One line per protocol with its headline number."""
    lines = []
    for protocol in sorted(metrics):
        m = metrics[protocol]
        if protocol == "standard":
            cells = f"map={m['map']:.4f} composite={m['composite']:.4f}"
        elif protocol == "dropout":
            cells = " ".join(f"{k}={v:.4f}" for k, v in sorted(m["per_subset"].items()))
        elif protocol == "weather":
            cells = " ".join(f"{k}={v:.4f}" for k, v in sorted(m["per_condition"].items()))
        elif protocol == "zeroshot":
            cells = f"accuracy={m['zero_shot_acc']:.4f}"
        else:
            cells = ""
        lines.append(f"{protocol:<9} {cells}".rstrip())
    return lines


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _artifacts(out: Path) -> list[str]:
    return sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != REPORT_MANIFEST)


def emit_report(out_dir: str | Path, config_hash: str, seed: int, dataset_hash: str | None = None) -> Path:
    """Write the summary table and a digest manifest over every artifact under ``out_dir``."""
    out = Path(out_dir)
    if not out.is_dir():
        raise ManifestError(f"output directory {out} does not exist")
    metrics = {}
    for p in sorted(out.glob("metrics_*.json")):
        payload = json.loads(p.read_text())
        metrics[payload["protocol"]] = payload
    lines = [stamp(config_hash, seed), *summary_table(metrics)]
    _write(out / SUMMARY, "\n".join(lines) + "\n")
    write_json(
        out / REPORT_MANIFEST,
        {
            "config_hash": config_hash,
            "dataset_hash": dataset_hash,
            "seed": seed,
            "files": {name: _digest(out / name) for name in _artifacts(out)},
        },
    )
    return out / SUMMARY


def embedded_stamp(path: Path) -> tuple[str, int] | None:
    """(config hash, seed) recorded inside an artifact, or None when it carries none."""
    if path.suffix in (".json", ".jsonl"):
        with path.open() as fh:
            payload = json.loads(fh.readline() if path.suffix == ".jsonl" else fh.read())
        if "config_hash" in payload and "seed" in payload:
            return payload["config_hash"], int(payload["seed"])
        return None
    first = path.read_text().split("\n", 1)[0]
    m = _STAMP.match(first)
    return (m.group(1), int(m.group(2))) if m else None


def verify_report(out_dir: str | Path, config_hash: str | None = None) -> list[str]:
    """Problems found when re-hashing artifacts against the digest manifest; empty means clean."""
    out = Path(out_dir)
    man_path = out / REPORT_MANIFEST
    if not man_path.exists():
        return [f"{man_path} is missing; run report first"]
    manifest = json.loads(man_path.read_text())
    expected = config_hash or manifest["config_hash"]
    known = {manifest["config_hash"], manifest.get("dataset_hash")}
    problems = []
    if manifest["config_hash"] != expected:
        problems.append(f"report manifest hash {manifest['config_hash']} != {expected}")
    for name, digest in sorted(manifest["files"].items()):
        path = out / name
        if not path.exists():
            problems.append(f"{name}: missing")
            continue
        if _digest(path) != digest:
            problems.append(f"{name}: content digest changed")
        st = embedded_stamp(path)
        if st is None:
            problems.append(f"{name}: no embedded config hash")
        elif st[0] not in known:
            problems.append(f"{name}: embedded hash {st[0]} belongs to another run")
        elif st[1] != manifest["seed"]:
            problems.append(f"{name}: seed {st[1]} != {manifest['seed']}")
    return problems
