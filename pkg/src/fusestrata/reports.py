"""CSV, JSON and SVG emitters. Every file carries the run provenance; nothing time-dependent."""
import csv
import json
import math
import os

import numpy as np


class ReportError(OSError):
    pass


def provenance_lines(config, seed):
    """Sorted ``key=value`` lines describing the effective run configuration."""
    lines = [f"seed={seed}"]
    for section in sorted(config):
        vals = config[section]
        if isinstance(vals, dict):
            lines += [f"{section}.{k}={vals[k]}" for k in sorted(vals)]
        else:
            lines.append(f"{section}={vals}")
    return lines


def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(d, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create directory {d}: {exc}") from exc


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, columns, rows, provenance=()):
    """Header comments, a column row, then one line per row (dicts or sequences)."""
    _ensure_dir(path)
    try:
        with open(path, "w", newline="") as fh:
            for line in provenance:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                vals = [row[c] for c in columns] if isinstance(row, dict) else list(row)
                w.writerow([_fmt(v) for v in vals])
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def read_csv(path):
    """(columns, rows as lists of strings), skipping ``#`` comment lines."""
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(lines)
    try:
        columns = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: no header row") from None
    return columns, [r for r in reader]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def write_json(path, obj, provenance=()):
    """Sorted-key JSON; dict payloads gain a ``provenance`` list."""
    _ensure_dir(path)
    payload = _plain(obj)
    if isinstance(payload, dict):
        payload = {**payload, "provenance": list(provenance)}
    try:
        with open(path, "w") as fh:
            fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc


# --------------------------------------------------------------------------
# SVG

RAMP = ("#08306b", "#2171b5", "#6baed6", "#c6dbef", "#f7f7f7", "#fcbba1", "#fb6a4a", "#cb181d", "#67000d")


def ramp_colour(t):
    """Fixed 9-stop ramp; ``t`` clipped to [0, 1]."""
    t = min(max(float(t), 0.0), 1.0)
    return RAMP[min(int(t * len(RAMP)), len(RAMP) - 1)]


def _svg(width, height, body, provenance):
    head = "".join(f"<!-- {line.replace('--', '- -')} -->\n" for line in provenance)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n{head}'
            f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def _write_text(path, text):
    _ensure_dir(path)
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def box_stats(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return {"q1": q1, "median": med, "q3": q3, "whisker_lo": lo, "whisker_hi": hi}


def svg_boxplot(path, groups, title="", provenance=()):
    """One box per named group of values; equal values collapse to the median line."""
    names = list(groups)
    stats = [box_stats(groups[n]) for n in names]
    width, height, pad = 120 + 90 * max(len(names), 1), 320, 50
    allv = [s[k] for s in stats for k in ("whisker_lo", "whisker_hi")] or [0.0, 1.0]
    lo, hi = min(allv), max(allv)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5

    def ypos(v):
        return round(height - pad - (v - lo) / (hi - lo) * (height - 2 * pad), 3)

    body = [f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
            f'<text x="5" y="{ypos(hi)}" font-size="10">{hi:.4g}</text>',
            f'<text x="5" y="{ypos(lo)}" font-size="10">{lo:.4g}</text>']
    for i, (name, s) in enumerate(zip(names, stats)):
        cx = pad + 60 + 90 * i
        top, bot = ypos(s["q3"]), ypos(s["q1"])
        body += [
            f'<line class="whisker" x1="{cx}" y1="{ypos(s["whisker_hi"])}" x2="{cx}" y2="{ypos(s["whisker_lo"])}" stroke="black"/>',
            f'<rect class="box" x="{cx - 20}" y="{top}" width="40" height="{round(bot - top, 3)}" fill="{RAMP[2]}" stroke="black"/>',
            f'<line class="median" x1="{cx - 20}" y1="{ypos(s["median"])}" x2="{cx + 20}" y2="{ypos(s["median"])}" stroke="black" stroke-width="2"/>',
            f'<text x="{cx}" y="{height - pad + 18}" text-anchor="middle" font-size="10">{name}</text>',
        ]
    _write_text(path, _svg(width, height, body, provenance))


def svg_profile(path, profile, provenance=()):
    """Factors x clusters heat-table of log10 quantiles; colour from the fixed ramp."""
    vals = np.asarray(profile.log_quantiles, dtype=np.float64)
    n_f, n_c = vals.shape
    cw, ch, left, top = 70, 26, 110, 40
    width, height = left + cw * n_c + 20, top + ch * n_f + 20
    # log10 quantiles live in [log10(1/2n), 0]; map -1..0 onto the ramp
    body = []
    for c, cl in enumerate(profile.clusters):
        body.append(f'<text x="{left + cw * c + cw / 2}" y="{top - 8}" text-anchor="middle" font-size="11">C{cl}</text>')
    for f, name in enumerate(profile.factor_names):
        y = top + ch * f
        body.append(f'<text x="{left - 6}" y="{y + ch / 2 + 4}" text-anchor="end" font-size="11">{name}</text>')
        for c in range(n_c):
            v = vals[f, c]
            body.append(f'<rect class="cell" x="{left + cw * c}" y="{y}" width="{cw}" height="{ch}" '
                        f'fill="{ramp_colour(v + 1.0)}" stroke="white"/>')
            body.append(f'<text x="{left + cw * c + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle" '
                        f'font-size="10">{v:.2f}</text>')
    _write_text(path, _svg(width, height, body, provenance))
