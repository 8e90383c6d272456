"""File formats: chip configuration (JSON), register map (text), CSV curves."""

import csv
import dataclasses
import io as _io
import json
from pathlib import Path

import numpy as np

from .channel_sim import (DAC_MAX, FEEDBACK_OPTIONS, N_CHANNELS, ChannelConfig, ChipConfig,
                          OverdriveDelay)
from .characterization import ScanCurve


class ConfigError(ValueError):
    """Malformed configuration; the message names the file position or field."""


class RegisterError(ConfigError):
    pass


def _check_keys(data, cls, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")


def _build(cls, data, where):
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def chip_to_dict(chip):
    d = dataclasses.asdict(chip)
    d["channels"] = [dataclasses.asdict(ch) for ch in chip.channels]
    d["rc_anchors"] = [list(a) for a in chip.rc_anchors]
    return d


def chip_from_dict(data, where="chip"):
    """Build a :class:`ChipConfig`; missing fields take their defaults.

    ``channels`` may be a list of six objects, or a single object under
    ``channel_defaults`` applied to all six before per-channel entries.
    """
    data = dict(data)
    defaults = data.pop("channel_defaults", {})
    _check_keys(defaults, ChannelConfig, f"{where}.channel_defaults")
    _check_keys(data, ChipConfig, where)
    channels = data.pop("channels", None)
    if channels is None:
        channels = [{} for _ in range(N_CHANNELS)]
    if not isinstance(channels, list) or len(channels) != N_CHANNELS:
        raise ConfigError(f"{where}.channels: expected a list of {N_CHANNELS} channel objects")
    built = []
    for i, ch in enumerate(channels):
        w = f"{where}.channels[{i}]"
        _check_keys(ch, ChannelConfig, w)
        merged = {**defaults, "channel_index": i, **ch}
        built.append(_build(ChannelConfig, merged, w))
    if "rc_anchors" in data:
        data["rc_anchors"] = tuple(tuple(a) for a in data["rc_anchors"])
    od = data.get("overdrive_delay")
    if od is not None:
        _check_keys(od, OverdriveDelay, f"{where}.overdrive_delay")
        data["overdrive_delay"] = _build(OverdriveDelay, od, f"{where}.overdrive_delay")
    return _build(ChipConfig, {**data, "channels": tuple(built)}, where)


def loads_json(text, source="<string>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def load_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return loads_json(text, str(path))


def dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_chip(path):
    return chip_from_dict(load_json(path), where=str(path))


# --- register map -----------------------------------------------------------

_FB_CODE = {r: i for i, r in enumerate(FEEDBACK_OPTIONS)}
_CH_REGS = {
    "thr_dac_a": ("threshold_dac_a", DAC_MAX),
    "thr_dac_b": ("threshold_dac_b", DAC_MAX),
    "rc_code": ("rc_code", 6),
    "fb_sel": ("feedback_resistor", len(FEEDBACK_OPTIONS) - 1),
}


def register_map(chip):
    """Ordered ``[(name, value)]`` of the I2C-accessible settings."""
    regs = []
    for ch in chip.channels:
        i = ch.channel_index
        regs.append((f"ch{i}.thr_dac_a", ch.threshold_dac_a))
        regs.append((f"ch{i}.thr_dac_b", ch.threshold_dac_b))
        regs.append((f"ch{i}.rc_code", ch.rc_code))
        regs.append((f"ch{i}.fb_sel", _FB_CODE[ch.feedback_resistor]))
    regs.append(("global_offset_dac", chip.global_offset_dac))
    return regs


def dump_registers(chip):
    lines = ["# register value"]
    lines += [f"{name} {value}" for name, value in register_map(chip)]
    return "\n".join(lines) + "\n"


def load_registers(text, base=None):
    """Apply register writes from ``text`` on top of ``base`` (default chip)."""
    chip = base if base is not None else ChipConfig()
    channels = [dataclasses.asdict(ch) for ch in chip.channels]
    global_dac = chip.global_offset_dac
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise RegisterError(f"line {lineno}: expected 'name value', got {raw!r}")
        name, sval = parts
        try:
            value = int(sval, 0)
        except ValueError:
            raise RegisterError(f"line {lineno}: {name}: value {sval!r} is not an integer") from None
        if name == "global_offset_dac":
            _check_reg(value, DAC_MAX, name, lineno)
            global_dac = value
            continue
        prefix, _, reg = name.partition(".")
        if not (prefix.startswith("ch") and prefix[2:].isdigit() and reg in _CH_REGS):
            raise RegisterError(f"line {lineno}: unknown register {name!r}")
        idx = int(prefix[2:])
        if idx >= N_CHANNELS:
            raise RegisterError(f"line {lineno}: unknown register {name!r}")
        field_name, vmax = _CH_REGS[reg]
        _check_reg(value, vmax, name, lineno)
        if reg == "fb_sel":
            value = FEEDBACK_OPTIONS[value]
        channels[idx][field_name] = value
    return dataclasses.replace(chip, global_offset_dac=global_dac,
                               channels=tuple(ChannelConfig(**c) for c in channels))


def _check_reg(value, vmax, name, lineno):
    if not 0 <= value <= min(vmax, 0xFF):
        raise RegisterError(f"line {lineno}: {name}={value} out of range [0, {vmax}]")


# --- CSV --------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def rows_to_csv(rows, columns, path=None):
    """Write dict rows as CSV with a header; returns the text."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


CURVE_COLUMNS = ["kind", "x", "y", "y_err", "count", "exposure"]
HIT_COLUMNS = ["channel", "trial", "q_fc", "vth_mv", "crossing_ns", "tot_ns", "bits"]


def write_scan_curve(curve, path=None):
    rows = []
    for i in range(curve.x.size):
        rows.append({"kind": curve.kind, "x": curve.x[i], "y": curve.y[i], "y_err": curve.y_err[i],
                     "count": "" if curve.counts is None else curve.counts[i],
                     "exposure": "" if curve.exposure is None else curve.exposure[i]})
    return rows_to_csv(rows, CURVE_COLUMNS, path)


def read_scan_curve(path):
    """Read a curve with columns ``kind, x, y, y_err`` (``count``, ``exposure`` optional)."""
    rows = read_csv_rows(path)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    missing = {"kind", "x", "y", "y_err"} - set(rows[0])
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
    kinds = {r["kind"] for r in rows}
    if len(kinds) != 1:
        raise ConfigError(f"{path}: mixed kinds {sorted(kinds)}")

    def col(name):
        if name not in rows[0] or any(r[name] in ("", None) for r in rows):
            return None
        return np.array([float(r[name]) for r in rows])

    try:
        return ScanCurve(kinds.pop(), col("x"), col("y"), col("y_err"),
                         counts=col("count"), exposure=col("exposure"))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_hits(hits, path=None):
    return rows_to_csv([h.as_row() for h in hits], HIT_COLUMNS, path)
