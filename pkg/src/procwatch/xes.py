"""XES export/import with a canonical byte layout.

Sensor series become nested lists::

    <list key="series">
      <string key="unit" value="mm"/>
      <values>
        <list key="point"><values><int key="offset" value="0"/><float key="value" value="10.0"/></values></list>
        ...
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from datetime import datetime, timedelta, timezone
from functools import lru_cache
from importlib import resources

from .events import COMPLETE, START, Event, Log, ModelRecord, Trace, append
from .series import SensorSeries

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_EXTENSIONS = (
    ("Concept", "concept", "http://www.xes-standard.org/concept.xesext"),
    ("Lifecycle", "lifecycle", "http://www.xes-standard.org/lifecycle.xesext"),
    ("Time", "time", "http://www.xes-standard.org/time.xesext"),
    ("Organizational", "org", "http://www.xes-standard.org/org.xesext"),
)
_RESERVED = {"concept:name", "lifecycle:transition", "time:timestamp", "org:resource", "task:id", "source:instance"}


def format_timestamp(ms: int) -> str:
    secs, millis = divmod(int(ms), 1000)
    dt = EPOCH + timedelta(seconds=secs)
    return f"{dt:%Y-%m-%dT%H:%M:%S}.{millis:03d}+00:00"


def parse_timestamp(text: str) -> int:
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - EPOCH) // timedelta(milliseconds=1)


def _esc(s: str) -> str:
    return (
        str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
        .replace("\n", "&#10;").replace("\r", "&#13;").replace("\t", "&#9;")
    )


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "INF" if x > 0 else "-INF"
    return repr(float(x))


def _attr(key: str, value, indent: str) -> list[str]:
    k = _esc(key)
    if isinstance(value, SensorSeries):
        lines = [f'{indent}<list key="{k}">', f'{indent}  <string key="unit" value="{_esc(value.unit)}"/>',
                 f"{indent}  <values>"]
        for offset, v in value.points:
            lines.append(
                f'{indent}    <list key="point"><values><int key="offset" value="{offset}"/>'
                f'<float key="value" value="{_fmt_float(v)}"/></values></list>'
            )
        lines += [f"{indent}  </values>", f"{indent}</list>"]
        return lines
    if isinstance(value, bool):
        return [f'{indent}<boolean key="{k}" value="{"true" if value else "false"}"/>']
    if isinstance(value, int):
        return [f'{indent}<int key="{k}" value="{value}"/>']
    if isinstance(value, float):
        return [f'{indent}<float key="{k}" value="{_fmt_float(value)}"/>']
    return [f'{indent}<string key="{k}" value="{_esc(value)}"/>']


def export_xes(log: Log) -> str:
    """Serialize ``log`` as an XES document (canonical layout, UTF-8 text)."""
    out = ['<?xml version="1.0" encoding="UTF-8"?>', '<log xes.version="1.0" xes.features="nested-attributes">']
    for name, prefix, uri in _EXTENSIONS:
        out.append(f'  <extension name="{name}" prefix="{prefix}" uri="{uri}"/>')
    for key in sorted(log.metadata):
        if log.metadata[key] is not None:
            out += _attr(key, log.metadata[key], "  ")
    for case_id in sorted(log.traces):
        trace = log.traces[case_id]
        out.append("  <trace>")
        out += _attr("concept:name", case_id, "    ")
        if trace.models:
            out.append('    <list key="model:versions">')
            out.append("      <values>")
            for model_id, version in trace.versions:
                out.append(f'        <string key="model" value="{_esc(model_id)}@{version}"/>')
            out.append("      </values>")
            out.append("    </list>")
        for e in trace.events:
            out.append("    <event>")
            out += _attr("concept:name", e.concept_name, "      ")
            out += _attr("task:id", e.task_id, "      ")
            out += _attr("source:instance", e.source_instance_id, "      ")
            out += _attr("lifecycle:transition", e.lifecycle_transition, "      ")
            out.append(f'      <date key="time:timestamp" value="{format_timestamp(e.timestamp)}"/>')
            if e.org_resource is not None:
                out += _attr("org:resource", e.org_resource, "      ")
            for key in sorted(e.attributes):
                if key in _RESERVED or e.attributes[key] is None:
                    continue
                out += _attr(key, e.attributes[key], "      ")
            out.append("    </event>")
        out.append("  </trace>")
    out.append("</log>")
    return "\n".join(out) + "\n"


def _value(el: ET.Element):
    tag, raw = el.tag, el.get("value")
    if tag == "list":
        unit = el.find("string[@key='unit']")
        values = el.find("values")
        points = []
        for p in (values if values is not None else []):
            vals = p.find("values")
            offset = vals.find("int[@key='offset']").get("value")
            value = vals.find("float[@key='value']").get("value")
            points.append((int(offset), float(value)))
        return SensorSeries(tuple(points), unit.get("value") if unit is not None else "")
    if tag == "boolean":
        return raw == "true"
    if tag == "int":
        return int(raw)
    if tag == "float":
        return float(raw)
    if tag == "date":
        return parse_timestamp(raw)
    return raw


def import_xes(text: str | bytes) -> Log:
    """Parse an XES document produced by :func:`export_xes` (or compatible)."""
    root = ET.fromstring(text.encode("utf-8") if isinstance(text, str) else text)
    if root.tag != "log":
        raise ValueError(f"not an XES log: root element {root.tag!r}")
    log = Log()
    for el in root:
        if el.tag in ("extension", "global", "classifier", "trace"):
            continue
        log.metadata[el.get("key")] = _value(el)
    for trace_el in root.findall("trace"):
        case_id = None
        versions: list[tuple[str, int]] = []
        for el in trace_el:
            key = el.get("key")
            if key == "concept:name":
                case_id = el.get("value")
            elif key == "model:versions":
                for v in el.find("values"):
                    model_id, _, version = v.get("value").rpartition("@")
                    versions.append((model_id, int(version)))
        if case_id is None:
            raise ValueError("trace without concept:name")
        for model_id, version in versions:
            append(log, ModelRecord(case_id, case_id, None, model_id, version, "", 0))
        if case_id not in log.traces:
            log.traces[case_id] = Trace(case_id)
        for ev in trace_el.findall("event"):
            fields: dict = {}
            attrs: dict = {}
            for el in ev:
                key = el.get("key")
                if key in _RESERVED:
                    fields[key] = _value(el)
                else:
                    attrs[key] = _value(el)
            lifecycle = fields.get("lifecycle:transition", COMPLETE)
            if lifecycle not in (START, COMPLETE):
                raise ValueError(f"unsupported lifecycle transition {lifecycle!r}")
            name = fields.get("concept:name", "")
            append(log, Event(
                case_id=case_id,
                source_instance_id=fields.get("source:instance", case_id),
                task_id=fields.get("task:id", name),
                concept_name=name,
                lifecycle_transition=lifecycle,
                timestamp=fields["time:timestamp"],
                org_resource=fields.get("org:resource"),
                attributes=attrs,
            ))
    for trace in log.traces.values():
        trace.open = False
    return log


@lru_cache(maxsize=1)
def _schema():
    import xmlschema

    path = resources.files("procwatch") / "data" / "xes.xsd"
    return xmlschema.XMLSchema(str(path))


def validate_xes(text: str) -> list[str]:
    """Schema-validate an XES document; returns error messages (empty if valid)."""
    schema = _schema()
    return [str(err.reason or err.message) for err in schema.iter_errors(text)]
