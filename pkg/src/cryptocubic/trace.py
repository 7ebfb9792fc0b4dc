"""Holdings tables.

Every simulation step emits one table.  A column per active party, one
variable per line: destructive slots render as ``[x]``, a live transient
scope as ``<x,y>``, and a scope that just filled a slot as ``<x,y> -- [z]``.
Funded addresses carry their balance, e.g. ``ADD ($10)``.

Tables are derived from live party state at emission time and never edited
afterwards; golden-file comparisons are byte-exact.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TraceEvent:
    step: int
    label: str
    columns: dict[str, list[str]]

    def party_items(self, party: str) -> frozenset[str]:
        return frozenset(self.columns.get(party, ()))


def format_money(cents: int) -> str:
    if cents % 100 == 0:
        return f"${cents // 100}"
    return f"${cents / 100:.2f}"


def render_table(event: TraceEvent) -> str:
    headers = list(event.columns)
    widths = [
        max(len(h), *(len(item) for item in event.columns[h]), 0) if event.columns[h] else len(h)
        for h in headers
    ]
    depth = max((len(items) for items in event.columns.values()), default=0)
    lines = [f"== {event.step}. {event.label} =="]
    lines.append(" | ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    for row in range(depth):
        cells = []
        for h, w in zip(headers, widths):
            items = event.columns[h]
            cells.append((items[row] if row < len(items) else "").ljust(w))
        lines.append(" | ".join(cells).rstrip())
    return "\n".join(lines)


def render_run(events) -> str:
    if not events:
        return ""
    return "\n\n".join(render_table(e) for e in events) + "\n"
