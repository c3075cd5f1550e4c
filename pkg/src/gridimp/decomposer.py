"""Split a radial grid into the four basic line elements by GMD placement."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

from .grid_model import GridTopology, Line, bottom_up_order


class LineCase(enum.IntEnum):
    CASE1 = 1  # GMD at both ends
    CASE2 = 2  # GMD at the receiving end only
    CASE3 = 3  # GMD at the sending end only
    CASE4 = 4  # no GMD on either end

    def __str__(self):
        return f"Case{self.value}"

    @classmethod
    def parse(cls, text: str) -> "LineCase":
        return cls(int(str(text).strip().lower().removeprefix("case")))


@dataclass(frozen=True)
class LineClassification:
    line: Line
    case: LineCase


def expected_case(t: GridTopology, line: Line) -> LineCase:
    """Declarative rule: the case follows from endpoint membership alone."""
    i_meas = t.is_measured(line.parent)
    j_meas = t.is_measured(line.child)
    if j_meas:
        return LineCase.CASE1 if i_meas else LineCase.CASE2
    return LineCase.CASE3 if i_meas else LineCase.CASE4


def decompose(t: GridTopology) -> list:
    """Classify every line, visiting measured nodes bottom-up, then unmeasured ones.

    Each visited node ``j`` consumes its parent line ``(i, j)``; the root has
    none and is skipped.
    """
    remaining = {ln.line_id for ln in t.lines}
    out = []
    for group, measured_child in ((t.measured_nodes, True), (t.unmeasured_nodes, False)):
        for j in bottom_up_order(t, group):
            line = t.parent_line(j)
            if line is None or line.line_id not in remaining:
                continue
            i_meas = t.is_measured(line.parent)
            if measured_child:
                case = LineCase.CASE1 if i_meas else LineCase.CASE2
            else:
                case = LineCase.CASE3 if i_meas else LineCase.CASE4
            remaining.discard(line.line_id)
            out.append(LineClassification(line, case))
    assert not remaining, f"unclassified lines: {sorted(remaining)}"
    for c in out:
        assert c.case == expected_case(t, c.line), c
    return out


def case_counts(classes) -> dict:
    counts = Counter(c.case for c in classes)
    return {str(case): counts.get(case, 0) for case in LineCase}


def classification_rows(classes) -> list:
    return [
        {"line_id": c.line.line_id, "from": c.line.parent, "to": c.line.child, "case": str(c.case)}
        for c in classes
    ]


def format_table(classes) -> str:
    rows = classification_rows(classes)
    header = ("line_id", "from", "to", "case")
    widths = [max([len(h)] + [len(r[h]) for r in rows]) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[h].ljust(w) for h, w in zip(header, widths)))
    return "\n".join(lines)
