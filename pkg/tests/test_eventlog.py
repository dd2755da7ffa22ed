from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shadowrange.errors import CorruptLog
from shadowrange.eventlog import EventLog, Record

text_values = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=20)


@given(st.lists(st.tuples(st.integers(0, 5), st.dictionaries(st.from_regex(r"[a-z]{1,6}", fullmatch=True), text_values, max_size=4)), max_size=15))
def test_round_trip(entries):
    log = EventLog()
    tick = 0
    for dt, fields in entries:
        tick += dt
        log.append(tick, "Thing", **fields)
    again = EventLog.from_text(log.to_text())
    assert again.to_text() == log.to_text()
    assert [r.fields for r in again] == [r.fields for r in log]


def test_empty_log_is_empty_text():
    assert EventLog().to_text() == ""
    assert len(EventLog.from_text("")) == 0


def test_truncation_and_tampering_detected():
    log = EventLog()
    log.append(0, "Init", version="1")
    log.append(3, "StageAttempt", target="fw", stage="Exploited")
    text = log.to_text()
    with pytest.raises(CorruptLog):
        EventLog.from_text(text[:-10])
    with pytest.raises(CorruptLog):
        EventLog.from_text(text.replace("fw", "ws"))
    body = text.split("#digest")[0]
    with pytest.raises(CorruptLog):
        EventLog.from_text(body)


def test_values_with_spaces_and_equals_survive():
    log = EventLog()
    log.append(0, "Note", details="a b=c%d")
    rec = EventLog.from_text(log.to_text()).records[0]
    assert rec["details"] == "a b=c%d"


def test_malformed_record_line():
    with pytest.raises(CorruptLog):
        Record.from_line("x y", 1)
    with pytest.raises(CorruptLog):
        Record.from_line("0 0 K novalue", 1)
