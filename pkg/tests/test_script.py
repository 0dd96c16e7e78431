import pytest
from hypothesis import given, strategies as st

from trilogen.script import Clip, PromptScript, ScriptError, clip_frame_ranges, parse_script, serialize_script

words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)
texts = st.lists(words, min_size=1, max_size=4).map(" ".join)


@st.composite
def scripts(draw):
    n = draw(st.integers(1, 6))
    gaps = draw(st.lists(st.integers(1, 40), min_size=n - 1, max_size=n - 1))
    starts = [1]
    for g in gaps:
        starts.append(starts[-1] + g)
    return PromptScript(tuple(Clip(t, draw(texts)) for t in starts))


def test_parse_example():
    s = parse_script("1: a trilobite glides over sand; 49: it burrows")
    assert s.starts == [1, 49]
    assert s.clips[0].text == "a trilobite glides over sand"


@pytest.mark.parametrize("src, message", [
    ("1: a; 1: b", "non-increasing start_frame at entry 2"),
    ("", "empty script"),
    ("   ", "empty script"),
    ("1: a; x: b", "non-integer start_frame 'x' at entry 2"),
    ("1: a; 2.5: b", "non-integer start_frame '2.5' at entry 2"),
    ("2: a", "first start_frame must be 1"),
    ("1: a; 5:   ", "empty text at entry 2"),
    ("1: a; 5 b", "missing ':' at entry 2"),
    ("1: a;", "empty entry at entry 2"),
    ("1: a; 9: b; 4: c", "non-increasing start_frame at entry 3"),
    ("1: a: b", "reserved delimiter in text at entry 1"),
])
def test_parse_errors(src, message):
    with pytest.raises(ScriptError, match=message):
        parse_script(src)


def test_serialize_examples():
    assert serialize_script(PromptScript((Clip(1, "x y"),))) == "1: x y"
    three = PromptScript((Clip(1, "a"), Clip(3, "b"), Clip(9, "c")))
    assert serialize_script(three).count(";") == 2


def test_whitespace_is_ignored():
    assert parse_script("  1 :  a b ;\n 4:c  ") == PromptScript((Clip(1, "a b"), Clip(4, "c")))


@given(scripts())
def test_round_trip(s):
    assert parse_script(serialize_script(s)) == s


def test_invalid_construction():
    with pytest.raises(ScriptError):
        PromptScript(())
    with pytest.raises(ScriptError):
        PromptScript((Clip(1, "a;b"),))


@pytest.mark.parametrize("starts, f, expected", [
    ([1, 49], 100, [(1, 48), (49, 100)]),
    ([1], 16, [(1, 16)]),
    ([1, 5, 9], 12, [(1, 4), (5, 8), (9, 12)]),
    ([1, 5], 5, [(1, 4), (5, 5)]),
])
def test_ranges(starts, f, expected):
    s = PromptScript(tuple(Clip(t, "x") for t in starts))
    assert clip_frame_ranges(s, f) == expected


def test_ranges_too_short():
    with pytest.raises(ScriptError):
        clip_frame_ranges(parse_script("1: a; 10: b"), 9)


@given(scripts(), st.integers(0, 30))
def test_ranges_partition(s, extra):
    f = s.starts[-1] + extra
    ranges = clip_frame_ranges(s, f)
    covered = [t for lo, hi in ranges for t in range(lo, hi + 1)]
    assert covered == list(range(1, f + 1))
