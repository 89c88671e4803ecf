import pytest

from sfmkit.config import coerce, read_config
from sfmkit.errors import ParseError


def test_coercion_types():
    assert coerce("42") == 42 and isinstance(coerce("42"), int)
    assert coerce("2.5") == 2.5
    assert coerce("true") is True
    assert coerce("Off") is False
    assert coerce("dlt") == "dlt"
    assert coerce(" 7 ") == 7


def test_read_config(tmp_path):
    p = tmp_path / "cfg"
    p.write_text("# comment\n"
                 "ratio = 0.7\n"
                 "\n"
                 "min_inliers=10\n"
                 "triangulation=midpoint\n")
    cfg = read_config(p)
    assert cfg == {"ratio": 0.7, "min_inliers": 10,
                   "triangulation": "midpoint"}


def test_read_config_bad_line(tmp_path):
    p = tmp_path / "cfg"
    p.write_text("ratio 0.7\n")
    with pytest.raises(ParseError) as e:
        read_config(p)
    assert e.value.line == 1


def test_read_config_empty_key(tmp_path):
    p = tmp_path / "cfg"
    p.write_text("=5\n")
    with pytest.raises(ParseError):
        read_config(p)
