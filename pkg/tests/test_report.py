import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fluxcrit.criterion import Verdict
from fluxcrit.report import csv_text, dumps


def test_sorted_keys_and_float_format():
    text = dumps({"b": 0.1, "a": [1, 2.5, np.float64(1 / 3)], "c": {"z": None, "y": True}})
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert "0.10000000000000001" in text
    assert "0.33333333333333331" in text
    assert text.endswith("}\n")
    back = json.loads(text)
    assert back["a"][2] == 1 / 3 and back["c"] == {"z": None, "y": True}


def test_special_values_and_types():
    text = dumps({"n": math.nan, "i": math.inf, "v": Verdict.SATISFIED, "k": np.int64(3),
                  "arr": np.array([1.0, 2.0]), "flag": np.bool_(False), "s": 'q"\\\n'})
    back = json.loads(text)
    assert back == {"n": "NaN", "i": "Infinity", "v": "CriterionSatisfied", "k": 3,
                    "arr": [1.0, 2.0], "flag": False, "s": 'q"\\\n'}
    assert dumps([]) == "[]\n" and dumps({}) == "{}\n"
    with pytest.raises(TypeError):
        dumps({"x": object()})


finite = st.floats(allow_nan=False, allow_infinity=False)
tree = st.recursive(st.none() | st.booleans() | st.integers() | finite | st.text(),
                    lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(), kids, max_size=4),
                    max_leaves=20)


@given(tree)
def test_round_trip_and_stability(obj):
    text = dumps(obj)
    assert json.loads(text) == obj
    assert dumps(json.loads(text)) == text


def test_csv_text():
    out = csv_text(["r", "F_p"], [(0.5, 1.0 / 3), (0.25, "x")])
    assert out == "r,F_p\n0.5,0.33333333333333331\n0.25,x\n"
